use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::data::SparseRow;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Stream};

const CLS_W: &str = "cls.w";
const CLS_B: &str = "cls.b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Train only the linear head on fixed cell embeddings.
    pub freeze_trunk: bool,
    pub seed: u64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-2,
            batch_size: 32,
            freeze_trunk: true,
            seed: 0,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Validation("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 || self.split[0] == 0.0 {
            return Err(Error::Validation(format!("split {:?} must be non-negative and sum to 1", self.split)));
        }
        Ok(())
    }
}

/// Trunk plus max-pool plus linear layer.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub model: Model,
    /// `[d_enc, n_classes]`.
    pub head: Array2<f64>,
    /// `[n_classes]`.
    pub bias: Array1<f64>,
}

impl Classifier {
    pub fn n_classes(&self) -> usize {
        self.head.ncols()
    }

    /// Logits `[cells, n_classes]` for fixed cell embeddings.
    pub fn logits_from_embeddings(&self, emb: &Array2<f64>) -> Array2<f64> {
        emb.dot(&self.head) + &self.bias
    }

    pub fn predict(&self, cells: &[SparseRow]) -> Result<Vec<usize>> {
        let emb = self.model.embed_cells(cells)?;
        Ok(argmax_rows(&self.logits_from_embeddings(&emb)))
    }
}

fn argmax_rows(a: &Array2<f64>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map_or(0, |(k, _)| k)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Macro-averaged precision and F1 over `n_classes`; a class that is never
/// predicted (or never present) contributes 0 where the ratio is undefined.
pub fn classification_metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ClassMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut tp = vec![0usize; n_classes];
    let mut n_pred = vec![0usize; n_classes];
    let mut n_true = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::OutOfRange {
                what: "class",
                index: p.max(t),
                limit: n_classes,
            });
        }
        n_pred[p] += 1;
        n_true[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut prec, mut f1) = (0.0, 0.0);
    for k in 0..n_classes {
        let p = ratio(tp[k], n_pred[k]);
        let r = ratio(tp[k], n_true[k]);
        prec += p;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    Ok(ClassMetrics {
        macro_precision: prec / n_classes as f64,
        macro_f1: f1 / n_classes as f64,
        accuracy: ratio(tp.iter().sum(), pred.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub test: ClassMetrics,
    pub valid: Option<ClassMetrics>,
    /// Mean training cross-entropy per epoch.
    pub train_loss: Vec<f64>,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

/// Shuffled `(train, valid, test)` index sets.
fn three_way_split(n: usize, fractions: [f64; 3], seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split, 1));
    let n_valid = (n as f64 * fractions[1]).round() as usize;
    let n_test = ((n as f64 * fractions[2]).round() as usize).min(n - n_valid.min(n));
    let test = idx.split_off(n - n_test);
    let valid = idx.split_off(idx.len() - n_valid.min(idx.len()));
    [idx, valid, test]
}

fn logits_graph(g: &mut Graph, p: &Bound, emb: Var) -> Var {
    let z = g.matmul(emb, p.var(CLS_W));
    g.add_row(z, p.var(CLS_B))
}

/// Trains a linear classifier on top of `model`'s cell embeddings.
///
/// Cells are split `cfg.split` (train / validation / test). With
/// `freeze_trunk`, embeddings are computed once and only the head learns;
/// otherwise every trunk parameter is updated too. Metrics are reported on
/// the test split.
pub fn finetune_annotation(
    model: Model,
    cells: &[SparseRow],
    labels: &[usize],
    n_classes: usize,
    cfg: &FinetuneConfig,
) -> Result<(Classifier, FinetuneReport)> {
    cfg.validate()?;
    if cells.len() != labels.len() {
        return Err(Error::Shape(format!("{} cells, {} labels", cells.len(), labels.len())));
    }
    if n_classes < 2 {
        return Err(Error::Validation("need at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::OutOfRange {
            what: "label",
            index: bad,
            limit: n_classes,
        });
    }
    let [train, valid, test] = three_way_split(cells.len(), cfg.split, cfg.seed);
    if test.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    let mut present = vec![false; n_classes];
    train.iter().for_each(|&i| present[labels[i]] = true);
    if let Some(k) = present.iter().position(|&p| !p) {
        return Err(Error::Validation(format!("class {k} is absent from the training split")));
    }

    let d = model.config.encoder.dim;
    let mut store = if cfg.freeze_trunk { ParamStore::new() } else { model.params.clone() };
    let mut r = rng::stream(cfg.seed, Stream::Init, 1);
    store.insert_normal(CLS_W, (d, n_classes), 1.0 / (d as f64).sqrt(), &mut r);
    store.insert(CLS_B, Array2::zeros((1, n_classes)));
    let mut opt = Adam::new(&store, 0.9, 0.999, 1e-8);

    let frozen_emb = if cfg.freeze_trunk {
        Some(model.embed_cells(cells)?)
    } else {
        None
    };

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, Stream::Batch, epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = match &frozen_emb {
                Some(emb) => {
                    let mut g = Graph::new();
                    let p = store.bind(&mut g, |_| true);
                    let x = g.constant(emb.select(Axis(0), batch));
                    let z = logits_graph(&mut g, &p, x);
                    let l = g.cross_entropy(z, &targets);
                    let l = g.scale(l, 1.0 / batch.len() as f64);
                    let gr = g.backward(l);
                    (g.value(l)[[0, 0]], p.gradients(&g, &gr))
                }
                None => unfrozen_batch(&model, &store, cells, batch, &targets)?,
            };
            total += loss * batch.len() as f64;
            opt.step(&mut store, &grads, cfg.learning_rate);
            if !store.all_finite() {
                return Err(Error::NonFinite { stage: "finetune", layer: 0 });
            }
        }
        train_loss.push(total / train.len() as f64);
    }

    let head = store.get(CLS_W).expect("head").clone();
    let bias = store.get(CLS_B).expect("bias").row(0).to_owned();
    let trunk = if cfg.freeze_trunk {
        model
    } else {
        let mut m = model;
        for (name, t) in m.params.iter_mut() {
            *t = store.get(name).expect("trunk tensor").clone();
        }
        m
    };
    let clf = Classifier {
        model: trunk,
        head,
        bias,
    };

    let score = |idx: &[usize]| -> Result<Option<ClassMetrics>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let emb = match (&frozen_emb, cfg.freeze_trunk) {
            (Some(e), true) => e.select(Axis(0), idx),
            _ => {
                let subset: Vec<SparseRow> = idx.iter().map(|&i| cells[i].clone()).collect();
                clf.model.embed_cells(&subset)?
            }
        };
        let pred = argmax_rows(&clf.logits_from_embeddings(&emb));
        let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        classification_metrics(&pred, &truth, n_classes).map(Some)
    };
    let test_metrics = score(&test)?.expect("non-empty test split");
    let valid_metrics = score(&valid)?;
    let report = FinetuneReport {
        test: test_metrics,
        valid: valid_metrics,
        train_loss,
        n_train: train.len(),
        n_valid: valid.len(),
        n_test: test.len(),
    };
    Ok((clf, report))
}

/// Mean cross-entropy and gradients w.r.t. trunk and head for one batch.
fn unfrozen_batch(
    model: &Model,
    store: &ParamStore,
    cells: &[SparseRow],
    batch: &[usize],
    targets: &[usize],
) -> Result<(f64, ParamStore)> {
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, ParamStore)> = batch
        .par_iter()
        .zip(targets)
        .map(|(&i, &t)| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| true);
            let emb = model.embedding_graph(&mut g, &p, &cells[i])?;
            let z = logits_graph(&mut g, &p, emb);
            let l = g.cross_entropy(z, &[t]);
            let l = g.scale(l, scale);
            let gr = g.backward(l);
            Ok((g.value(l)[[0, 0]], p.gradients(&g, &gr)))
        })
        .collect::<Result<_>>()?;
    let mut grads = store.zeros_like();
    let mut loss = 0.0;
    for (l, gr) in &parts {
        loss += l;
        grads.add_assign(gr);
    }
    Ok((loss, grads))
}
