//! Masked-value objective, gradients, optimizer and training loops.

mod finetune;
mod optim;
mod pretrain;
mod recovery;

pub use finetune::{classification_metrics, finetune_annotation, ClassMetrics, Classifier, FinetuneConfig, FinetuneReport};
pub use optim::{clip_global_norm, Adam};
pub use pretrain::{pretrain, split_indices, validation_loss, MetricRow, PretrainReport, Split};
pub use recovery::{pearson, recovery_correlation, BucketCorrelation, Correlation, RecoveryReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{baseline_bin, BinScheme};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{MaskPlan, MaskedRow};
use crate::model::{Model, Objective};
use crate::params::ParamStore;

/// Denominator of the batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Number of masked positions in the batch: a true mean.
    #[default]
    MaskedCount,
    /// `(n_genes - m) * batch_size`, with `m` the packed encoder length.
    GeneMinusEncoderLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Validation cadence in steps; 0 evaluates only at the start and end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub loss_normalization: LossNormalization,
    /// Groups cells of similar length into batches when > 0 (pool size in
    /// batches).
    #[serde(default)]
    pub bucket_pool: usize,
    /// Depth of the background batch queue; 0 prepares batches inline.
    #[serde(default)]
    pub prefetch: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            learning_rate: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: Some(1.0),
            warmup_steps: 0,
            seed: 0,
            eval_every: default_eval_every(),
            loss_normalization: LossNormalization::MaskedCount,
            bucket_pool: 0,
            prefetch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Validation("invalid Adam moments".into()));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::Validation("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` under linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Squared-error summary over masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub masked_mse: f64,
    pub nz_mse: f64,
    pub z_mse: f64,
    pub n_nonzero: usize,
    pub n_zero: usize,
}

impl LossReport {
    /// From summed squared errors per class. An empty class reports 0.
    pub fn from_sums(sse_nz: f64, n_nonzero: usize, sse_z: f64, n_zero: usize) -> Result<Self> {
        let n = n_nonzero + n_zero;
        if n == 0 {
            return Err(Error::Empty("no masked positions to score".into()));
        }
        let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
        Ok(Self {
            masked_mse: (sse_nz + sse_z) / n as f64,
            nz_mse: mean(sse_nz, n_nonzero),
            z_mse: mean(sse_z, n_zero),
            n_nonzero,
            n_zero,
        })
    }

    pub fn n_masked(&self) -> usize {
        self.n_nonzero + self.n_zero
    }
}

/// Squared-error sums `(nz, n_nz, z, n_z)` of one cell.
fn cell_sums(pred: &[f64], cell: &MaskedRow) -> (f64, usize, f64, usize) {
    let mut acc = (0.0, 0, 0.0, 0);
    for s in &cell.masked {
        let e = (pred[s.gene] - s.truth).powi(2);
        if s.was_nonzero {
            acc.0 += e;
            acc.1 += 1;
        } else {
            acc.2 += e;
            acc.3 += 1;
        }
    }
    acc
}

fn merge(a: (f64, usize, f64, usize), b: (f64, usize, f64, usize)) -> (f64, usize, f64, usize) {
    (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3)
}

/// Mean squared error over exactly the masked positions of each cell.
///
/// `truth[c]` and `pred[c]` are dense rows; `plans[c]` names the masked
/// positions.
pub fn masked_mse(truth: &[Vec<f64>], pred: &[Vec<f64>], plans: &[MaskPlan]) -> Result<LossReport> {
    if truth.len() != pred.len() || truth.len() != plans.len() {
        return Err(Error::Shape(format!(
            "{} truth rows, {} prediction rows, {} plans",
            truth.len(),
            pred.len(),
            plans.len()
        )));
    }
    let mut acc = (0.0, 0, 0.0, 0);
    for ((t, p), plan) in truth.iter().zip(pred).zip(plans) {
        if t.len() != p.len() || t.len() != plan.n_genes {
            return Err(Error::Shape("row lengths differ from plan".into()));
        }
        for &g in &plan.masked_nonzero {
            acc.0 += (t[g] - p[g]).powi(2);
            acc.1 += 1;
        }
        for &g in &plan.masked_zero {
            acc.2 += (t[g] - p[g]).powi(2);
            acc.3 += 1;
        }
    }
    LossReport::from_sums(acc.0, acc.1, acc.2, acc.3)
}

/// Same report computed from masked rows, whose slots carry the truth.
pub fn masked_mse_rows(pred: &[Vec<f64>], cells: &[MaskedRow]) -> Result<LossReport> {
    let acc = pred
        .iter()
        .zip(cells)
        .map(|(p, c)| cell_sums(p, c))
        .fold((0.0, 0, 0.0, 0), merge);
    LossReport::from_sums(acc.0, acc.1, acc.2, acc.3)
}

/// Denominator applied to a batch's summed loss.
pub fn loss_denominator(cells: &[MaskedRow], norm: LossNormalization) -> Result<f64> {
    let d = match norm {
        LossNormalization::MaskedCount => cells.iter().map(|c| c.masked.len()).sum::<usize>() as f64,
        LossNormalization::GeneMinusEncoderLength => {
            let m = cells.iter().map(|c| c.survivors.nnz()).max().unwrap_or(0);
            let n = cells.first().map_or(0, |c| c.n_genes);
            (n.saturating_sub(m) * cells.len()) as f64
        }
    };
    if d <= 0.0 {
        return Err(Error::Empty("batch has no masked positions".into()));
    }
    Ok(d)
}

/// Classification target of a value: its round-to-nearest bin, capped.
pub fn class_target(v: f64, bins: usize) -> usize {
    baseline_bin(v.max(0.0), BinScheme::RoundZero, None)
        .unwrap_or(0)
        .min(bins - 1)
}

/// Summed loss of one cell's masked positions, divided by `denom`.
pub fn cell_loss_graph(g: &mut Graph, model: &Model, output: Var, cell: &MaskedRow, denom: f64) -> Var {
    let sources: Vec<(Var, usize)> = cell.masked.iter().map(|s| (output, s.gene)).collect();
    let picked = g.rows(&sources);
    let total = match model.config.objective {
        Objective::Regression => {
            let truth = ndarray::Array2::from_shape_vec(
                (cell.masked.len(), 1),
                cell.masked.iter().map(|s| s.truth).collect(),
            )
            .expect("column");
            let t = g.constant(truth);
            let d = g.sub(picked, t);
            let sq = g.square(d);
            g.sum(sq)
        }
        Objective::Classification => {
            let targets: Vec<usize> = cell
                .masked
                .iter()
                .map(|s| class_target(s.truth, model.config.bins))
                .collect();
            g.cross_entropy(picked, &targets)
        }
    };
    g.scale(total, 1.0 / denom)
}

/// Result of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Objective value (normalized as requested).
    pub loss: f64,
    /// Squared-error report on the head's value predictions.
    pub report: LossReport,
    pub grads: ParamStore,
}

/// Loss and exact gradients for a batch of masked cells.
///
/// Cells run in parallel, each on its own graph; per-cell gradients are
/// summed in cell order so the result does not depend on scheduling.
/// Parameters rejected by `trainable` get zero gradients.
pub fn batch_gradients(
    model: &Model,
    cells: &[MaskedRow],
    norm: LossNormalization,
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<BatchGrad> {
    let denom = loss_denominator(cells, norm)?;
    let per_cell: Vec<(f64, (f64, usize, f64, usize), ParamStore)> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, trainable);
            let out = model.forward_cell(&mut g, &p, cell).map_err(|e| match e {
                Error::NoSurvivors { .. } => Error::NoSurvivors { cell: i },
                other => other,
            })?;
            let loss = cell_loss_graph(&mut g, model, out.output, cell, denom);
            let grads = g.backward(loss);
            let pred = value_column(g.value(out.output), model.config.objective);
            Ok((g.value(loss)[[0, 0]], cell_sums(&pred, cell), p.gradients(&g, &grads)))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    let mut acc = (0.0, 0, 0.0, 0);
    for (l, s, gr) in &per_cell {
        loss += l;
        acc = merge(acc, *s);
        grads.add_assign(gr);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { stage: "loss", layer: 0 });
    }
    Ok(BatchGrad {
        loss,
        report: LossReport::from_sums(acc.0, acc.1, acc.2, acc.3)?,
        grads,
    })
}

/// Batch objective value without gradients.
pub fn batch_loss(model: &Model, cells: &[MaskedRow], norm: LossNormalization) -> Result<f64> {
    let denom = loss_denominator(cells, norm)?;
    let parts: Vec<f64> = cells
        .par_iter()
        .map(|cell| {
            let mut g = Graph::new();
            let p = model.bind_frozen(&mut g);
            let out = model.forward_cell(&mut g, &p, cell)?;
            let loss = cell_loss_graph(&mut g, model, out.output, cell, denom);
            Ok(g.value(loss)[[0, 0]])
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// Per-gene value predictions from a head output.
fn value_column(out: &ndarray::Array2<f64>, objective: Objective) -> Vec<f64> {
    match objective {
        Objective::Regression => out.column(0).to_vec(),
        Objective::Classification => out
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0.0, |(k, _)| k as f64)
            })
            .collect(),
    }
}

/// Squared-error report of the model's predictions on masked cells.
pub fn evaluate_masked(model: &Model, cells: &[MaskedRow]) -> Result<LossReport> {
    let pred = model.predict_values_for(cells)?;
    masked_mse_rows(&pred, cells)
}

#[cfg(test)]
mod tests;
