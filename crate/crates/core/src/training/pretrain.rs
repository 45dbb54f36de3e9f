use std::fmt;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::optim::{clip_global_norm, Adam};
use super::{batch_gradients, evaluate_masked, LossReport, TrainConfig};
use crate::data::SparseRow;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, build_mask_plan, mask_cells, MaskConfig, MaskedRow};
use crate::model::{save_checkpoint, Model};
use crate::packing::bucket_batches;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
        })
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub masked_mse: f64,
    pub nz_mse: f64,
    pub z_mse: f64,
    pub lr: f64,
}

impl MetricRow {
    fn new(step: usize, split: Split, r: &LossReport, lr: f64) -> Self {
        Self {
            step,
            split,
            masked_mse: r.masked_mse,
            nz_mse: r.nz_mse,
            z_mse: r.z_mse,
            lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub metrics: Vec<MetricRow>,
    pub initial_valid: LossReport,
    pub final_valid: LossReport,
    pub steps: usize,
}

impl PretrainReport {
    pub fn valid_curve(&self) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter(|m| m.split == Split::Valid)
            .map(|m| (m.step, m.masked_mse))
            .collect()
    }

    pub fn train_curve(&self) -> Vec<(usize, f64)> {
        self.metrics
            .iter()
            .filter(|m| m.split == Split::Train)
            .map(|m| (m.step, m.masked_mse))
            .collect()
    }
}

/// Deterministic `(train, valid)` index split of `n` cells.
pub fn split_indices(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split, 0));
    let n_valid = ((n as f64) * valid_fraction).round() as usize;
    let valid = idx.split_off(n - n_valid.min(n));
    (idx, valid)
}

/// Masks for held-out cells, fixed for the whole run so successive
/// validation losses are comparable.
pub fn frozen_validation_masks(valid: &[SparseRow], mask: &MaskConfig) -> Result<Vec<MaskedRow>> {
    let frozen = MaskConfig {
        seed: rng::derive_seed(mask.seed, Stream::Mask, u64::MAX),
        ..mask.clone()
    };
    mask_cells(valid, &frozen, 0)
}

/// Masked-MSE report of `model` on pre-masked validation cells.
pub fn validation_loss(model: &Model, frozen: &[MaskedRow]) -> Result<LossReport> {
    evaluate_masked(model, frozen)
}

/// Cell indices for every step, epoch by epoch.
fn schedule(lengths: &[usize], cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(cfg.steps);
    let mut epoch = 0u64;
    while out.len() < cfg.steps {
        let mut r = rng::stream(cfg.seed, Stream::Batch, epoch);
        let batches = if cfg.bucket_pool > 0 {
            bucket_batches(lengths, cfg.batch_size, cfg.bucket_pool, &mut r)
        } else {
            let mut idx: Vec<usize> = (0..lengths.len()).collect();
            idx.shuffle(&mut r);
            idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
        };
        out.extend(batches.into_iter().take(cfg.steps - out.len()));
        epoch += 1;
    }
    out
}

fn masked_batch(train: &[SparseRow], idx: &[usize], step: usize, mask: &MaskConfig) -> Result<Vec<MaskedRow>> {
    idx.iter()
        .map(|&i| {
            let plan = build_mask_plan(&train[i], mask, ((step as u64) << 32) | i as u64)?;
            apply_mask(&train[i], &plan)
        })
        .collect()
}

/// Masked-value pre-training.
///
/// Validation loss is recorded at step 0, every `eval_every` steps and after
/// the last step. With `out_dir`, the run writes `run.json` up front and
/// `metrics.csv` plus `model.ckpt` at the end. If a step produces a
/// non-finite loss or parameter, the parameters from before that step are
/// checkpointed and the error is returned.
pub fn pretrain(
    model: &mut Model,
    train: &[SparseRow],
    valid: &[SparseRow],
    mask: &MaskConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainReport> {
    cfg.validate()?;
    mask.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("pre-training needs training and validation cells".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = serde_json::json!({
            "model": model.config,
            "mask": mask,
            "train": cfg,
            "n_train_cells": train.len(),
            "n_valid_cells": valid.len(),
            "n_parameters": model.n_parameters(),
        });
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(&echo)?).map_err(|e| Error::io(&path, e))?;
    }

    let frozen = frozen_validation_masks(valid, mask)?;
    let lengths: Vec<usize> = train.iter().map(SparseRow::nnz).collect();
    let plan = schedule(&lengths, cfg);
    let mut opt = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps);

    let initial_valid = validation_loss(model, &frozen)?;
    let mut metrics = vec![MetricRow::new(0, Split::Valid, &initial_valid, cfg.lr_at(0))];
    let mut final_valid = initial_valid;
    log::info!("step 0 valid masked_mse {:.5}", initial_valid.masked_mse);

    let mut run = |model: &mut Model, next: &mut dyn FnMut() -> Option<Result<Vec<MaskedRow>>>| -> Result<()> {
        for step in 0..cfg.steps {
            let cells = next().expect("one batch per step")?;
            let lr = cfg.lr_at(step);
            let last_good = model.params.clone();
            let fail = |model: &mut Model, e: Error| {
                model.params = last_good.clone();
                if let Some(dir) = out_dir {
                    let _ = save_checkpoint(model, dir.join("model.ckpt"));
                }
                e
            };
            let mut bg = match batch_gradients(model, &cells, cfg.loss_normalization, &|_| true) {
                Ok(b) => b,
                Err(e @ Error::NonFinite { .. }) => return Err(fail(model, e)),
                Err(e) => return Err(e),
            };
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut bg.grads, c);
            }
            opt.step(&mut model.params, &bg.grads, lr);
            if !model.params.all_finite() {
                return Err(fail(model, Error::NonFinite { stage: "update", layer: 0 }));
            }
            metrics.push(MetricRow::new(step + 1, Split::Train, &bg.report, lr));
            let done = step + 1 == cfg.steps;
            if done || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
                let v = validation_loss(model, &frozen)?;
                log::info!(
                    "step {} train {:.5} valid {:.5}",
                    step + 1,
                    bg.report.masked_mse,
                    v.masked_mse
                );
                metrics.push(MetricRow::new(step + 1, Split::Valid, &v, lr));
                final_valid = v;
            }
        }
        Ok(())
    };

    let outcome = if cfg.prefetch == 0 {
        let mut it = plan.iter().enumerate().map(|(s, idx)| masked_batch(train, idx, s, mask));
        run(model, &mut || it.next())
    } else {
        std::thread::scope(|scope| {
            let (tx, rx) = sync_channel(cfg.prefetch);
            let plan = &plan;
            scope.spawn(move || {
                for (s, idx) in plan.iter().enumerate() {
                    if tx.send(masked_batch(train, idx, s, mask)).is_err() {
                        break;
                    }
                }
            });
            let result = run(model, &mut || rx.recv().ok());
            drop(rx);
            result
        })
    };

    if let Some(dir) = out_dir {
        write_metrics(&metrics, &dir.join("metrics.csv"))?;
    }
    outcome?;
    if let Some(dir) = out_dir {
        save_checkpoint(model, dir.join("model.ckpt"))?;
    }
    Ok(PretrainReport {
        metrics,
        initial_valid,
        final_valid,
        steps: cfg.steps,
    })
}

/// `step,split,masked_mse,nz_mse,z_mse,lr`.
pub fn write_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
