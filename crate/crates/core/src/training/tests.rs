use std::collections::BTreeMap;

use super::*;
use crate::data::SparseRow;
use crate::masking::{apply_mask, mask_cells, MaskConfig, Replacement};
use crate::model::{AttentionBackend, BlockSpec, ModelConfig};
use crate::rng::{stream, Stream};
use rand::Rng as _;

fn plan(n: usize, nz: Vec<usize>, z: Vec<usize>) -> MaskPlan {
    MaskPlan {
        n_genes: n,
        replacement: nz.iter().chain(&z).map(|&g| (g, Replacement::MaskToken)).collect(),
        masked_nonzero: nz,
        masked_zero: z,
    }
}

#[test]
fn single_position_loss() {
    let r = masked_mse(&[vec![2.0, 0.0]], &[vec![0.0, 0.0]], &[plan(2, vec![0], vec![])]).unwrap();
    assert_eq!(r.masked_mse, 4.0);
    assert_eq!(r.n_masked(), 1);
}

#[test]
fn three_position_loss() {
    let truth = vec![vec![1.0, 0.0, 3.0, 0.0]];
    let pred = vec![vec![0.0, 2.0, 1.0, 0.0]];
    let r = masked_mse(&truth, &pred, &[plan(4, vec![0, 2], vec![1])]).unwrap();
    assert_eq!(r.masked_mse, 3.0);
    assert_eq!((r.nz_mse, r.z_mse), (2.5, 4.0));
    let both = (r.n_nonzero as f64 * r.nz_mse + r.n_zero as f64 * r.z_mse) / r.n_masked() as f64;
    assert_eq!(both, r.masked_mse);
}

#[test]
fn perfect_prediction_and_empty_plan() {
    let t = vec![vec![1.0, 0.0, 3.0]];
    assert_eq!(masked_mse(&t, &t, &[plan(3, vec![0], vec![1])]).unwrap().masked_mse, 0.0);
    assert!(matches!(masked_mse(&t, &t, &[plan(3, vec![], vec![])]), Err(Error::Empty(_))));
}

#[test]
fn unmasked_positions_are_ignored() {
    let t = vec![vec![1.0, 5.0, 0.0]];
    let p = vec![vec![1.0, -100.0, 7.0]];
    let r = masked_mse(&t, &p, &[plan(3, vec![0], vec![])]).unwrap();
    assert_eq!(r.masked_mse, 0.0);
}

#[test]
fn denominators() {
    let c = SparseRow::from_dense(&[1.0, 0.0, 2.0, 3.0, 0.0, 0.0]);
    let rows = vec![
        apply_mask(&c, &plan(6, vec![0], vec![1])).unwrap(),
        apply_mask(&c, &plan(6, vec![0, 2], vec![])).unwrap(),
    ];
    assert_eq!(loss_denominator(&rows, LossNormalization::MaskedCount).unwrap(), 4.0);
    // widest survivor set is 2 genes: (6 - 2) * 2 cells
    assert_eq!(loss_denominator(&rows, LossNormalization::GeneMinusEncoderLength).unwrap(), 8.0);
}

#[test]
fn class_targets_round_and_cap() {
    assert_eq!(class_target(0.0, 10), 0);
    assert_eq!(class_target(2.6, 10), 3);
    assert_eq!(class_target(42.0, 10), 9);
}

#[test]
fn lr_warmup_is_linear() {
    let cfg = TrainConfig {
        warmup_steps: 4,
        learning_rate: 1.0,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s)).collect();
    assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
}

fn tiny_config(backend: AttentionBackend) -> ModelConfig {
    let mut c = ModelConfig::new(BlockSpec::new(1, 2, 8), BlockSpec::new(1, 2, 8), 12);
    c.bins = 6;
    c.attention = backend;
    c.n_random_features = 16;
    c.value_bias = true;
    c.seed = 11;
    c
}

fn tiny_cells() -> Vec<MaskedRow> {
    let dense = [
        [0.0, 1.2, 0.0, 0.4, 2.2, 0.0, 0.0, 3.1, 0.0, 0.9, 0.0, 0.0],
        [1.7, 0.0, 0.0, 0.0, 0.6, 2.4, 0.0, 0.0, 1.1, 0.0, 0.3, 0.0],
    ];
    let plans = [
        MaskPlan {
            n_genes: 12,
            masked_nonzero: vec![1, 7],
            masked_zero: vec![2, 11],
            replacement: BTreeMap::from([
                (1, Replacement::MaskToken),
                (7, Replacement::Keep),
                // a kept zero would sit on the leaky-ReLU kink of the value
                // encoder, where finite differences are meaningless
                (2, Replacement::RandomValue(0.8)),
                (11, Replacement::MaskToken),
            ]),
        },
        plan(12, vec![4, 8], vec![6]),
    ];
    dense
        .iter()
        .zip(&plans)
        .map(|(d, p)| apply_mask(&SparseRow::from_dense(d), p).unwrap())
        .collect()
}

/// Relative error of analytic against central-difference gradients, per
/// parameter tensor, on up to `per_tensor` sampled entries.
fn gradient_errors(model: &Model, cells: &[MaskedRow], per_tensor: usize) -> Vec<(String, f64)> {
    let analytic = batch_gradients(model, cells, LossNormalization::MaskedCount, &|_| true)
        .unwrap()
        .grads;
    let mut r = stream(1, Stream::Data, 0);
    let names: Vec<String> = model.params.names().map(str::to_owned).collect();
    names
        .into_iter()
        .map(|name| {
            let len = model.params.get(&name).unwrap().len();
            let idx: Vec<usize> = if len <= per_tensor {
                (0..len).collect()
            } else {
                (0..per_tensor).map(|_| r.random_range(0..len)).collect()
            };
            let (mut diff, mut norm) = (0.0f64, 0.0f64);
            for i in idx {
                let mut probe = model.clone();
                let theta = probe.params.get(&name).unwrap().as_slice().unwrap()[i];
                let h = 1e-3 * theta.abs().max(1e-1);
                let mut at = |v: f64| {
                    probe.params.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = v;
                    batch_loss(&probe, cells, LossNormalization::MaskedCount).unwrap()
                };
                let numeric = (at(theta + h) - at(theta - h)) / (2.0 * h);
                let a = analytic.get(&name).unwrap().as_slice().unwrap()[i];
                diff += (a - numeric).powi(2);
                norm += numeric.powi(2);
            }
            let err = if norm.sqrt() < 1e-9 { diff.sqrt() } else { (diff / norm).sqrt() };
            (name, err)
        })
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    for backend in [AttentionBackend::Exact, AttentionBackend::LinearRandomFeatures] {
        let model = Model::new(tiny_config(backend)).unwrap();
        for (name, err) in gradient_errors(&model, &tiny_cells(), 24) {
            assert!(err < 1e-4, "{backend:?} {name}: relative error {err:e}");
        }
    }
}

#[test]
fn classification_gradients_match_finite_differences() {
    let mut c = tiny_config(AttentionBackend::Exact);
    c.objective = Objective::Classification;
    let model = Model::new(c).unwrap();
    for (name, err) in gradient_errors(&model, &tiny_cells(), 12) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn batch_loss_is_order_invariant() {
    let model = Model::new(tiny_config(AttentionBackend::Exact)).unwrap();
    let mut cells = tiny_cells();
    let a = batch_loss(&model, &cells, LossNormalization::MaskedCount).unwrap();
    cells.reverse();
    let b = batch_loss(&model, &cells, LossNormalization::MaskedCount).unwrap();
    assert!((a - b).abs() < 1e-12);
    let g = batch_gradients(&model, &cells, LossNormalization::MaskedCount, &|_| true).unwrap();
    assert!((g.loss - a).abs() < 1e-12);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let model = Model::new(tiny_config(AttentionBackend::Exact)).unwrap();
    let g = batch_gradients(&model, &tiny_cells(), LossNormalization::MaskedCount, &|n| n.starts_with("dec."))
        .unwrap();
    for (name, t) in g.grads.iter() {
        if !name.starts_with("dec.") {
            assert!(t.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(g.grads.global_norm() > 0.0);
}

fn toy_data(n_cells: usize) -> Vec<SparseRow> {
    let mut r = stream(3, Stream::Data, 0);
    (0..n_cells)
        .map(|_| {
            let d: Vec<f64> = (0..12)
                .map(|_| if r.random_bool(0.4) { r.random_range(0.5..3.0) } else { 0.0 })
                .collect();
            let mut d = d;
            d[0] = 1.0;
            SparseRow::from_dense(&d)
        })
        .collect()
}

fn short_run(lr: f64, seed: u64) -> PretrainReport {
    let mut model = Model::new(tiny_config(AttentionBackend::Exact)).unwrap();
    let data = toy_data(24);
    let mask = MaskConfig::with_ratio(0.3, 7);
    let cfg = TrainConfig {
        batch_size: 4,
        steps: 6,
        learning_rate: lr,
        eval_every: 2,
        seed,
        ..TrainConfig::default()
    };
    pretrain(&mut model, &data[..18], &data[18..], &mask, &cfg, None).unwrap()
}

#[test]
fn zero_learning_rate_keeps_validation_loss() {
    let rep = short_run(0.0, 1);
    let curve = rep.valid_curve();
    assert!(curve.len() >= 4);
    assert!(curve.iter().all(|(_, v)| (v - curve[0].1).abs() < 1e-9));
}

#[test]
fn same_seed_same_curves() {
    let a = short_run(1e-2, 4);
    let b = short_run(1e-2, 4);
    assert_eq!(a.metrics, b.metrics);
    let c = short_run(1e-2, 5);
    assert_ne!(a.train_curve(), c.train_curve());
}

#[test]
fn prefetch_matches_inline() {
    let mut m1 = Model::new(tiny_config(AttentionBackend::Exact)).unwrap();
    let mut m2 = m1.clone();
    let data = toy_data(20);
    let mask = MaskConfig::with_ratio(0.3, 2);
    let mut cfg = TrainConfig {
        batch_size: 4,
        steps: 5,
        ..TrainConfig::default()
    };
    let a = pretrain(&mut m1, &data[..16], &data[16..], &mask, &cfg, None).unwrap();
    cfg.prefetch = 2;
    let b = pretrain(&mut m2, &data[..16], &data[16..], &mask, &cfg, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(m1.params, m2.params);
}

#[test]
fn run_directory_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(tiny_config(AttentionBackend::Exact)).unwrap();
    let data = toy_data(12);
    let cfg = TrainConfig {
        batch_size: 4,
        steps: 2,
        ..TrainConfig::default()
    };
    pretrain(&mut model, &data[..8], &data[8..], &MaskConfig::with_ratio(0.3, 0), &cfg, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,masked_mse,nz_mse,z_mse,lr"));
    assert!(dir.path().join("run.json").exists());
    let back = crate::model::load_checkpoint(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(back.params, model.params);
}

#[test]
fn recovery_on_perfect_model_data() {
    let model = Model::new(tiny_config(AttentionBackend::Exact)).unwrap();
    let data = toy_data(10);
    let rep = recovery_correlation(&model, &data, &MaskConfig::with_ratio(0.3, 1)).unwrap();
    assert!(rep.overall.n > 0);
    assert!(rep.buckets.iter().all(|b| b.correlation.n >= 2));
    let masked = mask_cells(&data, &MaskConfig::with_ratio(0.3, 1), 0).unwrap();
    assert_eq!(rep.overall.n, masked.iter().map(|m| m.masked.len()).sum::<usize>());
}
