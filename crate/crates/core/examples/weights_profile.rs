//! Soft-bin weights of the value discretizer across a value grid, before
//! and after a short pre-training run.
//!
//! `cargo run --release --example weights_profile -- [steps] [csv]`

use scmae::data::{normalize, synthesize_dataset, SyntheticSpec};
use scmae::embedding::{save_weights_profile, value_grid, weights_profile, AutoDiscretizer};
use scmae::masking::MaskConfig;
use scmae::model::{Model, ModelConfig};
use scmae::training::{pretrain, split_indices, TrainConfig};

fn summary(disc: &AutoDiscretizer, grid: &[f64]) -> scmae::Result<()> {
    let w = weights_profile(disc, grid)?;
    for (v, row) in grid.iter().zip(w.rows()).step_by(10) {
        let (arg, top) = row
            .iter()
            .enumerate()
            .fold((0, 0.0), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
        let entropy: f64 = -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        println!("  v = {v:>4.1}: top bin {arg:>3} ({top:.3}), entropy {entropy:.2}");
    }
    Ok(())
}

fn main() -> scmae::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let csv = args.next();

    let grid = value_grid(0.0, 8.0, 0.1);
    let mut model = Model::new(ModelConfig::preset("tiny-test")?)?;
    let disc = model.discretizer().expect("auto-discretizing preset");
    println!("initialized, {} bins:", disc.n_bins());
    summary(&disc, &grid)?;

    let (raw, _) = synthesize_dataset(&SyntheticSpec::new(500, 200, 5, 0.9, 0))?;
    let rows = normalize(&raw, 1e4)?.rows();
    let (t, v) = split_indices(rows.len(), 0.1, 0);
    let train: Vec<_> = t.iter().map(|&i| rows[i].clone()).collect();
    let valid: Vec<_> = v.iter().map(|&i| rows[i].clone()).collect();
    let cfg = TrainConfig {
        steps,
        batch_size: 16,
        learning_rate: 2e-3,
        warmup_steps: 20,
        eval_every: 0,
        ..TrainConfig::default()
    };
    pretrain(&mut model, &train, &valid, &MaskConfig::default(), &cfg, None)?;
    let disc = model.discretizer().expect("auto-discretizing preset");
    println!("after {steps} steps:");
    summary(&disc, &grid)?;
    if let Some(path) = csv {
        save_weights_profile(&disc, &grid, &path)?;
        println!("wrote {path}");
    }
    Ok(())
}
