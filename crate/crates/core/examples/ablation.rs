//! Clustering ablations on synthetic typed cells: value encoding, objective
//! and architecture, each pre-trained briefly and scored by k-means on
//! pooled embeddings.
//!
//! `cargo run --release --example ablation -- [steps] [seeds]`

use scmae::data::{normalize, synthesize_dataset, SyntheticSpec};
use scmae::embedding::BinScheme;
use scmae::eval::ablation_harness;
use scmae::masking::MaskConfig;
use scmae::model::{Architecture, Model, ModelConfig, Objective, ValueEncoding};
use scmae::training::{pretrain, split_indices, TrainConfig};

fn variants() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::preset("tiny-test").expect("preset");
    let mut binned = base.clone();
    binned.value_encoding = ValueEncoding::Binned(BinScheme::RoundZero);
    let mut classify = base.clone();
    classify.objective = Objective::Classification;
    let mut encoder_only = base.clone();
    encoder_only.architecture = Architecture::EncoderOnly;
    vec![
        ("auto_discretize", base),
        ("round_bin", binned),
        ("classification", classify),
        ("encoder_only", encoder_only),
    ]
}

fn main() -> scmae::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    for seed in 0..seeds {
        let (raw, labels) = synthesize_dataset(&SyntheticSpec::new(600, 200, 5, 0.9, seed))?;
        let rows = normalize(&raw, 1e4)?.rows();
        let (train_idx, valid_idx) = split_indices(rows.len(), 0.1, seed);
        let train: Vec<_> = train_idx.iter().map(|&i| rows[i].clone()).collect();
        let valid: Vec<_> = valid_idx.iter().map(|&i| rows[i].clone()).collect();
        let mask = MaskConfig::with_ratio(0.3, seed);
        let cfg = TrainConfig {
            batch_size: 16,
            steps,
            learning_rate: 2e-3,
            warmup_steps: 50,
            eval_every: 0,
            seed,
            ..TrainConfig::default()
        };
        let mut trained = Vec::new();
        let untrained = Model::new(ModelConfig::preset("tiny-test")?.with_seed(seed))?;
        for (name, c) in variants() {
            let t0 = std::time::Instant::now();
            let mut m = Model::new(c.with_seed(seed))?;
            pretrain(&mut m, &train, &valid, &mask, &cfg, None)?;
            eprintln!("seed {seed} {name}: {:.1}s", t0.elapsed().as_secs_f64());
            trained.push((name.to_string(), m));
        }
        let mut refs: Vec<(String, &Model)> = trained.iter().map(|(n, m)| (n.clone(), m)).collect();
        refs.push(("untrained".into(), &untrained));
        let table = ablation_harness(&refs, &rows, &labels, seed)?;
        println!("seed {seed}\n{}", table.to_text());
    }
    Ok(())
}
