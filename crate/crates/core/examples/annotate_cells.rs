//! Cell-type annotation: a linear head on max-pooled embeddings of a
//! pre-trained trunk, compared with the same head on a random trunk.
//!
//! `cargo run --release --example annotate_cells -- [steps] [seed]`

use scmae::data::{normalize, synthesize_dataset, SyntheticSpec};
use scmae::masking::MaskConfig;
use scmae::model::{Model, ModelConfig};
use scmae::training::{finetune_annotation, pretrain, split_indices, FinetuneConfig, TrainConfig};

fn main() -> scmae::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let (raw, labels) = synthesize_dataset(&SyntheticSpec::new(600, 200, 5, 0.9, seed))?;
    let rows = normalize(&raw, 1e4)?.rows();
    let (t, v) = split_indices(rows.len(), 0.1, seed);
    let train: Vec<_> = t.iter().map(|&i| rows[i].clone()).collect();
    let valid: Vec<_> = v.iter().map(|&i| rows[i].clone()).collect();

    let config = ModelConfig::preset("tiny-test")?.with_seed(seed);
    let random = Model::new(config.clone())?;
    let mut trained = Model::new(config)?;
    let cfg = TrainConfig {
        steps,
        batch_size: 16,
        learning_rate: 2e-3,
        warmup_steps: 50,
        eval_every: 0,
        seed,
        ..TrainConfig::default()
    };
    pretrain(&mut trained, &train, &valid, &MaskConfig::with_ratio(0.3, seed), &cfg, None)?;

    let ft = FinetuneConfig { seed, ..FinetuneConfig::default() };
    for (name, model) in [("pre-trained", trained), ("random", random)] {
        let (clf, report) = finetune_annotation(model, &rows, &labels, 5, &ft)?;
        println!(
            "{name:>11} trunk: macro F1 {:.3}, macro precision {:.3}, accuracy {:.3} on {} test cells",
            report.test.macro_f1, report.test.macro_precision, report.test.accuracy, report.n_test
        );
        let pred = clf.predict(&rows[..10])?;
        println!("             first predictions {pred:?}, truth {:?}", &labels[..10]);
    }
    Ok(())
}
