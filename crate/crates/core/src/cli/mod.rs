//! The `scmae` command line.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

mod config;

pub use config::{DataSource, RunConfig, ENV_PREFIX};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    load_dense_csv, load_labels, load_matrix, normalize, quality_filter_with_index, save_labels, save_matrix,
    synthesize_dataset, SparseExpressionMatrix, SparseRow, Stage, SyntheticSpec,
};
use crate::embedding::{save_weights_profile, value_grid, write_weights_profile, BinStats};
use crate::error::{Error, Result};
use crate::eval::ablation_harness;
use crate::flops::FlopsSpecFile;
use crate::model::{load_checkpoint, Model, ModelConfig};
use crate::training::{finetune_annotation, pretrain, recovery_correlation, split_indices, FinetuneConfig};

/// Library-size target used when synthetic data is generated on the fly.
const TARGET_SUM: f64 = 1e4;

#[derive(Debug, Parser)]
#[command(name = "scmae", version, about = "Masked autoencoder pre-training for sparse single-cell expression")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quality-filter and normalize a raw count matrix.
    Prepare(PrepareArgs),
    /// Pre-train a model from a run config.
    Pretrain(PretrainArgs),
    /// Cluster cell embeddings of one or more checkpoints against labels.
    Evaluate(EvaluateArgs),
    /// Analytic training FLOPs of the architectures in a spec file.
    EstimateFlops(FlopsArgs),
    /// Soft-bin weights of the value discretizer over a value grid.
    WeightsProfile(ProfileArgs),
    /// Train a cell-type classifier on a checkpoint's embeddings.
    Finetune(FinetuneArgs),
    /// Write a synthetic raw count matrix with cell-type labels.
    Synthesize(SynthesizeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw counts: coordinate format, or dense CSV if the name ends in `.csv`.
    #[arg(long)]
    pub input: PathBuf,
    /// Normalized coordinate-format output.
    #[arg(long)]
    pub output: PathBuf,
    /// Keep cells with at least this many expressed genes.
    #[arg(long, default_value_t = 200)]
    pub min_genes: usize,
    /// Library size each cell is scaled to before `ln(1 + x)`.
    #[arg(long, default_value_t = TARGET_SUM)]
    pub target_sum: f64,
    /// `cell_id,label` CSV to filter alongside the cells.
    #[arg(long, requires = "labels_out")]
    pub labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML run config; `SCMAE_<SECTION>__<KEY>` variables override it.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `name=path` or `path` (named after the file stem); repeatable.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<String>,
    /// Normalized coordinate-format matrix.
    #[arg(long)]
    pub data: PathBuf,
    /// `cell_id,label` CSV in matrix row order.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics CSV; the table is printed either way.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Spec file; defaults to the bundled 10M-parameter comparison.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Estimated-cost CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, conflicts_with = "preset")]
    pub checkpoint: Option<PathBuf>,
    /// Freshly initialized preset instead of a checkpoint.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub start: f64,
    #[arg(long, default_value_t = 10.0)]
    pub stop: f64,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Update the trunk as well as the head.
    #[arg(long)]
    pub unfreeze: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes `report.json` here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long, default_value_t = 1000)]
    pub cells: usize,
    #[arg(long, default_value_t = 200)]
    pub genes: usize,
    #[arg(long, default_value_t = 5)]
    pub types: usize,
    #[arg(long, default_value_t = 0.9)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a, out),
        Command::Pretrain(a) => cmd_pretrain(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::EstimateFlops(a) => cmd_estimate_flops(&a, out),
        Command::WeightsProfile(a) => cmd_weights_profile(&a, out),
        Command::Finetune(a) => cmd_finetune(&a, out),
        Command::Synthesize(a) => cmd_synthesize(&a, out),
    }
}

fn say(out: &mut dyn Write, s: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", s.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn read_raw(path: &Path) -> Result<SparseExpressionMatrix> {
    let m = if path.extension().is_some_and(|e| e == "csv") {
        load_dense_csv(path, Stage::RawCounts)?
    } else {
        load_matrix(path)?
    };
    if m.stage() != Stage::RawCounts {
        return Err(Error::Validation(format!("{} does not hold raw counts", path.display())));
    }
    Ok(m)
}

fn read_normalized(path: &Path) -> Result<SparseExpressionMatrix> {
    let m = load_matrix(path)?;
    if m.stage() != Stage::Normalized {
        return Err(Error::Validation(format!(
            "{} holds raw counts; run `scmae prepare` first",
            path.display()
        )));
    }
    Ok(m)
}

/// Label strings in matrix row order, mapped to sorted class indices.
fn read_labels(path: &Path, n_cells: usize) -> Result<(Vec<usize>, Vec<String>)> {
    let rows = load_labels(path)?;
    if rows.len() != n_cells {
        return Err(Error::Shape(format!("{} labels for {n_cells} cells", rows.len())));
    }
    let classes: Vec<String> = rows
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = rows.iter().map(|(_, l)| index[l.as_str()]).collect();
    Ok((labels, classes))
}

fn cmd_prepare(a: &PrepareArgs, out: &mut dyn Write) -> Result<()> {
    let raw = read_raw(&a.input)?;
    let labels = a.labels.as_deref().map(load_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != raw.n_cells() {
            return Err(Error::Shape(format!("{} labels for {} cells", l.len(), raw.n_cells())));
        }
    }
    let (kept, index) = quality_filter_with_index(&raw, a.min_genes)?;
    let normalized = normalize(&kept, a.target_sum)?;
    save_matrix(&normalized, &a.output)?;
    if let (Some(l), Some(path)) = (labels, &a.labels_out) {
        let kept_labels: Vec<_> = index.iter().map(|&i| l[i].clone()).collect();
        save_labels(&kept_labels, path)?;
    }
    say(
        out,
        format!(
            "kept {} of {} cells ({} dropped, min_genes {}), {} genes -> {}",
            kept.n_cells(),
            raw.n_cells(),
            raw.n_cells() - kept.n_cells(),
            a.min_genes,
            raw.n_genes(),
            a.output.display()
        ),
    )
}

/// Matrix and optional labels named by a run config.
fn load_run_data(cfg: &RunConfig) -> Result<(SparseExpressionMatrix, Option<Vec<usize>>)> {
    let (m, synth_labels) = match &cfg.data {
        DataSource::Matrix(p) => (read_normalized(p)?, None),
        DataSource::Synthetic(spec) => {
            let (raw, labels) = synthesize_dataset(spec)?;
            (normalize(&raw, TARGET_SUM)?, Some(labels))
        }
    };
    let labels = match &cfg.labels {
        Some(p) => Some(read_labels(p, m.n_cells())?.0),
        None => synth_labels,
    };
    Ok((m, labels))
}

fn cmd_pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let (m, _) = load_run_data(&cfg)?;
    let cells = m.rows();
    let (train_idx, valid_idx) = split_indices(cells.len(), cfg.valid_fraction, cfg.seed);
    let train: Vec<SparseRow> = train_idx.iter().map(|&i| cells[i].clone()).collect();
    let valid: Vec<SparseRow> = valid_idx.iter().map(|&i| cells[i].clone()).collect();

    let mut model_cfg = cfg.model.clone().with_genes(m.n_genes());
    if model_cfg.needs_bin_stats() {
        let values: Vec<f64> = train.iter().flat_map(|c| c.values.iter().copied()).collect();
        model_cfg.bin_stats = Some(BinStats::fit(&values, model_cfg.bins)?);
    }
    let mut model = Model::new(model_cfg)?;
    let dir = cfg.run_dir();
    let report = pretrain(&mut model, &train, &valid, &cfg.mask, &cfg.train, Some(&dir))?;
    let recovery = recovery_correlation(&model, &valid, &cfg.mask)?;
    say(
        out,
        format!(
            "{} steps, {} parameters: valid masked MSE {:.4} -> {:.4}, recovery r {:.3}; artifacts in {}",
            report.steps,
            model.n_parameters(),
            report.initial_valid.masked_mse,
            report.final_valid.masked_mse,
            recovery.overall.r,
            dir.display()
        ),
    )
}

fn parse_named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) => (name.to_string(), PathBuf::from(path)),
        None => {
            let p = PathBuf::from(spec);
            let name = p.file_stem().map_or(spec.to_string(), |s| s.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let m = read_normalized(&a.data)?;
    let (labels, _) = read_labels(&a.labels, m.n_cells())?;
    let models: Vec<(String, Model)> = a
        .checkpoints
        .iter()
        .map(|s| {
            let (name, path) = parse_named(s);
            Ok((name, load_checkpoint(&path)?))
        })
        .collect::<Result<_>>()?;
    let variants: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let table = ablation_harness(&variants, &m.rows(), &labels, a.seed)?;
    if let Some(p) = &a.output {
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        table.write_csv(f)?;
    }
    say(out, table.to_text().trim_end())
}

fn cmd_estimate_flops(a: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => FlopsSpecFile::load(p)?,
        None => FlopsSpecFile::bundled(),
    };
    if let Some(s) = a.samples {
        spec.samples = s;
    }
    if let Some(e) = a.epochs {
        spec.epochs = e;
    }
    let estimated = spec.estimate()?;
    if let Some(p) = &a.csv {
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        estimated.write_csv(f)?;
    }
    say(out, "estimated")?;
    say(out, estimated.to_text().trim_end())?;
    if spec.architectures.iter().all(|s| s.published_per_sample.is_some()) {
        say(out, "\npublished per-sample figures")?;
        say(out, spec.published()?.to_text().trim_end())?;
    }
    Ok(())
}

fn cmd_weights_profile(a: &ProfileArgs, out: &mut dyn Write) -> Result<()> {
    let model = match (&a.checkpoint, &a.preset) {
        (Some(p), _) => load_checkpoint(p)?,
        (None, Some(name)) => Model::new(ModelConfig::preset(name)?.with_seed(a.seed))?,
        (None, None) => return Err(Error::Validation("give --checkpoint or --preset".into())),
    };
    let disc = model
        .discretizer()
        .ok_or_else(|| Error::Validation("model uses hard value bins, not the soft discretizer".into()))?;
    if !(a.step > 0.0 && a.stop >= a.start) {
        return Err(Error::Validation(format!(
            "bad grid {}..{} step {}",
            a.start, a.stop, a.step
        )));
    }
    let grid = value_grid(a.start, a.stop, a.step);
    match &a.output {
        Some(p) => {
            save_weights_profile(&disc, &grid, p)?;
            say(
                out,
                format!("{} values x {} bins -> {}", grid.len(), disc.n_bins(), p.display()),
            )
        }
        None => write_weights_profile(&disc, &grid, out),
    }
}

fn cmd_finetune(a: &FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let m = read_normalized(&a.data)?;
    let (labels, classes) = read_labels(&a.labels, m.n_cells())?;
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        freeze_trunk: !a.unfreeze,
        seed: a.seed,
        ..FinetuneConfig::default()
    };
    let (_, report) = finetune_annotation(model, &m.rows(), &labels, classes.len(), &cfg)?;
    if let Some(dir) = &a.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        let body = serde_json::json!({ "classes": classes, "config": cfg, "report": report });
        std::fs::write(&path, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
    }
    say(
        out,
        format!(
            "{} classes, {} train / {} test cells: macro F1 {:.4}, macro precision {:.4}, accuracy {:.4}",
            classes.len(),
            report.n_train,
            report.n_test,
            report.test.macro_f1,
            report.test.macro_precision,
            report.test.accuracy
        ),
    )
}

fn cmd_synthesize(a: &SynthesizeArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec::new(a.cells, a.genes, a.types, a.sparsity, a.seed);
    let (m, labels) = synthesize_dataset(&spec)?;
    save_matrix(&m, &a.output)?;
    let rows: Vec<(String, String)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("cell{i}"), format!("type{l}")))
        .collect();
    save_labels(&rows, &a.labels)?;
    say(
        out,
        format!(
            "{} cells x {} genes, {} non-zero -> {}",
            m.n_cells(),
            m.n_genes(),
            m.n_entries(),
            a.output.display()
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn named_checkpoint_specs() {
        assert_eq!(parse_named("a=x/y.ckpt"), ("a".into(), PathBuf::from("x/y.ckpt")));
        assert_eq!(parse_named("runs/tiny.ckpt"), ("tiny".into(), PathBuf::from("runs/tiny.ckpt")));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::MissingKey("train.steps".into())), 1);
        assert_eq!(exit_code(&Error::io("x", std::io::Error::other("boom"))), 2);
    }
}
