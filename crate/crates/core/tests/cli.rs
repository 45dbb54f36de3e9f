use std::path::Path;
use std::process::{Command, Output};

use scmae::data::{normalize, save_labels, save_matrix, synthesize_dataset, SparseExpressionMatrix, Stage, SyntheticSpec};
use scmae::model::{save_checkpoint, Model, ModelConfig};

fn scmae(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scmae"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Five raw cells; the third expresses a single gene.
fn raw_fixture(dir: &Path) -> std::path::PathBuf {
    let rows = vec![
        vec![3.0, 1.0, 0.0, 2.0],
        vec![0.0, 5.0, 1.0, 1.0],
        vec![0.0, 0.0, 7.0, 0.0],
        vec![1.0, 1.0, 1.0, 1.0],
        vec![4.0, 0.0, 2.0, 0.0],
    ];
    let m = SparseExpressionMatrix::from_dense(&rows, Stage::RawCounts).unwrap();
    let path = dir.join("raw.txt");
    save_matrix(&m, &path).unwrap();
    path
}

#[test]
fn prepare_reports_dropped_cells() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_fixture(dir.path());
    let out = dir.path().join("norm.txt");

    let o = scmae(&["prepare", "--input", p(&raw), "--output", p(&out), "--min-genes", "2"], &[]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("kept 4 of 5 cells (1 dropped"), "{}", stdout(&o));
    let m = scmae::data::load_matrix(&out).unwrap();
    assert_eq!(m.n_cells(), 4);
    assert_eq!(m.stage(), Stage::Normalized);

    let o = scmae(&["prepare", "--input", p(&raw), "--output", p(&out), "--min-genes", "0"], &[]);
    assert!(stdout(&o).contains("(0 dropped"), "{}", stdout(&o));
}

#[test]
fn prepare_filters_labels_alongside() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_fixture(dir.path());
    let labels: Vec<(String, String)> = (0..5).map(|i| (format!("c{i}"), format!("t{}", i % 2))).collect();
    let lin = dir.path().join("labels.csv");
    let lout = dir.path().join("kept.csv");
    save_labels(&labels, &lin).unwrap();
    let out = dir.path().join("norm.txt");
    let o = scmae(
        &[
            "prepare", "--input", p(&raw), "--output", p(&out), "--min-genes", "2", "--labels", p(&lin),
            "--labels-out", p(&lout),
        ],
        &[],
    );
    assert!(o.status.success(), "{o:?}");
    let kept: Vec<String> = scmae::data::load_labels(&lout).unwrap().into_iter().map(|(id, _)| id).collect();
    assert_eq!(kept, ["c0", "c1", "c3", "c4"]);
}

#[test]
fn estimate_flops_reports_resource_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flops.csv");
    let o = scmae(&["estimate-flops", "--csv", p(&csv)], &[]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    for needle in ["100.0%", "10.8%", "3.4%", "2.46e20", "2.65e19", "8.38e18"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.starts_with("name,parameter_count,"));
}

#[test]
fn weights_profile_grid_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.csv");
    let o = scmae(
        &["weights-profile", "--preset", "tiny-test", "--start", "0", "--stop", "10", "--step", "0.1", "--output", p(&out)],
        &[],
    );
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 101);
    let bins = ModelConfig::preset("tiny-test").unwrap().bins;
    assert!(lines.iter().all(|l| l.split(',').count() == 1 + bins));
}

const CONFIG: &str = r#"
seed = 4

[data.synthetic]
n_cells = 60
n_genes = 30
n_cell_types = 3
sparsity = 0.7
seed = 4

[model]
preset = "tiny-test"
encoder = { depth = 1, heads = 2, dim = 8 }
decoder = { depth = 1, heads = 2, dim = 8 }
bins = 8

[train]
steps = 6
batch_size = 4
learning_rate = 1e-3
eval_every = 3

[output]
dir = "runs"
run_name = "smoke"
"#;

#[test]
fn pretrain_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();

    let o = scmae(&["pretrain", "--config", p(&cfg)], &[]);
    assert!(o.status.success(), "{o:?}");
    let run = dir.path().join("runs/smoke");
    for f in ["run.json", "metrics.csv", "model.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let first = std::fs::read_to_string(run.join("metrics.csv")).unwrap();

    let o = scmae(&["pretrain", "--config", p(&cfg)], &[("SCMAE_OUTPUT__RUN_NAME", "again")]);
    assert!(o.status.success(), "{o:?}");
    let second = std::fs::read_to_string(dir.path().join("runs/again/metrics.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn missing_config_key_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG.replace("learning_rate = 1e-3\n", "")).unwrap();
    let o = scmae(&["pretrain", "--config", p(&cfg)], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.learning_rate"), "{o:?}");
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(scmae(&["pretrain"], &[]).status.code(), Some(1));
    assert_eq!(scmae(&["no-such-command"], &[]).status.code(), Some(1));
    let help = scmae(&["--help"], &[]);
    assert_eq!(help.status.code(), Some(0));
    for sub in ["prepare", "pretrain", "evaluate", "estimate-flops", "weights-profile", "finetune"] {
        assert!(stdout(&help).contains(sub), "{sub}");
    }
    let o = scmae(&["prepare", "--input", "/does/not/exist", "--output", "/tmp/x"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

/// Normalized synthetic matrix, labels and an untrained checkpoint.
fn eval_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let (raw, labels) = synthesize_dataset(&SyntheticSpec::new(40, 30, 2, 0.7, 1)).unwrap();
    let data = dir.join("norm.txt");
    save_matrix(&normalize(&raw, 1e4).unwrap(), &data).unwrap();
    let lab = dir.join("labels.csv");
    let rows: Vec<(String, String)> = labels.iter().enumerate().map(|(i, l)| (i.to_string(), format!("type{l}"))).collect();
    save_labels(&rows, &lab).unwrap();
    let mut c = ModelConfig::preset("tiny-test").unwrap().with_genes(30);
    c.encoder.dim = 8;
    c.decoder.dim = 8;
    let ckpt = dir.join("untrained.ckpt");
    save_checkpoint(&Model::new(c).unwrap(), &ckpt).unwrap();
    (data, lab, ckpt)
}

#[test]
fn evaluate_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, lab, ckpt) = eval_fixture(dir.path());
    let csv = dir.path().join("metrics.csv");
    let o = scmae(
        &["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--labels", p(&lab), "--output", p(&csv)],
        &[],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("untrained"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("variant,ARI,NMI,HOMO,CP,SIL\nuntrained,"), "{text}");
}

#[test]
fn finetune_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, lab, ckpt) = eval_fixture(dir.path());
    let out = dir.path().join("ft");
    let o = scmae(
        &[
            "finetune", "--checkpoint", p(&ckpt), "--data", p(&data), "--labels", p(&lab), "--epochs", "3",
            "--output-dir", p(&out),
        ],
        &[],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("macro F1"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["classes"].as_array().unwrap().len(), 2);
}

#[test]
fn bundled_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny-synthetic.toml");
    let cfg = scmae::cli::RunConfig::load(&path).unwrap();
    assert_eq!(cfg.train.steps, 2000);
    assert_eq!(cfg.mask.nonzero_mask_ratio, 0.3);
    assert!(matches!(cfg.data, scmae::cli::DataSource::Synthetic(_)));
}
