//! Run configuration: a sectioned TOML file plus environment overrides.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! matrix = "data/normalized.txt"     # or a [data.synthetic] table
//! valid_fraction = 0.1
//!
//! [model]
//! preset = "tiny-test"               # any ModelConfig field may follow
//!
//! [mask]
//! nonzero_mask_ratio = 0.3
//!
//! [train]
//! steps = 2000
//! batch_size = 16
//! learning_rate = 2e-3
//!
//! [output]
//! dir = "runs"
//! run_name = "tiny"
//! ```
//!
//! `SCMAE_<SECTION>__<KEY>=value` overrides `section.key` (top-level keys use
//! `SCMAE_<KEY>`); values parse as TOML scalars and fall back to strings.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::model::{ModelConfig, PRESETS};
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "SCMAE_";

/// Where the expression matrix comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Normalized coordinate-format file.
    Matrix(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub labels: Option<PathBuf>,
    pub valid_fraction: f64,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub run_name: String,
}

impl RunConfig {
    /// Run directory `<dir>/<run_name>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, std::env::vars())
    }

    /// Parses `text`, applying `env` overrides; relative paths resolve
    /// against `base`.
    pub fn parse(text: &str, base: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        apply_env(&mut root, env)?;

        let seed = match root.get("seed") {
            Some(v) => from_value::<u64>(v.clone(), "seed")?,
            None => 0,
        };
        let data = section(&root, "data")?;
        let source = match (data.get("matrix"), data.get("synthetic")) {
            (Some(m), None) => {
                let p = resolve(base, &from_value::<String>(m.clone(), "data.matrix")?);
                if !p.exists() {
                    return Err(Error::Validation(format!("data.matrix `{}` does not exist", p.display())));
                }
                DataSource::Matrix(p)
            }
            (None, Some(s)) => DataSource::Synthetic(from_value(s.clone(), "data.synthetic")?),
            (Some(_), Some(_)) => {
                return Err(Error::Config("set only one of data.matrix and data.synthetic".into()))
            }
            (None, None) => return Err(Error::MissingKey("data.matrix".into())),
        };
        let labels = match data.get("labels") {
            Some(v) => {
                let p = resolve(base, &from_value::<String>(v.clone(), "data.labels")?);
                if !p.exists() {
                    return Err(Error::Validation(format!("data.labels `{}` does not exist", p.display())));
                }
                Some(p)
            }
            None => None,
        };
        let valid_fraction = match data.get("valid_fraction") {
            Some(v) => from_value::<f64>(v.clone(), "data.valid_fraction")?,
            None => 0.1,
        };
        if !(0.0..1.0).contains(&valid_fraction) || valid_fraction == 0.0 {
            return Err(Error::Validation(format!("data.valid_fraction must be in (0, 1), got {valid_fraction}")));
        }

        let model = model_config(section(&root, "model")?, seed)?;

        let mut mask_table = optional_section(&root, "mask")?;
        mask_table.entry("seed").or_insert(Value::Integer(seed as i64));
        let mask: MaskConfig = merge_into(&MaskConfig::default(), mask_table, "mask")?;
        mask.validate()?;

        let train_table = section(&root, "train")?;
        for key in ["steps", "batch_size", "learning_rate"] {
            require(&train_table, "train", key)?;
        }
        let mut train_table = train_table;
        train_table.entry("seed").or_insert(Value::Integer(seed as i64));
        let train: TrainConfig = merge_into(&TrainConfig::default(), train_table, "train")?;
        train.validate()?;

        let output = section(&root, "output")?;
        let out_dir = resolve(base, &from_value::<String>(require(&output, "output", "dir")?.clone(), "output.dir")?);
        let run_name = match output.get("run_name") {
            Some(v) => from_value::<String>(v.clone(), "output.run_name")?,
            None => "run".into(),
        };

        Ok(Self {
            seed,
            data: source,
            labels,
            valid_fraction,
            model,
            mask,
            train,
            out_dir,
            run_name,
        })
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn section(root: &Table, name: &str) -> Result<Table> {
    match root.get(name) {
        Some(Value::Table(t)) => Ok(t.clone()),
        Some(_) => Err(Error::Config(format!("`{name}` must be a section"))),
        None => Err(Error::MissingKey(name.into())),
    }
}

fn optional_section(root: &Table, name: &str) -> Result<Table> {
    match root.get(name) {
        None => Ok(Table::new()),
        Some(_) => section(root, name),
    }
}

fn require<'a>(t: &'a Table, sec: &str, key: &str) -> Result<&'a Value> {
    t.get(key).ok_or_else(|| Error::MissingKey(format!("{sec}.{key}")))
}

fn from_value<T: DeserializeOwned>(v: Value, key: &str) -> Result<T> {
    v.try_into().map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {}", e.message())))
}

/// Serializes `defaults`, overlays `overrides` key by key, deserializes.
fn merge_into<T: serde::Serialize + DeserializeOwned>(defaults: &T, overrides: Table, sec: &str) -> Result<T> {
    let mut t = Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        t.insert(k, v);
    }
    from_value(Value::Table(t), sec)
}

fn model_config(mut t: Table, seed: u64) -> Result<ModelConfig> {
    let preset = from_value::<String>(require(&t, "model", "preset")?.clone(), "model.preset")?;
    if !PRESETS.contains(&preset.as_str()) {
        return Err(Error::Validation(format!(
            "model.preset `{preset}` is not one of {}",
            PRESETS.join(", ")
        )));
    }
    t.remove("preset");
    t.entry("seed").or_insert(Value::Integer(seed as i64));
    let c: ModelConfig = merge_into(&ModelConfig::preset(&preset)?, t, "model")?;
    // Equal-frequency edges are fitted on the training data later.
    if !c.needs_bin_stats() {
        c.validate()?;
    }
    Ok(c)
}

/// Applies `SCMAE_*` overrides.
fn apply_env(root: &mut Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    for (k, raw) in env {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
        let rest = rest.to_ascii_lowercase();
        let value = parse_scalar(&raw);
        match rest.split_once("__") {
            Some((sec, key)) => {
                let entry = root
                    .entry(sec.to_string())
                    .or_insert_with(|| Value::Table(Table::new()));
                let Value::Table(t) = entry else {
                    return Err(Error::Config(format!("override {k}: `{sec}` is not a section")));
                };
                t.insert(key.to_string(), value);
            }
            None => {
                root.insert(rest, value);
            }
        }
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[data.synthetic]
n_cells = 50
n_genes = 40
n_cell_types = 2
sparsity = 0.8
seed = 1
[model]
preset = "tiny-test"
n_genes = 40
[train]
steps = 5
batch_size = 4
learning_rate = 1e-3
[output]
dir = "out"
"#;

    fn parse(text: &str, env: &[(&str, &str)]) -> Result<RunConfig> {
        RunConfig::parse(
            text,
            Path::new("/tmp"),
            env.iter().map(|(a, b)| (a.to_string(), b.to_string())),
        )
    }

    #[test]
    fn parses_sections_and_defaults() {
        let c = parse(BASE, &[]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.n_genes, 40);
        assert_eq!(c.model.encoder.dim, 32);
        assert_eq!(c.model.seed, 3);
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.mask.nonzero_mask_ratio, 0.3);
        assert_eq!(c.run_dir(), PathBuf::from("/tmp/out/run"));
        assert!(matches!(c.data, DataSource::Synthetic(_)));
    }

    #[test]
    fn missing_key_is_named() {
        let text = BASE.replace("steps = 5\n", "");
        match parse(&text, &[]) {
            Err(Error::MissingKey(k)) => assert_eq!(k, "train.steps"),
            other => panic!("{other:?}"),
        }
        let text = BASE.replace("preset = \"tiny-test\"\n", "");
        assert!(matches!(parse(&text, &[]), Err(Error::MissingKey(k)) if k == "model.preset"));
    }

    #[test]
    fn env_overrides() {
        let c = parse(
            BASE,
            &[
                ("SCMAE_TRAIN__STEPS", "9"),
                ("SCMAE_OUTPUT__RUN_NAME", "ci"),
                ("SCMAE_SEED", "11"),
                ("OTHER", "x"),
            ],
        )
        .unwrap();
        assert_eq!(c.train.steps, 9);
        assert_eq!(c.run_name, "ci");
        assert_eq!(c.seed, 11);
    }

    #[test]
    fn rejects_unknown_preset_and_bad_values() {
        assert!(parse(&BASE.replace("tiny-test", "7B"), &[]).unwrap_err().is_validation());
        assert!(parse(&BASE.replace("learning_rate = 1e-3", "learning_rate = -1.0"), &[]).is_err());
        assert!(parse(&BASE.replace("[data.synthetic]", "[data]\nmatrix = \"/nope\"\n[data.synthetic]"), &[]).is_err());
    }
}
