use serde::{Deserialize, Serialize};

use crate::data::REFERENCE_GENE_COUNT;
use crate::embedding::{BinScheme, BinStats, DEFAULT_BINS};
use crate::error::{Error, Result};

/// Depth, head count and width of one transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
}

impl BlockSpec {
    pub const fn new(depth: usize, heads: usize, dim: usize) -> Self {
        Self { depth, heads, dim }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionBackend {
    #[default]
    Exact,
    /// Positive random-feature approximation of softmax attention.
    LinearRandomFeatures,
}

/// How scalar values become vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueEncoding {
    #[default]
    AutoDiscretize,
    Binned(BinScheme),
}

/// What the output head predicts at masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// The value itself, under squared error.
    #[default]
    Regression,
    /// The round-to-nearest bin of the value, under cross-entropy.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Encoder over survivors, decoder over the full gene axis.
    #[default]
    Asymmetric,
    /// A single stack over the full gene axis; the decoder spec is unused.
    EncoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: BlockSpec,
    pub decoder: BlockSpec,
    pub n_genes: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub attention: AttentionBackend,
    #[serde(default = "default_features")]
    pub n_random_features: usize,
    #[serde(default)]
    pub orthogonal_features: bool,
    #[serde(default = "default_ffn")]
    pub ffn_multiplier: usize,
    /// Negative slope inside the discretizer.
    #[serde(default = "default_leak")]
    pub leak: f64,
    /// Adds biases to the discretizer's two linear maps.
    #[serde(default)]
    pub value_bias: bool,
    #[serde(default)]
    pub value_encoding: ValueEncoding,
    /// Fitted edges when `value_encoding` uses equal-frequency bins.
    #[serde(default)]
    pub bin_stats: Option<BinStats>,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub seed: u64,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_features() -> usize {
    256
}
fn default_ffn() -> usize {
    4
}
fn default_leak() -> f64 {
    0.1
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 4] = ["3M", "10M", "100M", "tiny-test"];

impl ModelConfig {
    pub fn new(encoder: BlockSpec, decoder: BlockSpec, n_genes: usize) -> Self {
        Self {
            encoder,
            decoder,
            n_genes,
            bins: DEFAULT_BINS,
            attention: AttentionBackend::Exact,
            n_random_features: default_features(),
            orthogonal_features: false,
            ffn_multiplier: default_ffn(),
            leak: default_leak(),
            value_bias: false,
            value_encoding: ValueEncoding::AutoDiscretize,
            bin_stats: None,
            objective: Objective::Regression,
            architecture: Architecture::Asymmetric,
            seed: 0,
        }
    }

    /// Named sizes. The three large presets default to the reference gene
    /// count; `tiny-test` is sized for CPU training at 200 genes.
    pub fn preset(name: &str) -> Result<Self> {
        let (enc, dec, n_genes) = match name {
            "3M" => (BlockSpec::new(4, 2, 128), BlockSpec::new(2, 2, 128), REFERENCE_GENE_COUNT),
            "10M" => (BlockSpec::new(4, 8, 256), BlockSpec::new(2, 4, 256), REFERENCE_GENE_COUNT),
            "100M" => (BlockSpec::new(12, 12, 768), BlockSpec::new(6, 8, 512), REFERENCE_GENE_COUNT),
            "tiny-test" => (BlockSpec::new(2, 2, 32), BlockSpec::new(1, 2, 32), 200),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`, expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self::new(enc, dec, n_genes))
    }

    pub fn with_genes(mut self, n_genes: usize) -> Self {
        self.n_genes = n_genes;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Width of the stack feeding the output head.
    pub fn output_dim(&self) -> usize {
        match self.architecture {
            Architecture::Asymmetric => self.decoder.dim,
            Architecture::EncoderOnly => self.encoder.dim,
        }
    }

    /// Columns of the output head.
    pub fn head_width(&self) -> usize {
        match self.objective {
            Objective::Regression => 1,
            Objective::Classification => self.bins,
        }
    }

    /// Equal-frequency binning without fitted edges.
    pub fn needs_bin_stats(&self) -> bool {
        self.value_encoding == ValueEncoding::Binned(BinScheme::EqualFreq) && self.bin_stats.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        for (name, s) in [("encoder", self.encoder), ("decoder", self.decoder)] {
            if s.dim == 0 || s.heads == 0 {
                return bad(format!("{name} dim and heads must be positive"));
            }
            if s.dim % s.heads != 0 {
                return bad(format!("{name} dim {} not divisible by {} heads", s.dim, s.heads));
            }
        }
        if self.n_genes == 0 {
            return bad("n_genes must be positive".into());
        }
        if self.bins < 2 {
            return bad(format!("need at least 2 bins, got {}", self.bins));
        }
        if self.ffn_multiplier == 0 {
            return bad("ffn_multiplier must be positive".into());
        }
        if self.attention == AttentionBackend::LinearRandomFeatures && self.n_random_features == 0 {
            return bad("linear attention needs random features".into());
        }
        if self.needs_bin_stats() {
            return bad("equal-frequency value encoding requires fitted bin_stats".into());
        }
        Ok(())
    }
}
