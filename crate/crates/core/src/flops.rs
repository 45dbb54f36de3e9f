//! Analytic training-cost model counting matrix multiplications only.
//!
//! A matmul of `[m, k] x [k, n]` costs `2 m n k` FLOPs and a backward pass
//! costs twice its forward pass, so one training sample costs three
//! forwards. Softmax, normalization, activations and lookups are free.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::N_SPECIAL;
use crate::error::{Error, Result};
use crate::model::{Architecture, AttentionBackend, ModelConfig, ValueEncoding};

/// Backward-to-forward cost ratio.
pub const BACKWARD_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full-length exact attention.
    EncoderOnlyExact,
    /// Full-length random-feature attention.
    EncoderOnlyLinear,
    /// Exact encoder over survivors, random-feature decoder over all genes.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSpec {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
}

fn default_features() -> usize {
    256
}
fn default_ffn() -> usize {
    4
}
fn default_bins() -> usize {
    crate::embedding::DEFAULT_BINS
}
fn default_head() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub variant: Variant,
    /// Tokens per sample seen by full-length stacks.
    pub seq_len_full: usize,
    /// Survivor tokens per sample (asymmetric encoder length).
    #[serde(default)]
    pub seq_len_encoder: Option<usize>,
    pub encoder: StackSpec,
    #[serde(default)]
    pub decoder: Option<StackSpec>,
    #[serde(default = "default_features")]
    pub n_random_features: usize,
    #[serde(default = "default_ffn")]
    pub ffn_multiplier: usize,
    /// Rows of the token embedding table (genes plus special tokens).
    pub vocab: usize,
    /// Bins of the value encoder; 0 means no value encoder.
    #[serde(default = "default_bins")]
    pub value_bins: usize,
    #[serde(default = "default_head")]
    pub head_width: usize,
    #[serde(default)]
    pub params_declared: Option<u64>,
    /// Published per-sample forward+backward figure, if any.
    #[serde(default)]
    pub published_per_sample: Option<f64>,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("architecture `{}`: {m}", self.name)));
        let check = |s: &StackSpec, what: &str| {
            if s.depth > 0 && (s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0) {
                return Err(Error::Validation(format!(
                    "architecture `{}`: {what} dim {} must be a positive multiple of heads {}",
                    self.name, s.dim, s.heads
                )));
            }
            Ok(())
        };
        check(&self.encoder, "encoder")?;
        if self.seq_len_full == 0 {
            return bad("seq_len_full must be positive".into());
        }
        if self.variant == Variant::Asymmetric {
            let Some(dec) = &self.decoder else {
                return bad("asymmetric variant needs a decoder".into());
            };
            check(dec, "decoder")?;
            match self.seq_len_encoder {
                Some(l) if l > 0 && l <= self.seq_len_full => {}
                _ => return bad("asymmetric variant needs 0 < seq_len_encoder <= seq_len_full".into()),
            }
        }
        if self.variant != Variant::EncoderOnlyExact && self.n_random_features == 0 {
            return bad("n_random_features must be positive for linear attention".into());
        }
        Ok(())
    }

    /// Spec mirroring a model config, with `survivors` encoder tokens.
    pub fn from_model_config(name: &str, c: &ModelConfig, survivors: usize) -> Self {
        let stack = |b: crate::model::BlockSpec| StackSpec {
            depth: b.depth,
            heads: b.heads,
            dim: b.dim,
        };
        let linear = c.attention == AttentionBackend::LinearRandomFeatures;
        let variant = match (c.architecture, linear) {
            (Architecture::Asymmetric, _) => Variant::Asymmetric,
            (Architecture::EncoderOnly, false) => Variant::EncoderOnlyExact,
            (Architecture::EncoderOnly, true) => Variant::EncoderOnlyLinear,
        };
        Self {
            name: name.to_string(),
            variant,
            seq_len_full: c.n_genes,
            seq_len_encoder: (variant == Variant::Asymmetric).then_some(survivors),
            encoder: stack(c.encoder),
            decoder: (variant == Variant::Asymmetric).then(|| stack(c.decoder)),
            n_random_features: c.n_random_features,
            ffn_multiplier: c.ffn_multiplier,
            vocab: c.n_genes + N_SPECIAL,
            value_bins: match c.value_encoding {
                ValueEncoding::AutoDiscretize => c.bins,
                ValueEncoding::Binned(_) => 0,
            },
            head_width: c.head_width(),
            params_declared: None,
            published_per_sample: None,
        }
    }

    fn output_dim(&self) -> usize {
        match (self.variant, &self.decoder) {
            (Variant::Asymmetric, Some(d)) => d.dim,
            _ => self.encoder.dim,
        }
    }
}

/// Forward FLOPs of one transformer block over `len` tokens.
pub fn block_forward_flops(len: usize, s: &StackSpec, ffn_multiplier: usize, attention: Option<usize>) -> f64 {
    let (l, d) = (len as f64, s.dim as f64);
    let projections = 4.0 * 2.0 * l * d * d;
    let ffn = 2.0 * 2.0 * l * d * (ffn_multiplier as f64 * d);
    let mixing = match attention {
        // q k^T and softmax(.) v
        None => 2.0 * 2.0 * l * l * d,
        // feature maps of q and k, phi(k)^T v, phi(q) (.), and the
        // normalizer phi(q) (phi(k)^T 1) per head
        Some(r) => {
            let r = r as f64;
            4.0 * 2.0 * l * r * d + 2.0 * l * r * s.heads as f64
        }
    };
    projections + ffn + mixing
}

fn stack_forward_flops(len: usize, s: &StackSpec, ffn: usize, attention: Option<usize>) -> f64 {
    s.depth as f64 * block_forward_flops(len, s, ffn, attention)
}

/// Value-encoder forward FLOPs for `tokens` scalar inputs.
fn value_encoder_flops(tokens: usize, bins: usize, dim: usize) -> f64 {
    let (t, b) = (tokens as f64, bins as f64);
    2.0 * t * (b + b * b + b * dim as f64)
}

/// Per-sample forward FLOPs.
pub fn forward_flops(spec: &ArchitectureSpec) -> f64 {
    let full = spec.seq_len_full;
    let ffn = spec.ffn_multiplier;
    let head = 2.0 * full as f64 * spec.output_dim() as f64 * spec.head_width as f64;
    match spec.variant {
        Variant::EncoderOnlyExact | Variant::EncoderOnlyLinear => {
            let attn = (spec.variant == Variant::EncoderOnlyLinear).then_some(spec.n_random_features);
            value_encoder_flops(full, spec.value_bins, spec.encoder.dim)
                + stack_forward_flops(full, &spec.encoder, ffn, attn)
                + head
        }
        Variant::Asymmetric => {
            let enc_len = spec.seq_len_encoder.unwrap_or(full);
            let dec = spec.decoder.as_ref().expect("validated decoder");
            value_encoder_flops(enc_len, spec.value_bins, spec.encoder.dim)
                + stack_forward_flops(enc_len, &spec.encoder, ffn, None)
                + 2.0 * full as f64 * spec.encoder.dim as f64 * dec.dim as f64
                + stack_forward_flops(full, dec, ffn, Some(spec.n_random_features))
                + head
        }
    }
}

/// Per-sample forward plus backward FLOPs.
pub fn estimate_flops(spec: &ArchitectureSpec) -> f64 {
    (1.0 + BACKWARD_FACTOR) * forward_flops(spec)
}

/// `per_sample * samples * epochs`.
pub fn total_train(per_sample: f64, samples: u64, epochs: u64) -> f64 {
    per_sample * samples as f64 * epochs as f64
}

fn block_params(s: &StackSpec, ffn: usize) -> u64 {
    let d = s.dim as u64;
    let h = d * ffn as u64;
    // q/k/v/o weights and biases, two norms, two FFN layers
    4 * (d * d + d) + 4 * d + (d * h + h) + (h * d + d)
}

/// Trainable parameter count with the same tensor layout as the model.
pub fn count_parameters(spec: &ArchitectureSpec) -> u64 {
    let de = spec.encoder.dim as u64;
    let b = spec.value_bins as u64;
    let embed = spec.vocab as u64 * de;
    let value = if b == 0 { 0 } else { b * de + b + b * b + 1 };
    let mut total = embed + value + spec.encoder.depth as u64 * block_params(&spec.encoder, spec.ffn_multiplier);
    if let (Variant::Asymmetric, Some(dec)) = (spec.variant, &spec.decoder) {
        let dd = dec.dim as u64;
        total += de * dd + dd + dec.depth as u64 * block_params(dec, spec.ffn_multiplier);
    }
    total + spec.output_dim() as u64 * spec.head_width as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub parameter_count: u64,
    pub per_sample_forward_backward: f64,
    pub total_train: f64,
    /// `total_train / reference total_train`, as a fraction.
    pub resource_pct: f64,
}

/// Rows for every spec, normalized by the one named `reference`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub reference: String,
    pub samples: u64,
    pub epochs: u64,
    pub rows: Vec<CostReport>,
}

/// Builds the comparison table from per-sample figures produced by `cost`.
fn report_with(
    specs: &[ArchitectureSpec],
    reference: &str,
    samples: u64,
    epochs: u64,
    cost: impl Fn(&ArchitectureSpec) -> Result<f64>,
) -> Result<EfficiencyReport> {
    let per_sample: Vec<f64> = specs.iter().map(&cost).collect::<Result<_>>()?;
    let ref_idx = specs
        .iter()
        .position(|s| s.name == reference)
        .ok_or_else(|| Error::Validation(format!("reference architecture `{reference}` not found")))?;
    let ref_total = total_train(per_sample[ref_idx], samples, epochs);
    let rows = specs
        .iter()
        .zip(&per_sample)
        .map(|(s, &p)| {
            let total = total_train(p, samples, epochs);
            CostReport {
                name: s.name.clone(),
                parameter_count: count_parameters(s),
                per_sample_forward_backward: p,
                total_train: total,
                resource_pct: total / ref_total,
            }
        })
        .collect();
    Ok(EfficiencyReport {
        reference: reference.to_string(),
        samples,
        epochs,
        rows,
    })
}

/// Estimated costs of `specs` relative to `reference`.
pub fn efficiency_report(specs: &[ArchitectureSpec], reference: &str, samples: u64, epochs: u64) -> Result<EfficiencyReport> {
    report_with(specs, reference, samples, epochs, |s| {
        s.validate()?;
        Ok(estimate_flops(s))
    })
}

/// Same table built from each spec's `published_per_sample` figure.
pub fn published_report(specs: &[ArchitectureSpec], reference: &str, samples: u64, epochs: u64) -> Result<EfficiencyReport> {
    report_with(specs, reference, samples, epochs, |s| {
        s.published_per_sample
            .ok_or_else(|| Error::Validation(format!("architecture `{}` has no published figure", s.name)))
    })
}

impl EfficiencyReport {
    pub fn row(&self, name: &str) -> Option<&CostReport> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned text table; FLOPs to three significant figures.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# matmul FLOPs only (2mnk per matmul, backward = {BACKWARD_FACTOR}x forward); {} samples x {} epochs\n",
            self.samples, self.epochs
        );
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>16} {:>14} {:>9}",
            "model", "params(M)", "FLOPs/sample", "total FLOPs", "resource"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>10.1} {:>16} {:>14} {:>8.1}%",
                r.name,
                r.parameter_count as f64 / 1e6,
                sci3(r.per_sample_forward_backward),
                sci3(r.total_train),
                100.0 * r.resource_pct
            );
        }
        out
    }

    /// `name,parameter_count,per_sample_forward_backward,total_train,resource_pct`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Rounds to `digits` significant figures, ties to even. Integral inputs
/// (all FLOP totals here) are rounded exactly in integer arithmetic.
pub fn round_sig(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let sign = x.signum();
    let a = x.abs();
    if a.fract() == 0.0 && a < 1e38 {
        let n = a as u128;
        let len = n.to_string().len() as u32;
        if len <= digits {
            return x;
        }
        let unit = 10u128.pow(len - digits);
        let (q, r) = (n / unit, n % unit);
        let half = unit / 2;
        let q = if r > half || (r == half && q % 2 == 1) { q + 1 } else { q };
        return sign * (q * unit) as f64;
    }
    let s = format!("{:.*e}", (digits - 1) as usize, a);
    sign * s.parse::<f64>().expect("formatted float")
}

fn sci3(x: f64) -> String {
    format!("{:.2e}", round_sig(x, 3))
}

/// A FLOPs spec file: the architectures plus the training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsSpecFile {
    pub reference: String,
    pub samples: u64,
    pub epochs: u64,
    #[serde(rename = "architecture")]
    pub architectures: Vec<ArchitectureSpec>,
}

impl FlopsSpecFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for a in &f.architectures {
            a.validate()?;
        }
        Ok(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The bundled three-way comparison at 10M-parameter scale.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_SPEC).expect("bundled spec parses")
    }

    pub fn estimate(&self) -> Result<EfficiencyReport> {
        efficiency_report(&self.architectures, &self.reference, self.samples, self.epochs)
    }

    pub fn published(&self) -> Result<EfficiencyReport> {
        published_report(&self.architectures, &self.reference, self.samples, self.epochs)
    }
}

pub const BUNDLED_SPEC: &str = include_str!("../data/flops_10m.toml");
