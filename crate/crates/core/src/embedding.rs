//! Value and gene embeddings.
//!
//! A scalar expression value becomes a convex combination of learned bin
//! vectors (the auto-discretizer). Gene identity comes from a lookup table
//! with three extra rows for the `[MASK]`, `[PAD]` and zero tokens. Hard
//! binning schemes are kept for comparison runs.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::graph::{softmax_rows_inplace, Graph, Var};
use crate::packing::{PackedBatch, PAD_GENE};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;

/// Default bin count.
pub const DEFAULT_BINS: usize = 100;
/// Rows reserved after the gene rows of a [`GeneEmbeddingTable`].
pub const N_SPECIAL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Mask,
    Pad,
    Zero,
}

impl SpecialToken {
    /// Row of this token in a table over `n_genes` genes.
    pub fn row(self, n_genes: usize) -> usize {
        n_genes
            + match self {
                SpecialToken::Mask => 0,
                SpecialToken::Pad => 1,
                SpecialToken::Zero => 2,
            }
    }
}

/// Soft, learned binning of a scalar.
///
/// ```text
/// h1 = v * w1            (+ b1)
/// h2 = leaky_relu(h1)
/// h3 = h2 W2^T + alpha h2 (+ b2)
/// p  = softmax(h3)
/// e  = p T^T
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct AutoDiscretizer {
    /// `[d, b]`, one column per bin.
    pub table: Array2<f64>,
    /// `[1, b]`.
    pub w1: Array2<f64>,
    /// `[b, b]`.
    pub w2: Array2<f64>,
    pub alpha: f64,
    pub leak: f64,
    /// Optional `[1, b]` biases after each linear map.
    pub bias: Option<(Array2<f64>, Array2<f64>)>,
}

impl AutoDiscretizer {
    pub fn new(dim: usize, bins: usize, leak: f64, with_bias: bool, rng: &mut Rng) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Validation(format!("need at least 2 bins, got {bins}")));
        }
        let mut p = ParamStore::new();
        Self::init_params(&mut p, "", dim, bins, with_bias, rng);
        Self::from_store(&p, "", leak)
    }

    /// Registers freshly initialized parameters under `prefix`.
    pub fn init_params(p: &mut ParamStore, prefix: &str, dim: usize, bins: usize, with_bias: bool, rng: &mut Rng) {
        p.insert_normal(format!("{prefix}table"), (dim, bins), 0.5, rng);
        p.insert_normal(format!("{prefix}w1"), (1, bins), 1.0, rng);
        p.insert_normal(format!("{prefix}w2"), (bins, bins), 0.01, rng);
        p.insert(format!("{prefix}alpha"), Array2::ones((1, 1)));
        if with_bias {
            p.insert(format!("{prefix}b1"), Array2::zeros((1, bins)));
            p.insert(format!("{prefix}b2"), Array2::zeros((1, bins)));
        }
    }

    pub fn from_store(p: &ParamStore, prefix: &str, leak: f64) -> Result<Self> {
        let get = |n: &str| {
            p.get(&format!("{prefix}{n}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{prefix}{n}`")))
        };
        let bias = match (p.get(&format!("{prefix}b1")), p.get(&format!("{prefix}b2"))) {
            (Some(a), Some(b)) => Some((a.clone(), b.clone())),
            _ => None,
        };
        let d = Self {
            table: get("table")?,
            w1: get("w1")?,
            w2: get("w2")?,
            alpha: get("alpha")?[[0, 0]],
            leak,
            bias,
        };
        if d.n_bins() < 2 || d.w1.dim() != (1, d.n_bins()) || d.w2.dim() != (d.n_bins(), d.n_bins()) {
            return Err(Error::Shape("inconsistent discretizer tensors".into()));
        }
        Ok(d)
    }

    pub fn n_bins(&self) -> usize {
        self.table.ncols()
    }

    pub fn dim(&self) -> usize {
        self.table.nrows()
    }

    /// Bin weights for a batch of values, `[n, b]`.
    pub fn weights_batch(&self, values: &[f64]) -> Result<Array2<f64>> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("cannot discretize non-finite value {v}")));
        }
        let v = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column");
        let mut h = v.dot(&self.w1);
        if let Some((b1, _)) = &self.bias {
            h += b1;
        }
        h.mapv_inplace(|x| if x >= 0.0 { x } else { self.leak * x });
        let mut h3 = h.dot(&self.w2.t()) + &(&h * self.alpha);
        if let Some((_, b2)) = &self.bias {
            h3 += b2;
        }
        softmax_rows_inplace(&mut h3);
        Ok(h3)
    }

    /// Embedding `[d]` and bin weights `[b]` of one value.
    pub fn discretize(&self, v: f64) -> Result<(Array1<f64>, Array1<f64>)> {
        let w = self.weights_batch(&[v])?;
        let e = w.dot(&self.table.t());
        Ok((e.index_axis(Axis(0), 0).to_owned(), w.index_axis(Axis(0), 0).to_owned()))
    }

    /// Embeddings `[n, d]` for a batch of values.
    pub fn embed_batch(&self, values: &[f64]) -> Result<Array2<f64>> {
        Ok(self.weights_batch(values)?.dot(&self.table.t()))
    }
}

/// Differentiable auto-discretization of a `[n, 1]` column of values using
/// tensors bound under `prefix`. Returns `[n, d]`.
pub fn discretize_graph(g: &mut Graph, p: &Bound, prefix: &str, values: Var, leak: f64) -> Var {
    let w1 = p.var(&format!("{prefix}w1"));
    let w2 = p.var(&format!("{prefix}w2"));
    let alpha = p.var(&format!("{prefix}alpha"));
    let table = p.var(&format!("{prefix}table"));
    let mut h = g.matmul(values, w1);
    if let Some(b1) = p.try_var(&format!("{prefix}b1")) {
        h = g.add_row(h, b1);
    }
    let h2 = g.leaky_relu(h, leak);
    let cross = g.matmul_nt(h2, w2);
    let skip = g.scale_by(h2, alpha);
    let mut h3 = g.add(cross, skip);
    if let Some(b2) = p.try_var(&format!("{prefix}b2")) {
        h3 = g.add_row(h3, b2);
    }
    let probs = g.softmax_rows(h3);
    g.matmul_nt(probs, table)
}

/// Gene identity embeddings plus the special-token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneEmbeddingTable {
    pub n_genes: usize,
    /// `[n_genes + N_SPECIAL, d]`.
    pub table: Array2<f64>,
}

impl GeneEmbeddingTable {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        if table.nrows() < N_SPECIAL {
            return Err(Error::Shape(format!(
                "gene table needs at least {N_SPECIAL} rows, has {}",
                table.nrows()
            )));
        }
        Ok(Self {
            n_genes: table.nrows() - N_SPECIAL,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn special(&self, t: SpecialToken) -> usize {
        t.row(self.n_genes)
    }

    /// Row index for a gene id, mapping [`PAD_GENE`] to the pad row.
    pub fn row_of(&self, gene: usize) -> Result<usize> {
        if gene == PAD_GENE {
            Ok(self.special(SpecialToken::Pad))
        } else if gene < self.n_genes {
            Ok(gene)
        } else {
            Err(Error::OutOfRange {
                what: "gene",
                index: gene,
                limit: self.n_genes,
            })
        }
    }
}

/// Sums value and gene embeddings for every packed slot, `[batch, m, d]`.
/// Padded slots are zero.
pub fn embed_tokens(batch: &PackedBatch, disc: &AutoDiscretizer, genes: &GeneEmbeddingTable) -> Result<Array3<f64>> {
    if disc.dim() != genes.dim() {
        return Err(Error::Shape(format!(
            "value embedding dim {} differs from gene embedding dim {}",
            disc.dim(),
            genes.dim()
        )));
    }
    let (b, m) = batch.values.dim();
    let mut out = Array3::zeros((b, m, disc.dim()));
    for cell in 0..b {
        let n = batch.n_survivors(cell);
        let values: Vec<f64> = (0..n).map(|s| batch.values[[cell, s]]).collect();
        let e = disc.embed_batch(&values)?;
        for s in 0..n {
            let row = genes.row_of(batch.gene_indices[[cell, s]])?;
            let mut dst = out.slice_mut(ndarray::s![cell, s, ..]);
            dst.assign(&e.row(s));
            dst += &genes.table.row(row);
        }
    }
    Ok(out)
}

/// Hard binning schemes used as baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    /// Nearest integer; zero stays in bin 0.
    RoundZero,
    /// Integer part; zero stays in bin 0.
    FloorZero,
    /// Ceiling for positive values, bin 0 reserved for zero.
    UpNoZero,
    /// Equal-frequency buckets from fitted quantiles.
    EqualFreq,
}

/// Quantile edges fitted on a value sample for [`BinScheme::EqualFreq`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinStats {
    pub edges: Vec<f64>,
}

impl BinStats {
    /// Interior edges at the `k / n_bins` quantiles (linear interpolation).
    pub fn fit(values: &[f64], n_bins: usize) -> Result<Self> {
        if values.is_empty() || n_bins < 2 {
            return Err(Error::Validation(
                "equal-frequency binning needs values and at least 2 bins".into(),
            ));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let last = (v.len() - 1) as f64;
        let edges = (1..n_bins)
            .map(|k| {
                let pos = last * k as f64 / n_bins as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
            })
            .collect();
        Ok(Self { edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }
}

/// Hard bin index of `v`. Not clamped; callers cap it to their table size.
pub fn baseline_bin(v: f64, scheme: BinScheme, stats: Option<&BinStats>) -> Result<usize> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Validation(format!("cannot bin value {v}")));
    }
    Ok(match scheme {
        BinScheme::RoundZero => v.round() as usize,
        BinScheme::FloorZero => v.floor() as usize,
        BinScheme::UpNoZero if v == 0.0 => 0,
        BinScheme::UpNoZero => (v.ceil() as usize).max(1),
        BinScheme::EqualFreq => {
            let s = stats.ok_or_else(|| {
                Error::Validation("equal-frequency binning requires fitted stats".into())
            })?;
            s.edges.partition_point(|&e| e < v)
        }
    })
}

/// Bin weights over a value grid, one row per value.
pub fn weights_profile(disc: &AutoDiscretizer, grid: &[f64]) -> Result<Array2<f64>> {
    disc.weights_batch(grid)
}

/// `value,bin_0,...,bin_{b-1}` CSV of [`weights_profile`].
pub fn write_weights_profile(disc: &AutoDiscretizer, grid: &[f64], mut out: impl Write) -> Result<()> {
    let w = weights_profile(disc, grid)?;
    let io = |e| Error::io("<weights profile>", e);
    let header: Vec<String> = std::iter::once("value".to_string())
        .chain((0..disc.n_bins()).map(|k| format!("bin_{k}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (v, row) in grid.iter().zip(w.rows()) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.6e}")).collect();
        writeln!(out, "{v},{}", cells.join(",")).map_err(io)?;
    }
    Ok(())
}

pub fn save_weights_profile(disc: &AutoDiscretizer, grid: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_weights_profile(disc, grid, std::io::BufWriter::new(f))
}

/// `start, start + step, ..., stop` inclusive, robust to float drift.
pub fn value_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseRow;
    use crate::masking::unmasked;
    use crate::packing::filter_and_pack;
    use crate::rng::{stream, Stream};

    fn close<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> bool {
        a.into_iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    fn disc(d: usize, b: usize, bias: bool) -> AutoDiscretizer {
        AutoDiscretizer::new(d, b, 0.1, bias, &mut stream(3, Stream::Init, 0)).unwrap()
    }

    #[test]
    fn weights_are_probabilities() {
        let d = disc(8, DEFAULT_BINS, false);
        for v in value_grid(0.0, 20.0, 0.37) {
            let (_, w) = d.discretize(v).unwrap();
            assert!((w.sum() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn zero_gives_uniform_weights() {
        let (e, w) = disc(4, 10, false).discretize(0.0).unwrap();
        assert!(w.iter().all(|&x| (x - 0.1).abs() < 1e-12));
        let d = disc(4, 10, false);
        let mean = d.table.mean_axis(Axis(1)).unwrap();
        for (a, b) in e.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(disc(4, 10, false).discretize(f64::NAN).is_err());
        assert!(disc(4, 10, false).discretize(f64::INFINITY).is_err());
    }

    #[test]
    fn continuity_probe() {
        let d = disc(8, DEFAULT_BINS, false);
        for v in value_grid(0.0, 10.0, 0.01) {
            let (_, a) = d.discretize(v).unwrap();
            let (_, b) = d.discretize(v + 1e-4).unwrap();
            let gap: f64 = (&a - &b).iter().map(|x| x.abs()).sum();
            assert!(gap < 1e-2, "gap {gap} at {v}");
        }
    }

    #[test]
    fn graph_forward_matches_plain() {
        for bias in [false, true] {
            let mut p = ParamStore::new();
            AutoDiscretizer::init_params(&mut p, "v.", 6, 12, bias, &mut stream(1, Stream::Init, 0));
            if bias {
                p.get_mut("v.b1").unwrap().fill(0.3);
                p.get_mut("v.b2").unwrap().fill(-0.2);
            }
            let plain = AutoDiscretizer::from_store(&p, "v.", 0.1).unwrap();
            let vals = [0.0, 0.5, 1.7, 4.2];
            let mut g = Graph::new();
            let bound = p.bind(&mut g, |_| true);
            let col = g.constant(Array2::from_shape_vec((4, 1), vals.to_vec()).unwrap());
            let e = discretize_graph(&mut g, &bound, "v.", col, 0.1);
            let want = plain.embed_batch(&vals).unwrap();
            assert!(close(g.value(e), &want));
        }
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let mut p = ParamStore::new();
        AutoDiscretizer::init_params(&mut p, "", 3, 5, true, &mut stream(9, Stream::Init, 0));
        let vals = Array2::from_shape_vec((3, 1), vec![0.4, 1.3, 2.6]).unwrap();
        let target = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let loss_of = |p: &ParamStore| {
            let mut g = Graph::new();
            let bound = p.bind(&mut g, |_| true);
            let col = g.constant(vals.clone());
            let e = discretize_graph(&mut g, &bound, "", col, 0.1);
            let t = g.constant(target.clone());
            let d = g.sub(e, t);
            let sq = g.square(d);
            let l = g.sum(sq);
            let grads = g.backward(l);
            (g.value(l)[[0, 0]], bound.gradients(&g, &grads))
        };
        let (_, analytic) = loss_of(&p);
        let h = 1e-5;
        for name in ["table", "w1", "w2", "alpha", "b1", "b2"] {
            let shape = p.get(name).unwrap().dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = p.clone();
                    plus.get_mut(name).unwrap()[[i, j]] += h;
                    let mut minus = p.clone();
                    minus.get_mut(name).unwrap()[[i, j]] -= h;
                    let num = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                    let ana = analytic.get(name).unwrap()[[i, j]];
                    let scale = num.abs().max(ana.abs()).max(1e-6);
                    assert!((num - ana).abs() / scale < 1e-4, "{name}[{i},{j}]: {ana} vs {num}");
                }
            }
        }
    }

    #[test]
    fn round_and_floor_schemes() {
        let b = |v, s| baseline_bin(v, s, None).unwrap();
        assert_eq!(b(1.99, BinScheme::RoundZero), 2);
        assert_eq!(b(2.01, BinScheme::RoundZero), 2);
        assert_eq!(b(1.01, BinScheme::RoundZero), 1);
        assert_eq!(b(1.99, BinScheme::FloorZero), 1);
        assert_eq!(b(1.01, BinScheme::FloorZero), 1);
        assert_eq!(b(0.0, BinScheme::RoundZero), 0);
        assert_eq!(b(0.0, BinScheme::UpNoZero), 0);
        assert_eq!(b(0.2, BinScheme::UpNoZero), 1);
        assert_eq!(b(2.0, BinScheme::UpNoZero), 2);
    }

    #[test]
    fn equal_frequency_deciles() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let stats = BinStats::fit(&values, 10).unwrap();
        assert_eq!(stats.n_bins(), 10);
        let bin = |v| baseline_bin(v, BinScheme::EqualFreq, Some(&stats)).unwrap();
        assert_eq!(bin(5.0), 0);
        assert_eq!(bin(95.0), 9);
        let mut counts = [0usize; 10];
        for &v in &values {
            counts[bin(v)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10), "{counts:?}");
        assert!(baseline_bin(5.0, BinScheme::EqualFreq, None).is_err());
    }

    fn table(n_genes: usize, d: usize) -> GeneEmbeddingTable {
        let mut p = ParamStore::new();
        p.insert_normal("g", (n_genes + N_SPECIAL, d), 1.0, &mut stream(2, Stream::Init, 0));
        GeneEmbeddingTable::new(p.get("g").unwrap().clone()).unwrap()
    }

    #[test]
    fn embed_tokens_decomposes() {
        let d = disc(4, 10, false);
        let mut genes = table(5, 4);
        let cells = vec![
            unmasked(&SparseRow::from_dense(&[1.5, 0.0, 1.5, 0.0, 0.0])),
            unmasked(&SparseRow::from_dense(&[0.0, 0.0, 0.0, 2.0, 0.0])),
        ];
        let batch = filter_and_pack(&cells).unwrap();
        let i = embed_tokens(&batch, &d, &genes).unwrap();
        let e = d.embed_batch(&[1.5]).unwrap();
        // Same value, different genes.
        let r0 = i.slice(ndarray::s![0, 0, ..]).to_owned() - genes.table.row(0);
        let r1 = i.slice(ndarray::s![0, 1, ..]).to_owned() - genes.table.row(2);
        assert!(close(&r0, e.row(0)) && close(&r1, e.row(0)));
        assert_ne!(i.slice(ndarray::s![0, 0, ..]), i.slice(ndarray::s![0, 1, ..]));
        // Padded slot is zero.
        assert!(i.slice(ndarray::s![1, 1, ..]).iter().all(|&x| x == 0.0));
        // Zeroed gene row leaves only the value embedding.
        genes.table.row_mut(3).fill(0.0);
        let i = embed_tokens(&batch, &d, &genes).unwrap();
        let e = d.embed_batch(&[2.0]).unwrap();
        assert!(close(i.slice(ndarray::s![1, 0, ..]), e.row(0)));
    }

    #[test]
    fn embed_tokens_rejects_unknown_gene() {
        let d = disc(4, 10, false);
        let genes = table(3, 4);
        let cells = vec![unmasked(&SparseRow::from_dense(&[0.0, 0.0, 0.0, 0.0, 1.0]))];
        let batch = filter_and_pack(&cells).unwrap();
        assert!(matches!(
            embed_tokens(&batch, &d, &genes),
            Err(Error::OutOfRange { what: "gene", .. })
        ));
    }

    #[test]
    fn profile_csv_shape() {
        let d = disc(4, DEFAULT_BINS, false);
        let grid = value_grid(0.0, 10.0, 0.1);
        assert_eq!(grid.len(), 101);
        let mut buf = Vec::new();
        write_weights_profile(&d, &grid, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 102);
        assert!(lines.iter().all(|l| l.split(',').count() == DEFAULT_BINS + 1));
    }
}
