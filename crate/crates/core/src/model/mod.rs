//! Asymmetric encoder-decoder over sparse expression profiles.
//!
//! The encoder sees only survivor tokens (non-zero, unmasked genes). Its
//! outputs are scattered back to the full gene axis next to `[MASK]` and zero
//! tokens, gene embeddings are added everywhere, and a linear map bridges to
//! the decoder width. A shared linear head reads one value per gene.
//!
//! Every forward pass is built per cell on an autodiff [`Graph`], so padded
//! slots never exist inside the network: a batch is a list of cells of
//! different lengths. The tensor-level functions below accept the padded
//! `[batch, m, d]` layout for callers that want it and honor `pad_mask` by
//! slicing.

mod checkpoint;
mod config;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    Architecture, AttentionBackend, BlockSpec, ModelConfig, Objective, ValueEncoding, PRESETS,
};

use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;

use crate::data::SparseRow;
use crate::embedding::{
    baseline_bin, discretize_graph, AutoDiscretizer, GeneEmbeddingTable, SpecialToken, N_SPECIAL,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{unmasked, MaskedRow, Token};
use crate::packing::{PackedBatch, SlotSource};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Stream};
use layers::{block, draw_features, init_block, Attention};

pub const GENE_TABLE: &str = "gene.table";
pub const VALUE_PREFIX: &str = "value.";
pub const VALUE_BINS: &str = "value.bins";
pub const PROJ_W: &str = "proj.w";
pub const PROJ_B: &str = "proj.b";
pub const HEAD_W: &str = "head.w";

/// Parameter name prefix of encoder block `l`.
pub fn encoder_prefix(l: usize) -> String {
    format!("enc.{l}.")
}

/// Parameter name prefix of decoder block `l`.
pub fn decoder_prefix(l: usize) -> String {
    format!("dec.{l}.")
}

/// Graph handles produced by [`Model::forward_cell`].
#[derive(Debug, Clone, Copy)]
pub struct CellOutput {
    /// `[n_genes, head_width]`: values (regression) or bin logits.
    pub output: Var,
    /// `[n_survivors, d_enc]`, rows in ascending gene order.
    pub encoder_out: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    features: Vec<Array2<f64>>,
}

impl Model {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, Stream::Init, 0);
        let mut p = ParamStore::new();
        let (de, dd) = (config.encoder.dim, config.decoder.dim);
        p.insert_normal(GENE_TABLE, (config.n_genes + N_SPECIAL, de), 0.5, &mut r);
        match config.value_encoding {
            ValueEncoding::AutoDiscretize => AutoDiscretizer::init_params(
                &mut p,
                VALUE_PREFIX,
                de,
                config.bins,
                config.value_bias,
                &mut r,
            ),
            ValueEncoding::Binned(_) => p.insert_normal(VALUE_BINS, (config.bins, de), 0.5, &mut r),
        }
        for l in 0..config.encoder.depth {
            init_block(&mut p, &encoder_prefix(l), de, config.ffn_multiplier, &mut r);
        }
        if config.architecture == Architecture::Asymmetric {
            p.insert_normal(PROJ_W, (de, dd), 1.0 / (de as f64).sqrt(), &mut r);
            p.insert(PROJ_B, Array2::zeros((1, dd)));
            for l in 0..config.decoder.depth {
                init_block(&mut p, &decoder_prefix(l), dd, config.ffn_multiplier, &mut r);
            }
        }
        let dout = config.output_dim();
        p.insert_normal(HEAD_W, (dout, config.head_width()), 1.0 / (dout as f64).sqrt(), &mut r);
        Self::from_parts(config, p)
    }

    /// Wraps existing parameters, checking they match the config.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::parameter_shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.dim() == *shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, config implies {shape:?}",
                        t.dim()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        let mut m = Self {
            config,
            params,
            features: Vec::new(),
        };
        m.redraw_features(m.config.seed);
        Ok(m)
    }

    /// Name and shape of every tensor a model with this config holds.
    pub fn parameter_shapes(c: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let (de, dd) = (c.encoder.dim, c.decoder.dim);
        let mut v = vec![(GENE_TABLE.to_string(), (c.n_genes + N_SPECIAL, de))];
        match c.value_encoding {
            ValueEncoding::AutoDiscretize => {
                v.push((format!("{VALUE_PREFIX}table"), (de, c.bins)));
                v.push((format!("{VALUE_PREFIX}w1"), (1, c.bins)));
                v.push((format!("{VALUE_PREFIX}w2"), (c.bins, c.bins)));
                v.push((format!("{VALUE_PREFIX}alpha"), (1, 1)));
                if c.value_bias {
                    v.push((format!("{VALUE_PREFIX}b1"), (1, c.bins)));
                    v.push((format!("{VALUE_PREFIX}b2"), (1, c.bins)));
                }
            }
            ValueEncoding::Binned(_) => v.push((VALUE_BINS.to_string(), (c.bins, de))),
        }
        let block_shapes = |prefix: String, d: usize, v: &mut Vec<(String, (usize, usize))>| {
            let h = d * c.ffn_multiplier;
            for (n, s) in [
                ("ln1.g", (1, d)),
                ("ln1.b", (1, d)),
                ("ln2.g", (1, d)),
                ("ln2.b", (1, d)),
                ("wq", (d, d)),
                ("wk", (d, d)),
                ("wv", (d, d)),
                ("wo", (d, d)),
                ("bq", (1, d)),
                ("bk", (1, d)),
                ("bv", (1, d)),
                ("bo", (1, d)),
                ("ff1.w", (d, h)),
                ("ff1.b", (1, h)),
                ("ff2.w", (h, d)),
                ("ff2.b", (1, d)),
            ] {
                v.push((format!("{prefix}{n}"), s));
            }
        };
        for l in 0..c.encoder.depth {
            block_shapes(encoder_prefix(l), de, &mut v);
        }
        if c.architecture == Architecture::Asymmetric {
            v.push((PROJ_W.to_string(), (de, dd)));
            v.push((PROJ_B.to_string(), (1, dd)));
            for l in 0..c.decoder.depth {
                block_shapes(decoder_prefix(l), dd, &mut v);
            }
        }
        v.push((HEAD_W.to_string(), (c.output_dim(), c.head_width())));
        v
    }

    /// Redraws the random features of the linear-attention stack.
    pub fn redraw_features(&mut self, seed: u64) {
        let c = &self.config;
        self.features.clear();
        if c.attention != AttentionBackend::LinearRandomFeatures {
            return;
        }
        let spec = match c.architecture {
            Architecture::Asymmetric => c.decoder,
            Architecture::EncoderOnly => c.encoder,
        };
        self.features = (0..spec.depth)
            .map(|l| {
                let mut r = rng::stream(seed, Stream::Features, l as u64);
                draw_features(c.n_random_features, spec.head_dim(), c.orthogonal_features, &mut r)
            })
            .collect();
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_elements()
    }

    pub fn gene_table(&self) -> GeneEmbeddingTable {
        GeneEmbeddingTable::new(self.params.get(GENE_TABLE).expect("gene table").clone())
            .expect("gene table rows")
    }

    /// The value discretizer, when the model uses one.
    pub fn discretizer(&self) -> Option<AutoDiscretizer> {
        match self.config.value_encoding {
            ValueEncoding::AutoDiscretize => {
                AutoDiscretizer::from_store(&self.params, VALUE_PREFIX, self.config.leak).ok()
            }
            ValueEncoding::Binned(_) => None,
        }
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, |_| false)
    }

    pub fn bind_trainable(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, |_| true)
    }

    /// `[n, d_enc]` value embeddings.
    pub fn encode_values(&self, g: &mut Graph, p: &Bound, values: &[f64]) -> Result<Var> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite input value {v}")));
        }
        match self.config.value_encoding {
            ValueEncoding::AutoDiscretize => {
                let col = g.constant(
                    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column"),
                );
                Ok(discretize_graph(g, p, VALUE_PREFIX, col, self.config.leak))
            }
            ValueEncoding::Binned(scheme) => {
                let cap = self.config.bins - 1;
                let idx = values
                    .iter()
                    .map(|&v| {
                        baseline_bin(v.max(0.0), scheme, self.config.bin_stats.as_ref())
                            .map(|b| b.min(cap))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(g.gather(p.var(VALUE_BINS), &idx))
            }
        }
    }

    fn stack(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        spec: BlockSpec,
        prefix: fn(usize) -> String,
        linear: bool,
        stage: &'static str,
    ) -> Result<Var> {
        let mut x = x;
        for l in 0..spec.depth {
            let attn = if linear {
                Attention::Linear(&self.features[l])
            } else {
                Attention::Exact
            };
            x = block(g, p, &prefix(l), x, spec.heads, attn);
            if !g.value(x).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { stage, layer: l });
            }
        }
        Ok(x)
    }

    fn linear_backend(&self) -> bool {
        self.config.attention == AttentionBackend::LinearRandomFeatures
    }

    /// Encoder stack over `[n, d_enc]` token rows. The asymmetric encoder is
    /// always exact; the encoder-only variant follows the configured backend.
    pub fn encoder_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let linear = self.config.architecture == Architecture::EncoderOnly && self.linear_backend();
        self.stack(g, p, x, self.config.encoder, encoder_prefix, linear, "encoder")
    }

    pub fn decoder_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.stack(g, p, x, self.config.decoder, decoder_prefix, self.linear_backend(), "decoder")
    }

    /// Survivor token rows `[n_survivors, d_enc]`: value plus gene embedding.
    pub fn survivor_tokens(&self, g: &mut Graph, p: &Bound, cell: &SparseRow) -> Result<Var> {
        self.check_genes(cell.n_genes)?;
        let e = self.encode_values(g, p, &cell.values)?;
        let ge = g.gather(p.var(GENE_TABLE), &cell.genes);
        Ok(g.add(e, ge))
    }

    fn check_genes(&self, n: usize) -> Result<()> {
        if n != self.config.n_genes {
            return Err(Error::Shape(format!(
                "cell has {n} genes, model expects {}",
                self.config.n_genes
            )));
        }
        Ok(())
    }

    /// Full-length token rows `[n_genes, d_enc]` before any projection:
    /// `survivor` rows come from `survivor_rows` (one per survivor, gene
    /// order), masked rows from `[MASK]` or the displayed value, the rest
    /// from the zero token; gene embeddings are added everywhere.
    fn full_length_tokens(&self, g: &mut Graph, p: &Bound, survivor_rows: Var, cell: &MaskedRow) -> Result<Var> {
        self.check_genes(cell.n_genes)?;
        let n = cell.n_genes;
        let table = p.var(GENE_TABLE);
        let shown: Vec<f64> = cell
            .masked
            .iter()
            .filter_map(|s| match s.token {
                Token::Value(v) => Some(v),
                Token::Mask => None,
            })
            .collect();
        let shown_rows = if shown.is_empty() {
            None
        } else {
            Some(self.encode_values(g, p, &shown)?)
        };
        let zero = SpecialToken::Zero.row(n);
        let mask = SpecialToken::Mask.row(n);
        let mut sources = vec![(table, zero); n];
        for (slot, &gene) in cell.survivors.genes.iter().enumerate() {
            sources[gene] = (survivor_rows, slot);
        }
        let mut k = 0;
        for s in &cell.masked {
            sources[s.gene] = match s.token {
                Token::Mask => (table, mask),
                Token::Value(_) => {
                    k += 1;
                    (shown_rows.expect("shown values"), k - 1)
                }
            };
        }
        let assembled = g.rows(&sources);
        let all: Vec<usize> = (0..n).collect();
        let ge = g.gather(table, &all);
        Ok(g.add(assembled, ge))
    }

    /// Decoder input `[n_genes, d_dec]` from encoder rows of one cell.
    pub fn assemble_graph(&self, g: &mut Graph, p: &Bound, encoder_out: Var, cell: &MaskedRow) -> Result<Var> {
        if g.shape(encoder_out).0 != cell.survivors.nnz() {
            return Err(Error::Shape(format!(
                "{} encoder rows for {} survivors",
                g.shape(encoder_out).0,
                cell.survivors.nnz()
            )));
        }
        let full = self.full_length_tokens(g, p, encoder_out, cell)?;
        let y = g.matmul(full, p.var(PROJ_W));
        Ok(g.add_row(y, p.var(PROJ_B)))
    }

    pub fn head_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.matmul(x, p.var(HEAD_W))
    }

    /// Whole forward pass for one masked cell.
    pub fn forward_cell(&self, g: &mut Graph, p: &Bound, cell: &MaskedRow) -> Result<CellOutput> {
        if cell.survivors.nnz() == 0 {
            return Err(Error::NoSurvivors { cell: 0 });
        }
        match self.config.architecture {
            Architecture::Asymmetric => {
                let x = self.survivor_tokens(g, p, &cell.survivors)?;
                let encoder_out = self.encoder_graph(g, p, x)?;
                let full = self.assemble_graph(g, p, encoder_out, cell)?;
                let dec = self.decoder_graph(g, p, full)?;
                Ok(CellOutput {
                    output: self.head_graph(g, p, dec),
                    encoder_out,
                })
            }
            Architecture::EncoderOnly => {
                let e = self.encode_values(g, p, &cell.survivors.values)?;
                let full = self.full_length_tokens(g, p, e, cell)?;
                let enc = self.encoder_graph(g, p, full)?;
                let survivors: Vec<(Var, usize)> =
                    cell.survivors.genes.iter().map(|&gene| (enc, gene)).collect();
                let encoder_out = g.rows(&survivors);
                Ok(CellOutput {
                    output: self.head_graph(g, p, enc),
                    encoder_out,
                })
            }
        }
    }

    /// Head outputs `[n_genes, head_width]` per cell, without gradients.
    pub fn predict(&self, cells: &[MaskedRow]) -> Result<Vec<Array2<f64>>> {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let mut g = Graph::new();
                let p = self.bind_frozen(&mut g);
                let out = self.forward_cell(&mut g, &p, c).map_err(|e| relabel(e, i))?;
                Ok(g.value(out.output).clone())
            })
            .collect()
    }

    /// Regression predictions per cell; for the classification objective the
    /// arg-max bin index stands in for the value.
    pub fn predict_values_for(&self, cells: &[MaskedRow]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .predict(cells)?
            .into_iter()
            .map(|o| match self.config.objective {
                Objective::Regression => o.column(0).to_vec(),
                Objective::Classification => o
                    .rows()
                    .into_iter()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .map_or(0.0, |(k, _)| k as f64)
                    })
                    .collect(),
            })
            .collect())
    }

    /// `[1, d_enc]` max-pool of encoder outputs over the cell's expressed genes.
    pub fn embedding_graph(&self, g: &mut Graph, p: &Bound, cell: &SparseRow) -> Result<Var> {
        if cell.nnz() == 0 {
            return Err(Error::NoSurvivors { cell: 0 });
        }
        let enc = match self.config.architecture {
            Architecture::Asymmetric => {
                let x = self.survivor_tokens(g, p, cell)?;
                self.encoder_graph(g, p, x)?
            }
            Architecture::EncoderOnly => self.forward_cell(g, p, &unmasked(cell))?.encoder_out,
        };
        Ok(g.max_rows(enc))
    }

    /// Max-pooled encoder outputs over each cell's expressed genes, `[c, d_enc]`.
    pub fn embed_cells(&self, cells: &[SparseRow]) -> Result<Array2<f64>> {
        let rows: Vec<Array2<f64>> = cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let mut g = Graph::new();
                let p = self.bind_frozen(&mut g);
                let pooled = self.embedding_graph(&mut g, &p, c).map_err(|e| relabel(e, i))?;
                Ok(g.value(pooled).clone())
            })
            .collect::<Result<_>>()?;
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.config.encoder.dim)));
        }
        Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    }

    /// `[batch, m, d_enc]` token embeddings for a packed batch; padded slots
    /// are zero.
    pub fn embed_batch(&self, batch: &PackedBatch) -> Result<Array3<f64>> {
        let d = self.config.encoder.dim;
        let mut out = Array3::zeros((batch.batch_size(), batch.m(), d));
        for cell in 0..batch.batch_size() {
            let n = batch.n_survivors(cell);
            let row = SparseRow::new(
                batch.n_genes,
                batch.scatter_map[cell].clone(),
                batch.values.slice(s![cell, ..n]).to_vec(),
            );
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let x = self.survivor_tokens(&mut g, &p, &row)?;
            out.slice_mut(s![cell, ..n, ..]).assign(g.value(x));
        }
        Ok(out)
    }

    /// Encoder over padded input; padded slots neither attend nor are
    /// attended to and come back as zeros.
    pub fn encoder_forward(&self, input: &Array3<f64>, pad_mask: &Array2<bool>) -> Result<Array3<f64>> {
        let (b, m, d) = input.dim();
        if pad_mask.dim() != (b, m) || d != self.config.encoder.dim {
            return Err(Error::Shape(format!(
                "encoder input [{b}, {m}, {d}] with pad mask {:?}",
                pad_mask.dim()
            )));
        }
        let mut out = Array3::zeros((b, m, d));
        for i in 0..b {
            let keep: Vec<usize> = (0..m).filter(|&j| !pad_mask[[i, j]]).collect();
            if keep.is_empty() {
                continue;
            }
            let x = input.index_axis(Axis(0), i).select(Axis(0), &keep);
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let xv = g.constant(x);
            let y = self.encoder_graph(&mut g, &p, xv)?;
            for (r, &j) in keep.iter().enumerate() {
                out.slice_mut(s![i, j, ..]).assign(&g.value(y).row(r));
            }
        }
        Ok(out)
    }

    /// Full-length decoder input `[batch, n_genes, d_dec]`.
    pub fn assemble_decoder_input(&self, encoder_out: &Array3<f64>, batch: &PackedBatch) -> Result<Array3<f64>> {
        let (b, m, d) = encoder_out.dim();
        if b != batch.batch_size() || m != batch.m() || d != self.config.encoder.dim {
            return Err(Error::Shape(format!(
                "encoder output [{b}, {m}, {d}] does not match batch [{}, {}]",
                batch.batch_size(),
                batch.m()
            )));
        }
        let n = batch.n_genes;
        let mut out = Array3::zeros((b, n, self.config.decoder.dim));
        for i in 0..b {
            let sources = batch.sources(i);
            let claimed = sources.iter().filter(|s| !matches!(s, SlotSource::Zero)).count();
            if claimed != batch.n_survivors(i) + batch.masked[i].len() {
                return Err(Error::Shape(format!("cell {i}: survivor and masked positions overlap")));
            }
            let ns = batch.n_survivors(i);
            let cell = MaskedRow {
                n_genes: n,
                survivors: SparseRow::new(n, batch.scatter_map[i].clone(), batch.values.slice(s![i, ..ns]).to_vec()),
                masked: batch.masked[i].clone(),
            };
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let enc = g.constant(encoder_out.slice(s![i, ..ns, ..]).to_owned());
            let full = self.assemble_graph(&mut g, &p, enc, &cell)?;
            out.index_axis_mut(Axis(0), i).assign(g.value(full));
        }
        Ok(out)
    }

    pub fn decoder_forward(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        if input.dim().2 != self.config.decoder.dim {
            return Err(Error::Shape(format!(
                "decoder input width {} != {}",
                input.dim().2,
                self.config.decoder.dim
            )));
        }
        let mut out = Array3::zeros(input.dim());
        for (i, x) in input.outer_iter().enumerate() {
            let mut g = Graph::new();
            let p = self.bind_frozen(&mut g);
            let xv = g.constant(x.to_owned());
            let y = self.decoder_graph(&mut g, &p, xv)?;
            out.index_axis_mut(Axis(0), i).assign(g.value(y));
        }
        Ok(out)
    }

    /// `[batch, n_genes]` values through the shared head.
    pub fn predict_values(&self, decoder_out: &Array3<f64>) -> Result<Array2<f64>> {
        predict_values(decoder_out, self.params.get(HEAD_W).expect("head"))
    }
}

/// `[batch, n] = x[batch, n, d] . w[d, 1]`.
pub fn predict_values(decoder_out: &Array3<f64>, head: &Array2<f64>) -> Result<Array2<f64>> {
    let (b, n, d) = decoder_out.dim();
    if head.dim() != (d, 1) {
        return Err(Error::Shape(format!("head {:?} for width {d}", head.dim())));
    }
    let flat = decoder_out
        .to_shape((b * n, d))
        .map_err(|e| Error::Shape(e.to_string()))?
        .dot(head);
    Ok(flat.into_shape_with_order((b, n)).expect("same size"))
}

/// Coordinatewise max over non-padded rows, `[batch, d]`.
pub fn cell_embedding(x: &Array3<f64>, pad_mask: &Array2<bool>) -> Result<Array2<f64>> {
    let (b, m, d) = x.dim();
    if pad_mask.dim() != (b, m) {
        return Err(Error::Shape("pad mask does not match input".into()));
    }
    let mut out = Array2::from_elem((b, d), f64::NEG_INFINITY);
    for i in 0..b {
        let mut any = false;
        for j in (0..m).filter(|&j| !pad_mask[[i, j]]) {
            any = true;
            for k in 0..d {
                out[[i, k]] = out[[i, k]].max(x[[i, j, k]]);
            }
        }
        if !any {
            return Err(Error::Empty(format!("cell {i} has nothing to pool")));
        }
    }
    Ok(out)
}

fn relabel(e: Error, cell: usize) -> Error {
    match e {
        Error::NoSurvivors { .. } => Error::NoSurvivors { cell },
        other => other,
    }
}
