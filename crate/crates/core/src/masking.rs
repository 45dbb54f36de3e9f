//! Balanced zero / non-zero masking and token replacement.
//!
//! Non-zero genes are masked at a much higher rate than zeros so that both
//! classes contribute a comparable number of supervised positions. Each
//! masked position is then shown to the model as a `[MASK]` token, a random
//! expression value from the same cell, or its original value.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::data::SparseRow;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskConfig {
    pub nonzero_mask_ratio: f64,
    pub zero_mask_ratio: f64,
    /// Probabilities of (`[MASK]`, random value, keep original).
    pub replace_probs: [f64; 3],
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self::with_ratio(0.3, 0)
    }
}

impl MaskConfig {
    /// Non-zero ratio `ratio`, zero ratio ten times lower.
    pub fn with_ratio(ratio: f64, seed: u64) -> Self {
        Self {
            nonzero_mask_ratio: ratio,
            zero_mask_ratio: ratio / 10.0,
            replace_probs: [0.8, 0.1, 0.1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("nonzero_mask_ratio", self.nonzero_mask_ratio),
            ("zero_mask_ratio", self.zero_mask_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.replace_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("replace_probs must be probabilities".into()));
        }
        let total: f64 = self.replace_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "replace_probs must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    /// Masked counts `(non-zero, zero)` for a cell with the given composition.
    pub fn counts(&self, n_nonzero: usize, n_zero: usize) -> (usize, usize) {
        (
            (self.nonzero_mask_ratio * n_nonzero as f64).round() as usize,
            (self.zero_mask_ratio * n_zero as f64).round() as usize,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Replacement {
    MaskToken,
    RandomValue(f64),
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub n_genes: usize,
    pub masked_nonzero: Vec<usize>,
    pub masked_zero: Vec<usize>,
    pub replacement: BTreeMap<usize, Replacement>,
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn empty(n_genes: usize) -> Self {
        Self {
            n_genes,
            masked_nonzero: Vec::new(),
            masked_zero: Vec::new(),
            replacement: BTreeMap::new(),
        }
    }

    pub fn n_masked(&self) -> usize {
        self.masked_nonzero.len() + self.masked_zero.len()
    }
}

/// Builds the plan for one cell using the stream derived from
/// `(cfg.seed, cell_index)`.
pub fn build_mask_plan(cell: &SparseRow, cfg: &MaskConfig, cell_index: u64) -> Result<MaskPlan> {
    let mut r = rng::stream(cfg.seed, Stream::Mask, cell_index);
    build_mask_plan_with(cell, cfg, &mut r)
}

pub fn build_mask_plan_with(cell: &SparseRow, cfg: &MaskConfig, r: &mut Rng) -> Result<MaskPlan> {
    cfg.validate()?;
    let n_nonzero = cell.nnz();
    let n_zero = cell.n_genes - n_nonzero;
    if n_nonzero == 0 {
        return Err(Error::Validation("cannot mask a cell with no expressed genes".into()));
    }
    let (k_nz, k_z) = cfg.counts(n_nonzero, n_zero);
    if k_nz == 0 && k_z == 0 {
        return Err(Error::DegeneratePlan { n_nonzero, n_zero });
    }

    let mut masked_nonzero: Vec<usize> = sample(r, n_nonzero, k_nz)
        .into_iter()
        .map(|i| cell.genes[i])
        .collect();
    masked_nonzero.sort_unstable();

    let mut masked_zero = Vec::with_capacity(k_z);
    if k_z > 0 {
        let zeros = zero_genes(cell);
        masked_zero = sample(r, zeros.len(), k_z)
            .into_iter()
            .map(|i| zeros[i])
            .collect();
        masked_zero.sort_unstable();
    }

    let [p_mask, p_random, _] = cfg.replace_probs;
    let mut replacement = BTreeMap::new();
    for &g in masked_nonzero.iter().chain(&masked_zero) {
        let u: f64 = r.random();
        let kind = if u < p_mask {
            Replacement::MaskToken
        } else if u < p_mask + p_random {
            Replacement::RandomValue(cell.values[r.random_range(0..n_nonzero)])
        } else {
            Replacement::Keep
        };
        replacement.insert(g, kind);
    }
    Ok(MaskPlan {
        n_genes: cell.n_genes,
        masked_nonzero,
        masked_zero,
        replacement,
    })
}

fn zero_genes(cell: &SparseRow) -> Vec<usize> {
    let mut out = Vec::with_capacity(cell.n_genes - cell.nnz());
    let mut nz = cell.genes.iter().peekable();
    for g in 0..cell.n_genes {
        if nz.peek() == Some(&&g) {
            nz.next();
        } else {
            out.push(g);
        }
    }
    out
}

/// What the model is shown at a masked position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Token {
    Mask,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSlot {
    pub gene: usize,
    pub token: Token,
    /// Ground truth for the loss.
    pub truth: f64,
    pub was_nonzero: bool,
}

/// A cell after masking: the unmasked non-zero genes, the masked positions
/// with their displayed tokens, and (implicitly) the unmasked zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedRow {
    pub n_genes: usize,
    pub survivors: SparseRow,
    pub masked: Vec<MaskedSlot>,
}

impl MaskedRow {
    /// Genes that are zero and not masked, ascending.
    pub fn unmasked_zeros(&self) -> Vec<usize> {
        let mut taken = vec![false; self.n_genes];
        for &g in &self.survivors.genes {
            taken[g] = true;
        }
        for s in &self.masked {
            taken[s.gene] = true;
        }
        (0..self.n_genes).filter(|&g| !taken[g]).collect()
    }

    /// Dense view of what the model sees; `None` marks a `[MASK]` token.
    pub fn displayed(&self) -> Vec<Option<f64>> {
        let mut out = vec![Some(0.0); self.n_genes];
        for (&g, &v) in self.survivors.genes.iter().zip(&self.survivors.values) {
            out[g] = Some(v);
        }
        for s in &self.masked {
            out[s.gene] = match s.token {
                Token::Mask => None,
                Token::Value(v) => Some(v),
            };
        }
        out
    }
}

/// Applies a plan to its cell.
pub fn apply_mask(cell: &SparseRow, plan: &MaskPlan) -> Result<MaskedRow> {
    if plan.n_genes != cell.n_genes {
        return Err(Error::Shape(format!(
            "plan covers {} genes, cell has {}",
            plan.n_genes, cell.n_genes
        )));
    }
    let dense = cell.to_dense();
    let mut is_masked = vec![false; cell.n_genes];
    let mut masked = Vec::with_capacity(plan.n_masked());
    for (&g, expect_nonzero) in plan
        .masked_nonzero
        .iter()
        .map(|g| (g, true))
        .chain(plan.masked_zero.iter().map(|g| (g, false)))
    {
        if g >= cell.n_genes || (dense[g] != 0.0) != expect_nonzero || is_masked[g] {
            return Err(Error::Shape(format!(
                "plan position {g} does not match this cell"
            )));
        }
        is_masked[g] = true;
        let token = match plan.replacement.get(&g).copied().unwrap_or(Replacement::MaskToken) {
            Replacement::MaskToken => Token::Mask,
            Replacement::RandomValue(v) => Token::Value(v),
            Replacement::Keep => Token::Value(dense[g]),
        };
        masked.push(MaskedSlot {
            gene: g,
            token,
            truth: dense[g],
            was_nonzero: expect_nonzero,
        });
    }
    masked.sort_by_key(|s| s.gene);
    let (genes, values) = cell
        .genes
        .iter()
        .zip(&cell.values)
        .filter(|(g, _)| !is_masked[**g])
        .map(|(g, v)| (*g, *v))
        .unzip();
    Ok(MaskedRow {
        n_genes: cell.n_genes,
        survivors: SparseRow::new(cell.n_genes, genes, values),
        masked,
    })
}

/// Masks a whole cell list; cell `i` uses stream index `offset + i`.
pub fn mask_cells(cells: &[SparseRow], cfg: &MaskConfig, offset: u64) -> Result<Vec<MaskedRow>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let plan = build_mask_plan(c, cfg, offset + i as u64)?;
            apply_mask(c, &plan)
        })
        .collect()
}

/// An unmasked view of a cell, used at inference time.
pub fn unmasked(cell: &SparseRow) -> MaskedRow {
    MaskedRow {
        n_genes: cell.n_genes,
        survivors: cell.clone(),
        masked: Vec::new(),
    }
}
