use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use super::{Entry, SparseExpressionMatrix, Stage};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Parameters for the synthetic count generator.
///
/// Each cell type has a mean log-rate profile over genes built from a shared
/// gene baseline plus a rank-`rank` type component. A cell perturbs its type's
/// latent factors, picks its expressed genes by rate-weighted sampling without
/// replacement and draws counts from a Poisson around the same rates, so both
/// which genes are zero and how large the non-zeros are carry type signal.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_cell_types: usize,
    /// Target fraction of zero entries.
    pub sparsity: f64,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Spread of type centroids in latent space.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Per-cell latent jitter around its type centroid.
    #[serde(default = "default_cell_noise")]
    pub cell_noise: f64,
    /// Independent per-gene log-rate noise.
    #[serde(default = "default_gene_noise")]
    pub gene_noise: f64,
    pub seed: u64,
}

fn default_rank() -> usize {
    2
}
fn default_separation() -> f64 {
    1.5
}
fn default_cell_noise() -> f64 {
    0.3
}
fn default_gene_noise() -> f64 {
    0.3
}

impl SyntheticSpec {
    pub fn new(n_cells: usize, n_genes: usize, n_cell_types: usize, sparsity: f64, seed: u64) -> Self {
        Self {
            n_cells,
            n_genes,
            n_cell_types,
            sparsity,
            rank: default_rank(),
            separation: default_separation(),
            cell_noise: default_cell_noise(),
            gene_noise: default_gene_noise(),
            seed,
        }
    }

    fn validate(&self) -> Result<usize> {
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::Validation(format!(
                "sparsity must lie in (0, 1), got {}",
                self.sparsity
            )));
        }
        if self.n_cell_types == 0 || self.n_cells == 0 || self.rank == 0 {
            return Err(Error::Validation(
                "n_cells, n_cell_types and rank must be positive".into(),
            ));
        }
        let target = ((1.0 - self.sparsity) * self.n_genes as f64).round() as usize;
        if target < 1 {
            return Err(Error::Validation(format!(
                "sparsity {} leaves no non-zero gene out of {}",
                self.sparsity, self.n_genes
            )));
        }
        Ok(target)
    }
}

/// Generates a raw-count matrix and one type label per cell.
///
/// Labels cycle through the types (`cell % n_cell_types`), so every type is
/// represented as evenly as possible.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<(SparseExpressionMatrix, Vec<usize>)> {
    let target_nnz = spec.validate()?;
    let n_genes = spec.n_genes;
    let k = spec.rank;
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let mut global = rng::stream(spec.seed, Stream::Data, u64::MAX);
    let baseline: Vec<f64> = (0..n_genes).map(|_| 0.5 * std.sample(&mut global)).collect();
    let loadings: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n_genes).map(|_| std.sample(&mut global)).collect())
        .collect();
    let centroids: Vec<Vec<f64>> = (0..spec.n_cell_types)
        .map(|_| (0..k).map(|_| spec.separation * std.sample(&mut global)).collect())
        .collect();

    // Spread of the per-cell expressed-gene count around the target.
    let half_width = (target_nnz / 4).min(target_nnz - 1);
    let mut entries = Vec::with_capacity(spec.n_cells * target_nnz);
    let mut labels = Vec::with_capacity(spec.n_cells);
    let mut log_rate = vec![0.0; n_genes];
    for cell in 0..spec.n_cells {
        let mut r = rng::stream(spec.seed, Stream::Data, cell as u64);
        let ty = cell % spec.n_cell_types;
        labels.push(ty);
        let latent: Vec<f64> = centroids[ty]
            .iter()
            .map(|c| c + spec.cell_noise * std.sample(&mut r))
            .collect();
        for (g, lr) in log_rate.iter_mut().enumerate() {
            let mut s = baseline[g] + spec.gene_noise * std.sample(&mut r);
            for (f, l) in latent.iter().enumerate() {
                s += l * loadings[f][g];
            }
            *lr = s;
        }
        let n_nz = if half_width == 0 {
            target_nnz
        } else {
            r.random_range(target_nnz - half_width..=target_nnz + half_width)
        }
        .min(n_genes);

        // Weighted sampling without replacement: keep the n_nz largest keys
        // ln(u) / w with w = exp(log_rate).
        let mut keys: Vec<(f64, usize)> = log_rate
            .iter()
            .enumerate()
            .map(|(g, &s)| {
                let u: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
                (u.ln() * (-s).exp(), g)
            })
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut chosen: Vec<usize> = keys[..n_nz].iter().map(|&(_, g)| g).collect();
        chosen.sort_unstable();

        let depth = (0.3 * std.sample(&mut r)).exp();
        for g in chosen {
            let lambda = 3.0 * depth * log_rate[g].exp().min(50.0);
            let extra = Poisson::new(lambda.max(1e-6))
                .map(|p| p.sample(&mut r))
                .unwrap_or(0.0);
            entries.push(Entry {
                cell,
                gene: g,
                value: 1.0 + extra,
            });
        }
    }
    let m = SparseExpressionMatrix::new(spec.n_cells, n_genes, entries, Stage::RawCounts)?;
    Ok((m, labels))
}
