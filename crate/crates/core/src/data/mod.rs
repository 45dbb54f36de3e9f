//! Sparse expression matrices: ingestion, quality control, normalization
//! and synthetic generation.

mod io;
mod preprocess;
mod synth;

pub use io::{
    load_dense_csv, load_labels, load_matrix, parse_matrix, save_labels, save_matrix,
    write_matrix,
};
pub use preprocess::{cell_records, normalize, quality_filter, quality_filter_with_index};
pub use synth::{synthesize_dataset, SyntheticSpec};

use crate::error::{Error, Result};

/// Size of the human reference gene list used upstream. Tests and examples
/// run with much smaller gene counts.
pub const REFERENCE_GENE_COUNT: usize = 19_264;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RawCounts,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub cell: usize,
    pub gene: usize,
    pub value: f64,
}

/// Cells x genes matrix in coordinate form. Zeros are implicit; entries are
/// kept sorted by `(cell, gene)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExpressionMatrix {
    n_cells: usize,
    n_genes: usize,
    entries: Vec<Entry>,
    offsets: Vec<usize>,
    stage: Stage,
}

/// One cell's non-zero genes in ascending gene order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRow {
    pub n_genes: usize,
    pub genes: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn new(n_genes: usize, genes: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            n_genes,
            genes,
            values,
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        let (genes, vals) = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(g, v)| (g, *v))
            .unzip();
        Self::new(values.len(), genes, vals)
    }

    pub fn nnz(&self) -> usize {
        self.genes.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_genes];
        for (&g, &v) in self.genes.iter().zip(&self.values) {
            out[g] = v;
        }
        out
    }

    pub fn zero_fraction(&self) -> f64 {
        1.0 - self.nnz() as f64 / self.n_genes as f64
    }
}

impl SparseExpressionMatrix {
    /// Builds a matrix from unsorted triplets, enforcing every invariant.
    pub fn new(
        n_cells: usize,
        n_genes: usize,
        mut entries: Vec<Entry>,
        stage: Stage,
    ) -> Result<Self> {
        for e in &entries {
            if e.cell >= n_cells {
                return Err(Error::OutOfRange {
                    what: "cell",
                    index: e.cell,
                    limit: n_cells,
                });
            }
            if e.gene >= n_genes {
                return Err(Error::OutOfRange {
                    what: "gene",
                    index: e.gene,
                    limit: n_genes,
                });
            }
            if !e.value.is_finite() || e.value <= 0.0 {
                return Err(Error::Validation(format!(
                    "stored value {} at ({}, {}) must be finite and strictly positive",
                    e.value, e.cell, e.gene
                )));
            }
            if stage == Stage::RawCounts && e.value.fract() != 0.0 {
                return Err(Error::Validation(format!(
                    "raw count {} at ({}, {}) is not an integer",
                    e.value, e.cell, e.gene
                )));
            }
        }
        entries.sort_by_key(|e| (e.cell, e.gene));
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].cell == w[1].cell && w[0].gene == w[1].gene)
        {
            return Err(Error::DuplicateEntry {
                cell: w[0].cell,
                gene: w[0].gene,
            });
        }
        let mut offsets = vec![0usize; n_cells + 1];
        for e in &entries {
            offsets[e.cell + 1] += 1;
        }
        for i in 0..n_cells {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self {
            n_cells,
            n_genes,
            entries,
            offsets,
            stage,
        })
    }

    /// Dense rows (cells) to coordinate form; exact zeros are dropped.
    pub fn from_dense(rows: &[Vec<f64>], stage: Stage) -> Result<Self> {
        let n_genes = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::new();
        for (cell, row) in rows.iter().enumerate() {
            if row.len() != n_genes {
                return Err(Error::Shape(format!(
                    "row {cell} has {} columns, expected {n_genes}",
                    row.len()
                )));
            }
            for (gene, &value) in row.iter().enumerate() {
                if value != 0.0 {
                    entries.push(Entry { cell, gene, value });
                }
            }
        }
        Self::new(rows.len(), n_genes, entries, stage)
    }

    pub fn from_rows(n_genes: usize, rows: &[SparseRow], stage: Stage) -> Result<Self> {
        let entries = rows
            .iter()
            .enumerate()
            .flat_map(|(cell, r)| {
                r.genes
                    .iter()
                    .zip(&r.values)
                    .map(move |(&gene, &value)| Entry { cell, gene, value })
            })
            .collect();
        Self::new(rows.len(), n_genes, entries, stage)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn row_entries(&self, cell: usize) -> &[Entry] {
        &self.entries[self.offsets[cell]..self.offsets[cell + 1]]
    }

    pub fn row(&self, cell: usize) -> SparseRow {
        let (genes, values) = self
            .row_entries(cell)
            .iter()
            .map(|e| (e.gene, e.value))
            .unzip();
        SparseRow::new(self.n_genes, genes, values)
    }

    pub fn rows(&self) -> Vec<SparseRow> {
        (0..self.n_cells).map(|c| self.row(c)).collect()
    }

    pub fn nnz(&self, cell: usize) -> usize {
        self.offsets[cell + 1] - self.offsets[cell]
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_cells).map(|c| self.row(c).to_dense()).collect()
    }

    /// Keeps the listed cells (in the given order), re-indexing them densely.
    pub fn select_cells(&self, cells: &[usize]) -> Result<Self> {
        let rows: Vec<SparseRow> = cells
            .iter()
            .map(|&c| {
                if c >= self.n_cells {
                    Err(Error::OutOfRange {
                        what: "cell",
                        index: c,
                        limit: self.n_cells,
                    })
                } else {
                    Ok(self.row(c))
                }
            })
            .collect::<Result<_>>()?;
        Self::from_rows(self.n_genes, &rows, self.stage)
    }
}

/// Per-cell metadata carried alongside the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    pub label: Option<String>,
    pub library_size: f64,
}
