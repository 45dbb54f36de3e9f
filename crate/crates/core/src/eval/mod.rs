//! Clustering of pooled cell embeddings and the ablation table.
//!
//! Clustering is k-means at the known number of cell types rather than a
//! resolution-tuned graph clustering; both target the same cluster count.

mod kmeans;
mod metrics;

pub use kmeans::{cluster_cells, N_RESTARTS};
pub use metrics::{
    adjusted_rand_index, clustering_metrics, homogeneity_completeness, normalized_mutual_information, silhouette,
    ClusterMetrics, Contingency, Score,
};

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::SparseRow;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    pub k: usize,
    pub metrics: ClusterMetrics,
}

/// k-means at the number of distinct labels, then the five scores.
pub fn evaluate_embeddings(embeddings: &Array2<f64>, labels: &[usize], seed: u64) -> Result<ClusteringResult> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let k = labels.iter().collect::<BTreeSet<_>>().len();
    let assignments = cluster_cells(embeddings, k, seed)?;
    let metrics = clustering_metrics(&assignments, labels, embeddings)?;
    Ok(ClusteringResult { assignments, k, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub result: ClusteringResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: &str) -> Option<&ClusterMetrics> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| &r.result.metrics)
    }

    /// `variant,ARI,NMI,HOMO,CP,SIL`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["variant", "ARI", "NMI", "HOMO", "CP", "SIL"])?;
        for r in &self.rows {
            let m = &r.result.metrics;
            let mut rec = vec![r.variant.clone()];
            rec.extend([m.ari, m.nmi, m.homo, m.cp, m.sil].iter().map(|s| format!("{:.6}", s.value)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn to_text(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.result.k);
        let mut out = format!("# k-means, k = {k} labelled types (fixed-k stand-in for resolution-tuned graph clustering)\n");
        out += &format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "ARI", "NMI", "HOMO", "CP", "SIL"
        );
        for r in &self.rows {
            let m = &r.result.metrics;
            out.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                r.variant, m.ari.value, m.nmi.value, m.homo.value, m.cp.value, m.sil.value
            ));
        }
        out
    }
}

/// Pooled embeddings of `cells` under each model, clustered and scored
/// against `labels`. Every model must accept the dataset's gene count.
pub fn ablation_harness(
    variants: &[(String, &Model)],
    cells: &[SparseRow],
    labels: &[usize],
    seed: u64,
) -> Result<AblationTable> {
    let n_genes = cells.first().map(|c| c.n_genes).ok_or_else(|| Error::Empty("no cells".into()))?;
    for (name, m) in variants {
        if m.config.n_genes != n_genes {
            return Err(Error::Shape(format!(
                "variant `{name}` expects {} genes, dataset has {n_genes}",
                m.config.n_genes
            )));
        }
    }
    let embedded: Vec<(String, Array2<f64>)> = variants
        .iter()
        .map(|(name, m)| Ok((name.clone(), m.embed_cells(cells)?)))
        .collect::<Result<_>>()?;
    ablation_from_embeddings(&embedded, labels, seed)
}

/// Same table from precomputed embeddings.
pub fn ablation_from_embeddings(variants: &[(String, Array2<f64>)], labels: &[usize], seed: u64) -> Result<AblationTable> {
    let rows = variants
        .par_iter()
        .map(|(name, emb)| {
            Ok(AblationRow {
                variant: name.clone(),
                result: evaluate_embeddings(emb, labels, seed)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockSpec, ModelConfig};

    #[test]
    fn same_model_twice_gives_identical_rows() {
        let mut c = ModelConfig::new(BlockSpec::new(1, 2, 8), BlockSpec::new(1, 2, 8), 6);
        c.bins = 5;
        let m = Model::new(c).unwrap();
        let cells: Vec<SparseRow> = (0..8)
            .map(|i| SparseRow::from_dense(&[1.0 + i as f64, 0.0, (i % 3) as f64, 0.5, 0.0, 2.0]))
            .collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let t = ablation_harness(&[("a".into(), &m), ("b".into(), &m)], &cells, &labels, 0).unwrap();
        assert_eq!(t.rows[0].result, t.rows[1].result);
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("variant,ARI,NMI,HOMO,CP,SIL\n"));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let emb = Array2::zeros((4, 2));
        assert!(evaluate_embeddings(&emb, &[0, 1, 0], 0).is_err());
        let c = ModelConfig::new(BlockSpec::new(1, 2, 8), BlockSpec::new(1, 2, 8), 6);
        let m = Model::new(c).unwrap();
        let cells = vec![SparseRow::from_dense(&[1.0, 2.0, 0.0])];
        assert!(ablation_harness(&[("a".into(), &m)], &cells, &[0], 0).is_err());
    }
}
