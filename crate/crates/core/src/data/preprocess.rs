use super::{CellRecord, Entry, SparseExpressionMatrix, Stage};
use crate::error::{Error, Result};

/// Drops cells expressing fewer than `min_genes` genes.
pub fn quality_filter(m: &SparseExpressionMatrix, min_genes: usize) -> Result<SparseExpressionMatrix> {
    quality_filter_with_index(m, min_genes).map(|(m, _)| m)
}

/// Like [`quality_filter`], also returning the original indices of the kept
/// cells so labels can follow.
pub fn quality_filter_with_index(
    m: &SparseExpressionMatrix,
    min_genes: usize,
) -> Result<(SparseExpressionMatrix, Vec<usize>)> {
    if m.stage() != Stage::RawCounts {
        return Err(Error::Validation(
            "quality_filter expects raw counts".into(),
        ));
    }
    let kept: Vec<usize> = (0..m.n_cells()).filter(|&c| m.nnz(c) >= min_genes).collect();
    if kept.is_empty() {
        return Err(Error::Empty(format!(
            "all {} cells have fewer than {min_genes} expressed genes",
            m.n_cells()
        )));
    }
    Ok((m.select_cells(&kept)?, kept))
}

/// Library-size normalization to `target_sum` followed by `ln(1 + x)`.
/// The sparsity pattern is untouched.
pub fn normalize(m: &SparseExpressionMatrix, target_sum: f64) -> Result<SparseExpressionMatrix> {
    if m.stage() != Stage::RawCounts {
        return Err(Error::Validation("normalize expects raw counts".into()));
    }
    if !(target_sum.is_finite() && target_sum > 0.0) {
        return Err(Error::Validation(format!(
            "target_sum must be positive, got {target_sum}"
        )));
    }
    let mut entries = Vec::with_capacity(m.n_entries());
    for cell in 0..m.n_cells() {
        let row = m.row_entries(cell);
        let library: f64 = row.iter().map(|e| e.value).sum();
        if library <= 0.0 {
            return Err(Error::Validation(format!(
                "cell {cell} has zero library size"
            )));
        }
        let scale = target_sum / library;
        entries.extend(row.iter().map(|e| Entry {
            value: (e.value * scale).ln_1p(),
            ..*e
        }));
    }
    SparseExpressionMatrix::new(m.n_cells(), m.n_genes(), entries, Stage::Normalized)
}

/// Metadata records from raw counts plus optional labels.
pub fn cell_records(
    raw: &SparseExpressionMatrix,
    labels: Option<&[String]>,
) -> Result<Vec<CellRecord>> {
    if raw.stage() != Stage::RawCounts {
        return Err(Error::Validation("library sizes need raw counts".into()));
    }
    if let Some(l) = labels {
        if l.len() != raw.n_cells() {
            return Err(Error::Shape(format!(
                "{} labels for {} cells",
                l.len(),
                raw.n_cells()
            )));
        }
    }
    Ok((0..raw.n_cells())
        .map(|c| CellRecord {
            cell_id: format!("cell{c}"),
            label: labels.map(|l| l[c].clone()),
            library_size: raw.row_entries(c).iter().map(|e| e.value).sum(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rows: &[Vec<f64>]) -> SparseExpressionMatrix {
        SparseExpressionMatrix::from_dense(rows, Stage::RawCounts).unwrap()
    }

    fn with_nnz(counts: &[usize], n_genes: usize) -> SparseExpressionMatrix {
        let rows: Vec<Vec<f64>> = counts
            .iter()
            .map(|&k| (0..n_genes).map(|g| if g < k { 1.0 } else { 0.0 }).collect())
            .collect();
        raw(&rows)
    }

    #[test]
    fn filter_drops_sparse_cells() {
        let m = with_nnz(&[250, 199, 201], 300);
        let (f, kept) = quality_filter_with_index(&m, 200).unwrap();
        assert_eq!(f.n_cells(), 2);
        assert_eq!(kept, vec![0, 2]);

        let m = with_nnz(&[150], 300);
        assert!(matches!(quality_filter(&m, 200), Err(Error::Empty(_))));
    }

    #[test]
    fn filter_min_zero_is_identity_and_idempotent() {
        let m = with_nnz(&[3, 0, 7], 10);
        assert_eq!(quality_filter(&m, 0).unwrap(), m);
        let once = quality_filter(&m, 3).unwrap();
        assert_eq!(quality_filter(&once, 3).unwrap(), once);
    }

    #[test]
    fn normalize_small_cell() {
        let m = raw(&[vec![1.0, 0.0, 3.0]]);
        let n = normalize(&m, 10_000.0).unwrap();
        let r = n.row(0);
        assert_eq!(r.genes, vec![0, 2]);
        assert!((r.values[0] - 2501f64.ln()).abs() < 1e-12);
        assert!((r.values[1] - 7501f64.ln()).abs() < 1e-12);
        assert!((r.values[0] - 7.8245).abs() < 1e-4);
        assert!((r.values[1] - 8.9228).abs() < 1e-4);
        assert_eq!(n.stage(), Stage::Normalized);
    }

    #[test]
    fn normalize_equal_counts_equal_values() {
        let n = normalize(&raw(&[vec![5.0, 5.0]]), 10_000.0).unwrap();
        let r = n.row(0);
        assert_eq!(r.values[0], r.values[1]);
    }

    #[test]
    fn normalize_rejects_empty_cell_and_normalized_input() {
        let m = raw(&[vec![0.0, 0.0], vec![1.0, 2.0]]);
        assert!(normalize(&m, 1e4).is_err());
        let n = normalize(&raw(&[vec![1.0, 2.0]]), 1e4).unwrap();
        assert!(normalize(&n, 1e4).is_err());
    }

    #[test]
    fn records_carry_library_size() {
        let m = raw(&[vec![1.0, 0.0, 3.0], vec![2.0, 2.0, 0.0]]);
        let labels = vec!["a".to_string(), "b".to_string()];
        let rec = cell_records(&m, Some(&labels)).unwrap();
        assert_eq!(rec[0].library_size, 4.0);
        assert_eq!(rec[1].label.as_deref(), Some("b"));
    }
}
