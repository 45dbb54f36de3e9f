use serde::Serialize;

use crate::data::SparseRow;
use crate::error::Result;
use crate::masking::{mask_cells, MaskConfig};
use crate::model::Model;

/// Pearson correlation; `degenerate` is set (and `r` is NaN) when either
/// side has zero variance or fewer than two points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    pub n: usize,
    pub degenerate: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Correlation {
    let n = x.len().min(y.len());
    let nan = Correlation {
        r: f64::NAN,
        n,
        degenerate: true,
    };
    if n < 2 {
        return nan;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return nan;
    }
    Correlation {
        r: sxy / (sxx * syy).sqrt(),
        n,
        degenerate: false,
    }
}

/// Correlation within one zero-fraction bucket `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketCorrelation {
    pub lo: f64,
    pub hi: f64,
    pub correlation: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub overall: Correlation,
    /// Buckets with at least two masked positions, ascending.
    pub buckets: Vec<BucketCorrelation>,
}

/// Correlation between predictions and truth at masked positions of
/// held-out cells, overall and per zero-fraction decile `[k/10, (k+1)/10)`.
pub fn recovery_correlation(model: &Model, cells: &[SparseRow], mask: &MaskConfig) -> Result<RecoveryReport> {
    let masked = mask_cells(cells, mask, 0)?;
    let pred = model.predict_values_for(&masked)?;
    let mut all = (Vec::new(), Vec::new());
    let mut by_bucket: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); 10];
    for ((cell, m), p) in cells.iter().zip(&masked).zip(&pred) {
        let b = ((cell.zero_fraction() * 10.0).floor() as usize).min(9);
        for s in &m.masked {
            all.0.push(p[s.gene]);
            all.1.push(s.truth);
            by_bucket[b].0.push(p[s.gene]);
            by_bucket[b].1.push(s.truth);
        }
    }
    let buckets = by_bucket
        .iter()
        .enumerate()
        .filter_map(|(k, (p, t))| {
            if p.len() < 2 {
                if !p.is_empty() {
                    log::warn!("zero-fraction bucket {k} has {} masked position(s); skipped", p.len());
                }
                return None;
            }
            Some(BucketCorrelation {
                lo: k as f64 / 10.0,
                hi: (k + 1) as f64 / 10.0,
                correlation: pearson(p, t),
            })
        })
        .collect();
    Ok(RecoveryReport {
        overall: pearson(&all.0, &all.1),
        buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant() {
        let t = [1.0, 2.0, 4.0, 0.0];
        assert!((pearson(&t, &t).r - 1.0).abs() < 1e-12);
        let c = pearson(&[3.0; 4], &t);
        assert!(c.degenerate && c.r.is_nan());
        let neg: Vec<f64> = t.iter().map(|v| -2.0 * v + 1.0).collect();
        assert!((pearson(&neg, &t).r + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0], &[2.0]).degenerate);
    }
}
