use std::collections::BTreeMap;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// A metric value; `degenerate` marks inputs where the metric is undefined
/// and `value` holds the conventional fallback (or NaN for silhouette).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ok(value: f64) -> Self {
        Self { value, degenerate: false }
    }
    fn flagged(value: f64) -> Self {
        Self { value, degenerate: true }
    }
}

/// Counts of (true class, cluster) pairs plus the two marginals.
#[derive(Debug, Clone)]
pub struct Contingency {
    pub n: usize,
    pub table: Vec<Vec<usize>>,
    pub class_sizes: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
}

impl Contingency {
    pub fn new(assignments: &[usize], labels: &[usize]) -> Result<Self> {
        if assignments.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} assignments for {} labels",
                assignments.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Empty("no points to score".into()));
        }
        let index = |xs: &[usize]| -> (Vec<usize>, usize) {
            let ids: BTreeMap<usize, usize> = xs
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, x)| (x, i))
                .collect();
            (xs.iter().map(|x| ids[x]).collect(), ids.len())
        };
        let (cls, n_cls) = index(labels);
        let (clu, n_clu) = index(assignments);
        let mut table = vec![vec![0usize; n_clu]; n_cls];
        for (&a, &b) in cls.iter().zip(&clu) {
            table[a][b] += 1;
        }
        let class_sizes = table.iter().map(|r| r.iter().sum()).collect();
        let cluster_sizes = (0..n_clu).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            n: labels.len(),
            table,
            class_sizes,
            cluster_sizes,
        })
    }
}

fn pairs(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

fn entropy(sizes: &[usize], n: usize) -> f64 {
    let n = n as f64;
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.class_sizes[i] as f64 * c.cluster_sizes[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Permutation-adjusted Rand index. Undefined when both partitions are
/// trivial in the same way; then 1.0 is reported with the flag set.
pub fn adjusted_rand_index(assignments: &[usize], labels: &[usize]) -> Result<Score> {
    let c = Contingency::new(assignments, labels)?;
    let index: f64 = c.table.iter().flatten().map(|&x| pairs(x)).sum();
    let a: f64 = c.class_sizes.iter().map(|&x| pairs(x)).sum();
    let b: f64 = c.cluster_sizes.iter().map(|&x| pairs(x)).sum();
    let total = pairs(c.n);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let max = 0.5 * (a + b);
    if (max - expected).abs() < f64::EPSILON * max.max(1.0) {
        return Ok(Score::flagged(1.0));
    }
    Ok(Score::ok((index - expected) / (max - expected)))
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn normalized_mutual_information(assignments: &[usize], labels: &[usize]) -> Result<Score> {
    let c = Contingency::new(assignments, labels)?;
    let hc = entropy(&c.class_sizes, c.n);
    let hk = entropy(&c.cluster_sizes, c.n);
    if hc == 0.0 && hk == 0.0 {
        return Ok(Score::flagged(1.0));
    }
    if hc == 0.0 || hk == 0.0 {
        return Ok(Score::flagged(0.0));
    }
    Ok(Score::ok((mutual_information(&c) / (0.5 * (hc + hk))).clamp(0.0, 1.0)))
}

/// `(homogeneity, completeness)`: `1 - H(class | cluster) / H(class)` and
/// `1 - H(cluster | class) / H(cluster)`. A zero-entropy side makes its
/// score 1 by convention, flagged.
pub fn homogeneity_completeness(assignments: &[usize], labels: &[usize]) -> Result<(Score, Score)> {
    let c = Contingency::new(assignments, labels)?;
    let hc = entropy(&c.class_sizes, c.n);
    let hk = entropy(&c.cluster_sizes, c.n);
    let mi = mutual_information(&c);
    let part = |h: f64| {
        if h == 0.0 {
            Score::flagged(1.0)
        } else {
            // H(X | Y) = H(X) - I(X; Y)
            Score::ok((mi / h).clamp(0.0, 1.0))
        }
    };
    Ok((part(hc), part(hk)))
}

/// Mean Euclidean silhouette. Undefined (NaN, flagged) with fewer than two
/// clusters, as many clusters as points, or all points coincident.
/// Points alone in their cluster score 0.
pub fn silhouette(x: &Array2<f64>, assignments: &[usize]) -> Result<Score> {
    let n = x.nrows();
    if assignments.len() != n {
        return Err(Error::Shape(format!("{} assignments for {n} points", assignments.len())));
    }
    let ids: std::collections::BTreeSet<usize> = assignments.iter().copied().collect();
    if ids.len() < 2 || ids.len() >= n {
        return Ok(Score::flagged(f64::NAN));
    }
    let k = ids.len();
    let dense: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let assignments: Vec<usize> = assignments.iter().map(|a| dense[a]).collect();
    let mut dist = Array2::<f64>::zeros((n, n));
    let mut any = false;
    for i in 0..n {
        for j in 0..i {
            let d = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            any |= d > 0.0;
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    if !any {
        return Ok(Score::flagged(f64::NAN));
    }
    let mut sizes = vec![0usize; k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            sums[assignments[j]] += dist[[i, j]];
        }
        let own = assignments[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(Score::ok(total / n as f64))
}

/// The five clustering scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterMetrics {
    pub ari: Score,
    pub nmi: Score,
    pub homo: Score,
    pub cp: Score,
    pub sil: Score,
}

pub fn clustering_metrics(assignments: &[usize], labels: &[usize], embeddings: &Array2<f64>) -> Result<ClusterMetrics> {
    let (homo, cp) = homogeneity_completeness(assignments, labels)?;
    Ok(ClusterMetrics {
        ari: adjusted_rand_index(assignments, labels)?,
        nmi: normalized_mutual_information(assignments, labels)?,
        homo,
        cp,
        sil: silhouette(embeddings, assignments)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::seq::SliceRandom;

    #[test]
    fn identical_partitions() {
        let y = [0, 0, 1, 1, 2, 2, 2];
        let relabeled = [5, 5, 3, 3, 9, 9, 9];
        assert!((adjusted_rand_index(&relabeled, &y).unwrap().value - 1.0).abs() < 1e-12);
        assert!((normalized_mutual_information(&relabeled, &y).unwrap().value - 1.0).abs() < 1e-12);
        let (h, c) = homogeneity_completeness(&relabeled, &y).unwrap();
        assert!((h.value - 1.0).abs() < 1e-12 && (c.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_merged_cluster() {
        let y = [0, 0, 1, 1];
        let (h, c) = homogeneity_completeness(&[0; 4], &y).unwrap();
        assert_eq!(h.value, 0.0);
        assert!(c.degenerate && c.value == 1.0);
        assert_eq!(adjusted_rand_index(&[0; 4], &y).unwrap().value, 0.0);
    }

    #[test]
    fn random_assignments_have_near_zero_ari() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 5).collect();
        let mut r = crate::rng::stream(0, crate::rng::Stream::Data, 0);
        let mean: f64 = (0..100)
            .map(|_| {
                let mut a = labels.clone();
                a.shuffle(&mut r);
                adjusted_rand_index(&a, &labels).unwrap().value
            })
            .sum::<f64>()
            / 100.0;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn silhouette_of_two_tight_pairs() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let s = silhouette(&x, &[0, 0, 1, 1]).unwrap();
        // every point: a = 1, b = (10 + sqrt(101)) / 2
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s.value - (b - 1.0) / b).abs() < 1e-12);
        assert!(silhouette(&Array2::zeros((4, 2)), &[0, 0, 1, 1]).unwrap().degenerate);
        assert!(silhouette(&x, &[0, 0, 0, 0]).unwrap().degenerate);
    }

    #[test]
    fn silhouette_is_rotation_invariant() {
        let x = array![[0.0, 0.0], [1.0, 2.0], [5.0, 1.0], [6.0, 3.0], [2.0, 7.0]];
        let (c, s) = (0.6f64, 0.8f64);
        let rot = array![[c, -s], [s, c]];
        let a = [0, 0, 1, 1, 0];
        let s1 = silhouette(&x, &a).unwrap().value;
        let s2 = silhouette(&x.dot(&rot), &a).unwrap().value;
        assert!((s1 - s2).abs() < 1e-12);
    }
}
