use ndarray::{Array2, ArrayView1};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const MAX_ITERS: usize = 300;
/// Independent k-means++ restarts; the lowest-inertia run wins.
pub const N_RESTARTS: usize = 10;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hard k-means with k-means++ seeding over the rows of `x`.
///
/// Deterministic given `seed`. Ties in assignment go to the lower cluster
/// index. A cluster that empties out is reseeded at the point farthest from
/// its centroid.
pub fn cluster_cells(x: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = x.nrows();
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::Validation(format!("{n} points cannot form {k} clusters")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "embeddings", layer: 0 });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..N_RESTARTS {
        let (inertia, assign) = lloyd(x, k, seed, restart as u64);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn plus_plus(x: &Array2<f64>, k: usize, r: &mut crate::rng::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(r.random_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|p| sq_dist(p, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = r.random_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    t -= d;
                    t < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            r.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, p) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(c)));
        }
    }
    centers
}

fn lloyd(x: &Array2<f64>, k: usize, seed: u64, restart: u64) -> (f64, Vec<usize>) {
    let mut r = rng::stream(seed, Stream::Kmeans, restart);
    let mut centers = plus_plus(x, k, &mut r);
    let mut assign = vec![usize::MAX; x.nrows()];
    let mut inertia = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        inertia = 0.0;
        for (i, p) in x.rows().into_iter().enumerate() {
            let (c, d) = (0..k)
                .map(|c| (c, sq_dist(p, centers.row(c))))
                .fold((0, f64::INFINITY), |b, cur| if cur.1 < b.1 { cur } else { b });
            inertia += d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, p) in x.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &p);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                let far = x
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, centers.row(assign[i]))))
                    .fold((0, -1.0), |b, cur| if cur.1 > b.1 { cur } else { b })
                    .0;
                centers.row_mut(c).assign(&x.row(far));
            }
        }
    }
    (inertia, assign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::adjusted_rand_index;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = rng::stream(seed, Stream::Data, 0);
        let mut x = Array2::zeros((centers.len() * per, 2));
        let mut labels = Vec::new();
        for (c, m) in centers.iter().enumerate() {
            for i in 0..per {
                for j in 0..2 {
                    let e: f64 = StandardNormal.sample(&mut r);
                    x[[c * per + i, j]] = m[j] + sigma * e;
                }
                labels.push(c);
            }
        }
        (x, labels)
    }

    #[test]
    fn separable_clouds() {
        let (x, y) = blobs(&[[0.0, 0.0], [50.0, 50.0]], 20, 1.0, 1);
        let a = cluster_cells(&x, 2, 0).unwrap();
        assert_eq!(adjusted_rand_index(&a, &y).unwrap().value, 1.0);
    }

    #[test]
    fn three_blobs_ten_sigma() {
        for seed in 0..5 {
            let (x, y) = blobs(&[[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]], 40, 1.0, seed);
            let a = cluster_cells(&x, 3, seed).unwrap();
            let ari = adjusted_rand_index(&a, &y).unwrap().value;
            assert!(ari > 0.95, "seed {seed}: {ari}");
        }
    }

    #[test]
    fn deterministic_and_guarded() {
        let (x, _) = blobs(&[[0.0, 0.0], [3.0, 0.0]], 15, 1.0, 2);
        assert_eq!(cluster_cells(&x, 2, 9).unwrap(), cluster_cells(&x, 2, 9).unwrap());
        assert!(cluster_cells(&x, 31, 0).is_err());
        assert!(cluster_cells(&x, 1, 0).is_err());
        let same = Array2::from_elem((5, 2), 1.0);
        assert_eq!(cluster_cells(&same, 2, 0).unwrap().len(), 5);
    }
}
