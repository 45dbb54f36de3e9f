//! Pre-norm transformer blocks on the autodiff graph.

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

/// Registers one block's tensors under `prefix`.
pub(crate) fn init_block(p: &mut ParamStore, prefix: &str, dim: usize, ffn_mult: usize, rng: &mut Rng) {
    let hidden = dim * ffn_mult;
    let s = 1.0 / (dim as f64).sqrt();
    for ln in ["ln1", "ln2"] {
        p.insert(format!("{prefix}{ln}.g"), Array2::ones((1, dim)));
        p.insert(format!("{prefix}{ln}.b"), Array2::zeros((1, dim)));
    }
    // Small query/key weights keep initial attention logits near zero.
    for w in ["wq", "wk"] {
        p.insert_normal(format!("{prefix}{w}"), (dim, dim), 0.3 * s, rng);
    }
    p.insert_normal(format!("{prefix}wv"), (dim, dim), s, rng);
    p.insert_normal(format!("{prefix}wo"), (dim, dim), 0.5 * s, rng);
    for b in ["bq", "bk", "bv", "bo"] {
        p.insert(format!("{prefix}{b}"), Array2::zeros((1, dim)));
    }
    p.insert_normal(format!("{prefix}ff1.w"), (dim, hidden), s, rng);
    p.insert(format!("{prefix}ff1.b"), Array2::zeros((1, hidden)));
    p.insert_normal(format!("{prefix}ff2.w"), (hidden, dim), 0.5 / (hidden as f64).sqrt(), rng);
    p.insert(format!("{prefix}ff2.b"), Array2::zeros((1, dim)));
}

/// Attention kernel for one block.
#[derive(Debug, Clone, Copy)]
pub enum Attention<'a> {
    Exact,
    /// Random feature matrix `[r, head_dim]` shared by all heads.
    Linear(&'a Array2<f64>),
}

fn affine(g: &mut Graph, p: &Bound, x: Var, w: &str, b: &str) -> Var {
    let y = g.matmul(x, p.var(w));
    g.add_row(y, p.var(b))
}

/// `x + attn(ln1(x))`, then `+ ffn(ln2(.))`. Rows of `x` are tokens; the
/// caller passes only real tokens, so nothing here needs a pad mask.
pub(crate) fn block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize, attn: Attention<'_>) -> Var {
    let n = |s: &str| format!("{prefix}{s}");
    let h = g.layer_norm(x, p.var(&n("ln1.g")), p.var(&n("ln1.b")), LN_EPS);
    let q = affine(g, p, h, &n("wq"), &n("bq"));
    let k = affine(g, p, h, &n("wk"), &n("bk"));
    let v = affine(g, p, h, &n("wv"), &n("bv"));
    let dim = g.shape(x).1;
    let dh = dim / heads;
    let outs: Vec<Var> = (0..heads)
        .map(|i| {
            let qh = g.slice_cols(q, i * dh, dh);
            let kh = g.slice_cols(k, i * dh, dh);
            let vh = g.slice_cols(v, i * dh, dh);
            match attn {
                Attention::Exact => exact_attention(g, qh, kh, vh),
                Attention::Linear(features) => linear_attention(g, qh, kh, vh, features),
            }
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let a = affine(g, p, cat, &n("wo"), &n("bo"));
    let x1 = g.add(x, a);
    let h2 = g.layer_norm(x1, p.var(&n("ln2.g")), p.var(&n("ln2.b")), LN_EPS);
    let f = affine(g, p, h2, &n("ff1.w"), &n("ff1.b"));
    let f = g.gelu(f);
    let f = affine(g, p, f, &n("ff2.w"), &n("ff2.b"));
    g.add(x1, f)
}

/// `softmax(q k^T / sqrt(d)) v`.
pub fn exact_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Var {
    let d = g.shape(q).1 as f64;
    let s = g.matmul_nt(q, k);
    let s = g.scale(s, 1.0 / d.sqrt());
    let a = g.softmax_rows(s);
    g.matmul(a, v)
}

/// Positive random-feature attention:
/// `phi(x) = exp(W x - |x|^2 / 2) / sqrt(r)` on inputs scaled by `d^-1/4`,
/// then `phi(q) (phi(k)^T v)` normalized by `phi(q) phi(k)^T 1`.
///
/// Per-row shifts of the query exponent and a global shift of the key
/// exponent cancel in the normalization (as does `1 / sqrt(r)`), so they are
/// applied as constants for numerical range only.
pub fn linear_attention(g: &mut Graph, q: Var, k: Var, v: Var, features: &Array2<f64>) -> Var {
    let d = g.shape(q).1 as f64;
    let w = g.constant(features.clone());
    let phi = |g: &mut Graph, x: Var, per_row: bool| {
        let xs = g.scale(x, d.powf(-0.25));
        let proj = g.matmul_nt(xs, w);
        let sq = g.row_sum_sq(xs);
        let half = g.scale(sq, -0.5);
        let logits = g.add_col(proj, half);
        let lv = g.value(logits);
        let shift = if per_row {
            lv.map_axis(Axis(1), |r| -r.fold(f64::NEG_INFINITY, |m, &a| m.max(a)))
                .insert_axis(Axis(1))
        } else {
            let m = lv.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            Array2::from_elem((lv.nrows(), 1), -m)
        };
        let shift = g.constant(shift);
        let shifted = g.add_col(logits, shift);
        g.exp(shifted)
    };
    let fq = phi(g, q, true);
    let fk = phi(g, k, false);
    let kv = g.matmul_tn(fk, v);
    let num = g.matmul(fq, kv);
    let ksum = g.col_sum(fk);
    let den = g.matmul_nt(fq, ksum);
    let inv = g.recip(den);
    g.mul_col(num, inv)
}

/// `[r, d]` Gaussian feature matrix. With `orthogonal`, rows come in blocks
/// of `d` mutually orthogonal directions whose norms are redrawn from the
/// Gaussian norm distribution, which keeps the estimator unbiased.
pub fn draw_features(r: usize, d: usize, orthogonal: bool, rng: &mut Rng) -> Array2<f64> {
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    if !orthogonal {
        return Array2::from_shape_vec((r, d), gauss(r * d)).expect("feature shape");
    }
    let mut out = Array2::zeros((r, d));
    let mut row = 0;
    while row < r {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        while basis.len() < d {
            let mut v = gauss(d);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                basis.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        for b in basis.into_iter().take(r - row) {
            let scale = gauss(d).iter().map(|a| a * a).sum::<f64>().sqrt();
            for (j, x) in b.into_iter().enumerate() {
                out[[row, j]] = x * scale;
            }
            row += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn rand_mat(n: usize, d: usize, seed: u64, scale: f64) -> Array2<f64> {
        let mut r = stream(seed, Stream::Init, 0);
        let mut p = ParamStore::new();
        p.insert_normal("x", (n, d), scale, &mut r);
        p.get("x").unwrap().clone()
    }

    #[test]
    fn linear_attention_approximates_softmax() {
        let (n, d) = (16, 8);
        let q = rand_mat(n, d, 1, 0.5);
        let k = rand_mat(n, d, 2, 0.5);
        let v = rand_mat(n, d, 3, 1.0);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let exact = exact_attention(&mut g, qv, kv, vv);
        let feats = draw_features(16384, d, false, &mut stream(4, Stream::Features, 0));
        let approx = linear_attention(&mut g, qv, kv, vv, &feats);
        let gap = (g.value(exact) - g.value(approx)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gap < 0.05, "gap {gap}");
    }

    #[test]
    fn orthogonal_blocks_are_orthogonal() {
        let f = draw_features(10, 4, true, &mut stream(0, Stream::Features, 0));
        for i in 0..4 {
            for j in 0..i {
                let dot = f.row(i).dot(&f.row(j));
                assert!(dot.abs() < 1e-10);
            }
        }
        assert_eq!(f.dim(), (10, 4));
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(rand_mat(1, 4, 1, 1.0));
        let k = g.constant(rand_mat(1, 4, 2, 1.0));
        let vm = rand_mat(1, 4, 3, 1.0);
        let v = g.constant(vm.clone());
        let out = exact_attention(&mut g, q, k, v);
        assert!(g.value(out).iter().zip(&vm).all(|(a, b)| (a - b).abs() < 1e-12));
        let feats = draw_features(8, 4, false, &mut stream(0, Stream::Features, 0));
        let out = linear_attention(&mut g, q, k, v, &feats);
        assert!(g.value(out).iter().zip(&vm).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
