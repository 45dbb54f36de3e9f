//! Exact softmax attention against its positive random-feature
//! approximation as the feature count grows.
//!
//! `cargo run --release --example linear_attention -- [scale]`

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use scmae::graph::Graph;
use scmae::model::layers::{draw_features, exact_attention, linear_attention};
use scmae::rng::{stream, Stream};

fn main() {
    // standard deviation of query and key entries; freshly initialized
    // blocks produce about 0.3
    let scale: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let (n, d) = (64, 32);
    let mut r = stream(0, Stream::Data, 0);
    let mut draw = |s: f64| {
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(&mut r);
            s * z
        })
    };
    let (q, k, v) = (draw(scale), draw(scale), draw(1.0));
    println!("n = {n}, d = {d}, query/key std {scale}");
    for features in [16, 64, 256, 1024, 4096] {
        for orthogonal in [false, true] {
            let gaps: Vec<f64> = (0..5)
                .map(|s| {
                    let mut g = Graph::new();
                    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
                    let exact = exact_attention(&mut g, qv, kv, vv);
                    let w = draw_features(features, d, orthogonal, &mut stream(s, Stream::Features, features as u64));
                    let approx = linear_attention(&mut g, qv, kv, vv, &w);
                    (g.value(exact) - g.value(approx)).iter().fold(0.0f64, |m, x| m.max(x.abs()))
                })
                .collect();
            println!(
                "r = {features:>4} {}: mean max-abs gap {:.4}",
                if orthogonal { "orthogonal" } else { "iid       " },
                gaps.iter().sum::<f64>() / gaps.len() as f64
            );
        }
    }
}
