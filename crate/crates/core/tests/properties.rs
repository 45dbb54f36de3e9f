use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use scmae::data::{parse_matrix, write_matrix, SparseExpressionMatrix, SparseRow, Stage};
use scmae::embedding::AutoDiscretizer;
use scmae::eval::{adjusted_rand_index, homogeneity_completeness, normalized_mutual_information, silhouette};
use scmae::flops::round_sig;
use scmae::masking::{apply_mask, build_mask_plan, mask_cells, MaskConfig};
use scmae::packing::{bucket_batches, filter_and_pack, unpack_scatter, SlotSource};
use scmae::rng::{self, Stream};
use scmae::training::{pearson, split_indices};

/// A cell over `n_genes` genes with a random non-empty expressed subset.
fn cell() -> impl Strategy<Value = SparseRow> {
    (20usize..300).prop_flat_map(|n| {
        proptest::collection::btree_map(0..n, 0.1f64..8.0, 1..n.min(80)).prop_map(move |m| {
            let (genes, values) = m.into_iter().unzip();
            SparseRow::new(n, genes, values)
        })
    })
}

fn cells_same_width() -> impl Strategy<Value = Vec<SparseRow>> {
    (20usize..120).prop_flat_map(|n| {
        proptest::collection::vec(
            proptest::collection::btree_map(0..n, 0.1f64..8.0, 4..n / 2).prop_map(move |m| {
                let (genes, values) = m.into_iter().unzip();
                SparseRow::new(n, genes, values)
            }),
            1..12,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mask_counts_follow_rounding(c in cell(), ratio in 0.05f64..0.9, seed in 0u64..1000) {
        let cfg = MaskConfig::with_ratio(ratio, seed);
        let n_nz = c.nnz();
        let n_z = c.n_genes - n_nz;
        let want_nz = (ratio * n_nz as f64).round() as usize;
        let want_z = (ratio / 10.0 * n_z as f64).round() as usize;
        match build_mask_plan(&c, &cfg, 0) {
            Ok(plan) => {
                prop_assert_eq!(plan.masked_nonzero.len(), want_nz);
                prop_assert_eq!(plan.masked_zero.len(), want_z);
                let expressed: BTreeSet<usize> = c.genes.iter().copied().collect();
                prop_assert!(plan.masked_nonzero.iter().all(|g| expressed.contains(g)));
                prop_assert!(plan.masked_zero.iter().all(|g| !expressed.contains(g) && *g < c.n_genes));
                let keys: BTreeSet<usize> = plan.replacement.keys().copied().collect();
                let all: BTreeSet<usize> = plan.masked_nonzero.iter().chain(&plan.masked_zero).copied().collect();
                prop_assert_eq!(keys, all);
            }
            Err(_) => prop_assert!(want_nz == 0 && want_z == 0),
        }
    }

    #[test]
    fn pack_unpack_restores_survivors(cells in cells_same_width(), seed in 0u64..1000) {
        let masked = mask_cells(&cells, &MaskConfig::with_ratio(0.3, seed), 0).unwrap();
        let batch = filter_and_pack(&masked).unwrap();
        let (b, m) = (batch.batch_size(), batch.m());
        // each slot carries (gene index, value)
        let mut enc = Array3::<f64>::zeros((b, m, 2));
        for i in 0..b {
            for s in 0..m {
                enc[[i, s, 0]] = batch.gene_indices[[i, s]] as f64;
                enc[[i, s, 1]] = batch.values[[i, s]];
            }
        }
        let out = unpack_scatter(&batch, &enc).unwrap();
        for (i, (u, row)) in out.iter().zip(&masked).enumerate() {
            for (&g, &v) in row.survivors.genes.iter().zip(&row.survivors.values) {
                prop_assert_eq!(u.embeddings[[g, 0]], g as f64);
                prop_assert_eq!(u.embeddings[[g, 1]], v);
                prop_assert!(matches!(u.sources[g], SlotSource::Encoder(_)));
            }
            let n = u.encoder_positions().len() + u.masked_positions().len() + u.zero_positions().len();
            prop_assert_eq!(n, cells[i].n_genes);
            prop_assert_eq!(u.encoder_positions().len(), row.survivors.nnz());
            prop_assert_eq!(batch.pad_mask.row(i).iter().filter(|&&p| !p).count(), row.survivors.nnz());
        }
    }

    #[test]
    fn masking_preserves_truth(c in cell(), seed in 0u64..1000) {
        let cfg = MaskConfig::with_ratio(0.3, seed);
        if let Ok(plan) = build_mask_plan(&c, &cfg, 7) {
            let row = apply_mask(&c, &plan).unwrap();
            let dense = c.to_dense();
            for s in &row.masked {
                prop_assert_eq!(s.truth, dense[s.gene]);
                prop_assert_eq!(s.was_nonzero, dense[s.gene] != 0.0);
            }
            prop_assert_eq!(row.survivors.nnz() + plan.masked_nonzero.len(), c.nnz());
        }
    }

    #[test]
    fn scores_ignore_cluster_names(
        pairs in proptest::collection::vec((0usize..4, 0usize..5), 2..60),
        shift in 1usize..50,
    ) {
        let (labels, assign): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let renamed: Vec<usize> = assign.iter().map(|a| (a * 7 + shift) % 1000).collect();
        let a = adjusted_rand_index(&assign, &labels).unwrap();
        prop_assert!(a.value <= 1.0 + 1e-12);
        prop_assert!((a.value - adjusted_rand_index(&renamed, &labels).unwrap().value).abs() < 1e-12);
        let n = normalized_mutual_information(&assign, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&n.value));
        prop_assert!((n.value - normalized_mutual_information(&renamed, &labels).unwrap().value).abs() < 1e-12);
        let (h, c) = homogeneity_completeness(&assign, &labels).unwrap();
        let (h2, c2) = homogeneity_completeness(&renamed, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&h.value) && (0.0..=1.0).contains(&c.value));
        prop_assert!((h.value - h2.value).abs() < 1e-12 && (c.value - c2.value).abs() < 1e-12);
        // swapping roles swaps homogeneity and completeness
        let (hs, cs) = homogeneity_completeness(&labels, &assign).unwrap();
        prop_assert!((hs.value - c.value).abs() < 1e-12 && (cs.value - h.value).abs() < 1e-12);
    }

    #[test]
    fn silhouette_bounded_and_rotation_invariant(
        pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0usize..3), 6..40),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        let n = pts.len();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
        let a: Vec<usize> = pts.iter().map(|p| p.2).collect();
        let s = silhouette(&x, &a).unwrap();
        if !s.degenerate {
            prop_assert!((-1.0..=1.0).contains(&s.value));
            let rot = ndarray::array![[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
            let r = silhouette(&x.dot(&rot), &a).unwrap();
            prop_assert!((s.value - r.value).abs() < 1e-9);
        }
    }

    #[test]
    fn discretizer_weights_are_a_distribution(values in proptest::collection::vec(0.0f64..20.0, 1..50), seed in 0u64..100) {
        let mut r = rng::stream(seed, Stream::Init, 0);
        let d = AutoDiscretizer::new(8, 10, 0.1, seed % 2 == 0, &mut r).unwrap();
        let w = d.weights_batch(&values).unwrap();
        for row in w.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(xy in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..50)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let a = pearson(&x, &y);
        let b = pearson(&y, &x);
        if !a.degenerate {
            prop_assert!(a.r.abs() <= 1.0 + 1e-12);
            prop_assert!((a.r - b.r).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..500, frac in 0.05f64..0.5, seed in 0u64..100) {
        let (t, v) = split_indices(n, frac, seed);
        let all: BTreeSet<usize> = t.iter().chain(&v).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(t.len() + v.len(), n);
    }

    #[test]
    fn buckets_cover_every_cell_once(lengths in proptest::collection::vec(1usize..200, 1..300), bs in 1usize..20, pool in 0usize..5) {
        let mut r = rng::stream(0, Stream::Data, 0);
        let batches = bucket_batches(&lengths, bs, pool, &mut r);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
    }

    #[test]
    fn matrix_text_round_trips(rows in proptest::collection::vec(proptest::collection::vec(0u32..5, 6), 1..10)) {
        let dense: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64 * 1.25).collect()).collect();
        let m = SparseExpressionMatrix::from_dense(&dense, Stage::Normalized).unwrap();
        let back = parse_matrix(&write_matrix(&m)).unwrap();
        prop_assert_eq!(back.to_dense(), dense);
    }

    #[test]
    fn round_sig_is_idempotent(x in 1.0f64..1e25, d in 1u32..6) {
        let once = round_sig(x, d);
        prop_assert_eq!(round_sig(once, d), once);
        prop_assert!((once - x).abs() <= x * 10f64.powi(1 - d as i32) / 2.0 * 1.000001);
    }
}
