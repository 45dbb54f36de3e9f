//! Filtering and padding of masked cells into encoder batches.
//!
//! Only non-zero, unmasked genes ("survivors") reach the encoder. They are
//! laid out in ascending gene order and padded to the longest cell in the
//! batch; the masked and zero positions are retained per cell so the decoder
//! input can be reassembled at full length.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::masking::{MaskedRow, MaskedSlot};
use crate::rng::Rng;

/// Gene id stored in padded slots.
pub const PAD_GENE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub n_genes: usize,
    /// `[batch, m]`; padded slots hold 0.0 and must never be read.
    pub values: Array2<f64>,
    /// `[batch, m]`; padded slots hold [`PAD_GENE`].
    pub gene_indices: Array2<usize>,
    /// `[batch, m]`; `true` marks a padded slot.
    pub pad_mask: Array2<bool>,
    /// Per cell, packed slot -> original gene (non-padded slots only).
    pub scatter_map: Vec<Vec<usize>>,
    pub masked: Vec<Vec<MaskedSlot>>,
    pub zeros: Vec<Vec<usize>>,
}

impl PackedBatch {
    pub fn batch_size(&self) -> usize {
        self.scatter_map.len()
    }

    /// Padded sequence length.
    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_survivors(&self, cell: usize) -> usize {
        self.scatter_map[cell].len()
    }

    pub fn n_pad(&self) -> usize {
        self.pad_mask.iter().filter(|p| **p).count()
    }

    /// Where each of the cell's genes comes from when the full-length
    /// sequence is reassembled.
    pub fn sources(&self, cell: usize) -> Vec<SlotSource> {
        let mut src = vec![SlotSource::Zero; self.n_genes];
        for (slot, &g) in self.scatter_map[cell].iter().enumerate() {
            src[g] = SlotSource::Encoder(slot);
        }
        for (i, s) in self.masked[cell].iter().enumerate() {
            src[s.gene] = SlotSource::Masked(i);
        }
        src
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSource {
    /// Packed encoder slot.
    Encoder(usize),
    /// Index into the cell's masked list.
    Masked(usize),
    Zero,
}

/// Filters masked and zero positions out of each cell and pads the survivors
/// to the batch maximum.
pub fn filter_and_pack(cells: &[MaskedRow]) -> Result<PackedBatch> {
    let n_genes = cells
        .first()
        .map(|c| c.n_genes)
        .ok_or_else(|| Error::Empty("cannot pack an empty batch".into()))?;
    for (i, c) in cells.iter().enumerate() {
        if c.n_genes != n_genes {
            return Err(Error::Shape(format!(
                "cell {i} has {} genes, batch has {n_genes}",
                c.n_genes
            )));
        }
        if c.survivors.nnz() == 0 {
            return Err(Error::NoSurvivors { cell: i });
        }
    }
    let m = cells.iter().map(|c| c.survivors.nnz()).max().unwrap_or(0);
    let b = cells.len();
    let mut values = Array2::zeros((b, m));
    let mut gene_indices = Array2::from_elem((b, m), PAD_GENE);
    let mut pad_mask = Array2::from_elem((b, m), true);
    let mut scatter_map = Vec::with_capacity(b);
    for (i, c) in cells.iter().enumerate() {
        let s = &c.survivors;
        for (slot, (&g, &v)) in s.genes.iter().zip(&s.values).enumerate() {
            values[[i, slot]] = v;
            gene_indices[[i, slot]] = g;
            pad_mask[[i, slot]] = false;
        }
        scatter_map.push(s.genes.clone());
    }
    Ok(PackedBatch {
        n_genes,
        values,
        gene_indices,
        pad_mask,
        scatter_map,
        masked: cells.iter().map(|c| c.masked.clone()).collect(),
        zeros: cells.iter().map(MaskedRow::unmasked_zeros).collect(),
    })
}

/// One cell's full-length layout after scattering encoder outputs back.
#[derive(Debug, Clone, PartialEq)]
pub struct Unpacked {
    /// `[n_genes, d]`; encoder outputs at survivor positions, zeros elsewhere.
    pub embeddings: Array2<f64>,
    pub sources: Vec<SlotSource>,
}

impl Unpacked {
    pub fn masked_positions(&self) -> Vec<usize> {
        self.positions(|s| matches!(s, SlotSource::Masked(_)))
    }

    pub fn zero_positions(&self) -> Vec<usize> {
        self.positions(|s| *s == SlotSource::Zero)
    }

    pub fn encoder_positions(&self) -> Vec<usize> {
        self.positions(|s| matches!(s, SlotSource::Encoder(_)))
    }

    fn positions(&self, f: impl Fn(&SlotSource) -> bool) -> Vec<usize> {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| f(s))
            .map(|(g, _)| g)
            .collect()
    }
}

/// Scatters `[batch, m, d]` encoder output back to full gene length. Padded
/// slots are dropped.
pub fn unpack_scatter(batch: &PackedBatch, encoder_out: &Array3<f64>) -> Result<Vec<Unpacked>> {
    let (b, m, d) = encoder_out.dim();
    if b != batch.batch_size() || m != batch.m() {
        return Err(Error::Shape(format!(
            "encoder output is [{b}, {m}, {d}], batch is [{}, {}]",
            batch.batch_size(),
            batch.m()
        )));
    }
    Ok((0..b)
        .map(|i| {
            let mut embeddings = Array2::zeros((batch.n_genes, d));
            for (slot, &g) in batch.scatter_map[i].iter().enumerate() {
                embeddings.row_mut(g).assign(&encoder_out.slice(ndarray::s![i, slot, ..]));
            }
            Unpacked {
                embeddings,
                sources: batch.sources(i),
            }
        })
        .collect())
}

/// Groups cell indices into batches of similar length to limit padding.
///
/// Cells are shuffled, cut into pools of `pool_batches * batch_size`, sorted
/// by length within each pool and chunked; the resulting batches are
/// shuffled again.
pub fn bucket_batches(
    lengths: &[usize],
    batch_size: usize,
    pool_batches: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(lengths.len().div_ceil(batch_size));
    for pool in order.chunks(batch_size * pool_batches.max(1)) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| (lengths[i], i));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Total padded slots if `batches` were packed with the given lengths.
pub fn padding_waste(lengths: &[usize], batches: &[Vec<usize>]) -> usize {
    batches
        .iter()
        .map(|b| {
            let m = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            b.iter().map(|&i| m - lengths[i]).sum::<usize>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseRow;
    use crate::masking::{apply_mask, MaskPlan, Replacement};

    fn worked_example() -> Vec<MaskedRow> {
        let c1 = SparseRow::from_dense(&[0.3, 2.1, 0.0, 4.5, 0.0, 7.3, 8.9, 0.0, 3.4, 2.5]);
        let c2 = SparseRow::from_dense(&[1.1, 0.0, 0.0, 3.4, 2.3, 0.7, 0.0, 0.0, 2.9, 0.0]);
        let plan = |nz: Vec<usize>, z: Vec<usize>| MaskPlan {
            n_genes: 10,
            replacement: nz
                .iter()
                .chain(&z)
                .map(|&g| (g, Replacement::MaskToken))
                .collect(),
            masked_nonzero: nz,
            masked_zero: z,
        };
        vec![
            apply_mask(&c1, &plan(vec![0], vec![4, 7])).unwrap(),
            apply_mask(&c2, &plan(vec![5], vec![1, 2, 6])).unwrap(),
        ]
    }

    #[test]
    fn worked_example_packs_to_six() {
        let b = filter_and_pack(&worked_example()).unwrap();
        assert_eq!(b.m(), 6);
        assert_eq!(b.scatter_map[0], vec![1, 3, 5, 6, 8, 9]);
        assert_eq!(b.scatter_map[1], vec![0, 3, 4, 8]);
        assert_eq!(b.values.row(0).to_vec(), vec![2.1, 4.5, 7.3, 8.9, 3.4, 2.5]);
        assert_eq!(&b.values.row(1).to_vec()[..4], &[1.1, 3.4, 2.3, 2.9]);
        assert_eq!(b.pad_mask.row(1).to_vec(), vec![false, false, false, false, true, true]);
        assert_eq!(b.gene_indices[[1, 5]], PAD_GENE);
        assert_eq!(b.n_pad(), 2);
    }

    #[test]
    fn worked_example_unpacks_c2() {
        let b = filter_and_pack(&worked_example()).unwrap();
        let out = Array3::from_shape_fn((2, 6, 1), |(_, s, _)| s as f64 + 1.0);
        let u = unpack_scatter(&b, &out).unwrap();
        assert_eq!(u[1].encoder_positions(), vec![0, 3, 4, 8]);
        assert_eq!(u[1].masked_positions(), vec![1, 2, 5, 6]);
        assert_eq!(u[1].zero_positions(), vec![7, 9]);
        assert_eq!(u[1].embeddings[[8, 0]], 4.0);
    }

    #[test]
    fn single_cell_has_no_padding() {
        let cells = worked_example();
        let b = filter_and_pack(&cells[..1]).unwrap();
        assert_eq!(b.m(), 6);
        assert_eq!(b.n_pad(), 0);
    }

    #[test]
    fn no_survivors_names_cell() {
        let c = SparseRow::from_dense(&[1.0, 0.0, 0.0]);
        let plan = MaskPlan {
            n_genes: 3,
            masked_nonzero: vec![0],
            masked_zero: vec![],
            replacement: Default::default(),
        };
        let masked = apply_mask(&c, &plan).unwrap();
        let mut cells = worked_example();
        cells.push(masked);
        assert!(matches!(filter_and_pack(&cells), Err(Error::Shape(_))));
        let c = SparseRow::from_dense(&vec![0.0; 9].into_iter().chain([1.0]).collect::<Vec<_>>());
        let plan = MaskPlan {
            n_genes: 10,
            masked_nonzero: vec![9],
            masked_zero: vec![],
            replacement: Default::default(),
        };
        cells[2] = apply_mask(&c, &plan).unwrap();
        assert!(matches!(filter_and_pack(&cells), Err(Error::NoSurvivors { cell: 2 })));
    }

    #[test]
    fn unpack_rejects_wrong_shape() {
        let b = filter_and_pack(&worked_example()).unwrap();
        assert!(unpack_scatter(&b, &Array3::zeros((2, 5, 3))).is_err());
    }

    #[test]
    fn bucketing_covers_all_and_reduces_waste() {
        let mut r = crate::rng::stream(1, crate::rng::Stream::Batch, 0);
        let lengths: Vec<usize> = (0..200).map(|i| 5 + (i * 37) % 50).collect();
        let bucketed = bucket_batches(&lengths, 8, 8, &mut r);
        let mut seen: Vec<usize> = bucketed.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        let naive: Vec<Vec<usize>> = (0..200).collect::<Vec<_>>().chunks(8).map(<[_]>::to_vec).collect();
        assert!(padding_waste(&lengths, &bucketed) < padding_waste(&lengths, &naive));
    }
}
