//! Masking a batch of cells and packing the survivors for the encoder, then
//! scattering encoder outputs back to full gene length.
//!
//! `cargo run --example masking_packing`

use ndarray::Array3;
use scmae::data::SparseRow;
use scmae::masking::{build_mask_plan, apply_mask, MaskConfig, Token};
use scmae::packing::{filter_and_pack, unpack_scatter};

fn main() -> scmae::Result<()> {
    let cells = [
        SparseRow::from_dense(&[0.3, 2.1, 0.0, 4.5, 0.0, 7.3, 8.9, 0.0, 3.4, 2.5]),
        SparseRow::from_dense(&[1.1, 0.0, 0.0, 3.4, 2.3, 0.7, 0.0, 0.0, 2.9, 0.0]),
    ];
    let cfg = MaskConfig::with_ratio(0.3, 1);
    let mut masked = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let plan = build_mask_plan(c, &cfg, i as u64)?;
        let row = apply_mask(c, &plan)?;
        let shown: Vec<String> = row
            .displayed()
            .iter()
            .map(|v| v.map_or("[M]".into(), |x| format!("{x}")))
            .collect();
        println!("cell {i}: masked non-zero {:?}, masked zero {:?}", plan.masked_nonzero, plan.masked_zero);
        println!("  shown   {}", shown.join(" "));
        for s in &row.masked {
            if let Token::Value(v) = s.token {
                println!("  gene {} shows {v} (truth {})", s.gene, s.truth);
            }
        }
        masked.push(row);
    }

    let batch = filter_and_pack(&masked)?;
    println!("packed length {} ({} pad slots)", batch.m(), batch.n_pad());
    for i in 0..batch.batch_size() {
        println!("  cell {i}: genes {:?} values {:?}", batch.scatter_map[i], batch.values.row(i).to_vec());
    }

    // stand-in encoder output: each slot carries its gene index
    let enc = Array3::from_shape_fn((batch.batch_size(), batch.m(), 1), |(i, s, _)| batch.gene_indices[[i, s]] as f64);
    for (i, u) in unpack_scatter(&batch, &enc)?.iter().enumerate() {
        println!(
            "cell {i}: encoder {:?} masked {:?} zero {:?}",
            u.encoder_positions(),
            u.masked_positions(),
            u.zero_positions()
        );
    }
    Ok(())
}
