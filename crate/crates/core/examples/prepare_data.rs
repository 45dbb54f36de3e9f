//! Raw counts to model-ready input: quality filter, library-size
//! normalization, and the coordinate text format.
//!
//! `cargo run --example prepare_data -- [out_dir]`

use scmae::data::{
    cell_records, load_matrix, normalize, quality_filter_with_index, save_matrix, synthesize_dataset, SyntheticSpec,
};

fn main() -> scmae::Result<()> {
    let out_dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, std::path::PathBuf::from);
    std::fs::create_dir_all(&out_dir).map_err(|e| scmae::Error::io(&out_dir, e))?;

    let (raw, labels) = synthesize_dataset(&SyntheticSpec::new(300, 200, 3, 0.9, 7))?;
    let names: Vec<String> = labels.iter().map(|l| format!("type{l}")).collect();
    let records = cell_records(&raw, Some(&names))?;
    let sizes: Vec<f64> = records.iter().map(|r| r.library_size).collect();
    println!(
        "{} cells x {} genes, {} non-zero; library size {:.0}..{:.0}",
        raw.n_cells(),
        raw.n_genes(),
        raw.n_entries(),
        sizes.iter().cloned().fold(f64::INFINITY, f64::min),
        sizes.iter().cloned().fold(0.0, f64::max)
    );

    let min_genes = 20;
    let (kept, index) = quality_filter_with_index(&raw, min_genes)?;
    println!("min_genes {min_genes}: kept {} cells, dropped {}", kept.n_cells(), raw.n_cells() - kept.n_cells());

    let norm = normalize(&kept, 1e4)?;
    let path = out_dir.join("normalized.txt");
    save_matrix(&norm, &path)?;
    let back = load_matrix(&path)?;
    assert_eq!(back, norm);
    let first = norm.row(0);
    println!(
        "cell {} ({}): {} expressed genes, first values {:?}",
        records[index[0]].cell_id,
        names[index[0]],
        first.nnz(),
        &first.values[..first.nnz().min(4)]
    );
    println!("wrote {}", path.display());
    Ok(())
}
