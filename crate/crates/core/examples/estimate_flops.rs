//! Training-cost comparison of exact, random-feature and asymmetric
//! architectures at ~10M parameters, next to the published figures.
//!
//! `cargo run --example estimate_flops -- [spec.toml]`

use scmae::flops::FlopsSpecFile;

fn main() -> scmae::Result<()> {
    let spec = match std::env::args().nth(1) {
        Some(path) => FlopsSpecFile::load(path)?,
        None => FlopsSpecFile::bundled(),
    };
    println!("estimated\n{}", spec.estimate()?.to_text());
    if spec.architectures.iter().all(|a| a.published_per_sample.is_some()) {
        println!("published per-sample figures\n{}", spec.published()?.to_text());
    }
    Ok(())
}
