pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod flops;
pub mod graph;
pub mod masking;
pub mod model;
pub mod packing;
pub mod params;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
