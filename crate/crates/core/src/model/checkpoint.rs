//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "SCMAECKP"
//! version    u32 LE
//! config     u64 LE length, then JSON bytes
//! n_tensors  u64 LE
//! per tensor:
//!   name     u32 LE length, then UTF-8 bytes
//!   shape    u64 LE rows, u64 LE cols
//!   data     rows * cols f64 LE, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCMAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_checkpoint(model, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

fn write_checkpoint(model: &Model, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).map_err(std::io::Error::other)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.nrows() as u64).to_le_bytes())?;
        w.write_all(&(t.ncols() as u64).to_le_bytes())?;
        for x in t.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}

fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = read_len(r, 1 << 24)?;
    let mut cfg = vec![0u8; cfg_len];
    read_exact(r, &mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)?;
    let n = read_len(r, 1 << 20)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name_len = u32::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = read_len(r, 1 << 32)?;
        let cols = read_len(r, 1 << 32)?;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l <= 1 << 34)
            .ok_or_else(|| bad("tensor too large"))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(read_array(r)?));
        }
        let t = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        params.insert(name, t);
    }
    Model::from_parts(config, params)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_len(r: &mut impl Read, limit: u64) -> Result<usize> {
    let v = u64::from_le_bytes(read_array(r)?);
    if v > limit {
        return Err(Error::Checkpoint(format!("implausible length {v}")));
    }
    Ok(v as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = ModelConfig::preset("tiny-test").unwrap().with_genes(20).with_seed(4);
        let m = Model::new(cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let cfg = ModelConfig::preset("tiny-test").unwrap().with_genes(20);
        let m = Model::new(cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_checkpoint(&mut &cut[..]), Err(Error::Checkpoint(_))));
    }
}
