//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SATM" | version | count
//! count × { name_len | name (UTF-8) | rank | dims[rank] }
//! count × { product(dims) × f32 LE }   // same order as the table
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Scalar, Tensor, TensorError, MAX_RANK};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SATM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, store: &ParamStore<T>) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, store.len() as u32)?;
    for (_, p) in store.iter() {
        put_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.value.rank() as u32)?;
        for &d in p.value.shape() {
            put_u32(w, d as u32)?;
        }
    }
    for (_, p) in store.iter() {
        for v in p.value.data() {
            let f = v.as_f64() as f32;
            w.write_all(&f.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore<f32>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = get_u32(r)? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let rank = get_u32(r)? as usize;
        if rank > MAX_RANK {
            return Err(CheckpointError::Corrupt(format!("rank {rank} for `{name}`")));
        }
        let dims = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        table.push((name, dims));
    }
    let mut store = ParamStore::new();
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.add(name, Tensor::new(&dims, data)?)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
