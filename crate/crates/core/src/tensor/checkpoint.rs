//! Parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//! `b"MKCP"`, version, parameter count, then per parameter: name length,
//! UTF-8 name, rank, each dimension, and the values as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MKCP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ck(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for &x in p.value.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ck(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads every `(name, tensor)` pair from a checkpoint stream.
pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ck("missing header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(|_| ck("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| ck("name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| ck(format!("truncated values for {name}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Loads values into an already-constructed store; names and shapes must match.
pub fn load_checkpoint(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let entries = read_checkpoint(std::io::BufReader::new(f))?;
    if entries.len() != store.len() {
        return Err(ck(format!("checkpoint has {} parameters, model has {}", entries.len(), store.len())));
    }
    for (name, t) in entries {
        store.set_value(&name, t).map_err(|e| ck(e.to_string()))?;
    }
    Ok(())
}
