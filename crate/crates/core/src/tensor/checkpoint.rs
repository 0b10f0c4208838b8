//! Binary tensor files: magic `SNCK`, `u32` version, `u64` entry count, then
//! per entry `u64` name length, UTF-8 name, `u64` rank, `u64` dims and the
//! values as little-endian `f64`.

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_tensors<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format("not a tensor checkpoint (bad magic)"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(format(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(format("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format("parameter name is not UTF-8"))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(format(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_params<W: Write>(w: W, store: &ParamStore) -> Result<()> {
    let entries: Vec<(String, &Tensor)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), &p.value))
        .collect();
    write_tensors(w, &entries)
}

/// Loads values into `store`; names and shapes must match exactly.
pub fn load_params<R: Read>(r: R, store: &mut ParamStore) -> Result<()> {
    let entries = read_tensors(r)?;
    if entries.len() != store.len() {
        return Err(format(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| format(format!("checkpoint parameter {name} not in model")))?;
        if store.get(id).shape() != t.shape() {
            return Err(format(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}
