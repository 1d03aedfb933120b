//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PEFTCKPT"
//! version  u32      1
//! count    u64      number of records
//! record*  name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!          values f64 × product(dims) (IEEE-754 bit patterns)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PEFTCKPT";
pub const VERSION: u32 = 1;

pub fn write_records<'a, W: Write>(
    w: &mut W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let records: Vec<_> = records.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| read_u64(r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

/// Writes all parameters, or only the trainable subset.
pub fn save_params(store: &ParamStore, path: &Path, trainable_only: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(
        &mut w,
        store
            .iter()
            .filter(|(_, p)| p.trainable || !trainable_only)
            .map(|(_, p)| (p.name.as_str(), &p.value)),
    )?;
    w.flush()?;
    Ok(())
}

/// Overwrites the named parameters of `store` from a checkpoint. Every
/// record must name an existing parameter of identical shape.
pub fn load_params(store: &mut ParamStore, path: &Path) -> Result<usize> {
    let records = read_records(&mut BufReader::new(File::open(path)?))?;
    for (name, t) in &records {
        let Some(id) = store.id(name) else {
            return Err(Error::Integrity(format!(
                "checkpoint parameter `{name}` does not exist in the model"
            )));
        };
        let p = store.get(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Integrity(format!(
                "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
    }
    let n = records.len();
    for (name, t) in records {
        let id = store.id(&name).expect("checked above");
        store.get_mut(id).value = t;
    }
    Ok(n)
}
