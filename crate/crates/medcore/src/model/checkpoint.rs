//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic   4 bytes  "MCKP"
//!   version u32      currently 1
//!   count   u64      number of tensor entries
//! then per entry:
//!   name_len u64, name bytes (UTF-8),
//!   rank u64, dims u64 × rank,
//!   payload f64 × product(dims)
//!
//! The same entry encoding carries Fisher maps ("fisher/" name prefix)
//! and sample dumps.

use super::ParamStore;
use crate::error::{MedError, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;
/// Upper bound on elements per tensor; anything above is a corrupt header.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_tensor_entries(path, store.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, tensor) in read_tensor_entries(path)? {
        store.insert(name, tensor);
    }
    Ok(store)
}

pub fn write_tensor_entries<'a>(
    path: &Path,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(MedError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(MedError::BadVersion(version));
    }
    let count = read_u64(&mut r, "entry count")?;
    if count > 1 << 24 {
        return Err(MedError::DimOverflow(format!("entry count {count}")));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for e in 0..count {
        let name_len = read_u64(&mut r, "name length")?;
        if name_len > 4096 {
            return Err(MedError::DimOverflow(format!(
                "entry {e}: name length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| MedError::Truncated(format!("entry {e}: name not UTF-8")))?;
        let rank = read_u64(&mut r, "rank")?;
        if rank > 8 {
            return Err(MedError::DimOverflow(format!("entry {e}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r, "dim")?;
            elements = elements
                .checked_mul(d)
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| MedError::DimOverflow(format!("entry {e} ({name}): dims")))?;
            dims.push(d as usize);
        }
        let mut data = vec![0.0f64; elements as usize];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, "payload")?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(dims, data)
            .map_err(|_| MedError::NonFinite(format!("checkpoint entry {name}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MedError::Truncated(format!("while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}
