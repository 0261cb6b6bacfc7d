//! Embedding files: the 7-byte magic `MSEMB01`, `count` and `dim` as
//! little-endian u64, `count·dim` little-endian f64 values row by row, then a
//! manifest CSV block with `count` rows describing the vectors in order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::manifest::{parse_manifest, write_manifest, PatchRecord};

pub const MAGIC: &[u8; 7] = b"MSEMB01";

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub records: Vec<PatchRecord>,
}

pub fn encode(e: &Embeddings) -> Vec<u8> {
    let mut out = Vec::with_capacity(23 + 8 * e.vectors.len() * e.dim);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(e.vectors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(e.dim as u64).to_le_bytes());
    for v in &e.vectors {
        debug_assert_eq!(v.len(), e.dim);
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_manifest(&mut out, &e.records).expect("writing to memory");
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Embeddings> {
    if bytes.len() < 23 || &bytes[..7] != MAGIC {
        return Err(Error::data(path, "not an embeddings file (bad magic)"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (count, dim) = (word(7), word(15));
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .filter(|&n| n <= (bytes.len() - 23) as u64)
        .ok_or_else(|| Error::data(path, format!("size mismatch: header declares {count}x{dim} values")))?
        as usize;
    let (count, dim) = (count as usize, dim as usize);
    let values: Vec<f64> = bytes[23..23 + payload]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let records = parse_manifest(&bytes[23 + payload..], path)?;
    if records.len() != count {
        return Err(Error::data(path, format!("size mismatch: {count} vectors but {} manifest rows", records.len())));
    }
    let vectors = if dim == 0 { vec![Vec::new(); count] } else { values.chunks_exact(dim).map(<[f64]>::to_vec).collect() };
    Ok(Embeddings { dim, vectors, records })
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_embeddings(path: &Path, e: &Embeddings) -> Result<()> {
    if e.vectors.len() != e.records.len() || e.vectors.iter().any(|v| v.len() != e.dim) {
        return Err(Error::data(path, "vectors and records disagree in count or dimension"));
    }
    std::fs::write(path, encode(e)).map_err(|err| Error::io(path, err))
}
