//! Checkpoint layout (all integers little-endian u64):
//!
//! ```text
//! "MSHIFT01"
//! config length, config text   key = value lines: architecture keys,
//!                              adaptation, then one `domain = name` per domain
//! parameter count
//! per parameter: name length, name, rank, dims…, values as f64
//! ```
//!
//! Parameters appear in declaration order.

use std::path::Path;

use mitoshift_core::backbone::{Adaptation, VptViT, ViTConfig};
use mitoshift_core::Tensor;

use crate::config::{get_vit_key, set_vit_key, VIT_KEYS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSHIFT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VptViT,
    /// Scanner names in domain-index order.
    pub domains: Vec<String>,
}

fn put(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u64).to_le_bytes());
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let cfg = ck.model.config();
    let mut header = String::new();
    for key in VIT_KEYS {
        header.push_str(&format!("{key} = {}\n", get_vit_key(cfg, key).expect("architecture key")));
    }
    header.push_str(&format!("adaptation = {}\n", ck.model.adaptation().name()));
    for d in &ck.domains {
        header.push_str(&format!("domain = {d}\n"));
    }
    let mut out = MAGIC.to_vec();
    put(&mut out, header.len());
    out.extend_from_slice(header.as_bytes());
    let entries = ck.model.store().entries();
    put(&mut out, entries.len());
    for e in entries {
        put(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        put(&mut out, e.tensor.shape().len());
        for &d in e.tensor.shape() {
            put(&mut out, d);
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data(self.path, "checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::data(self.path, "checkpoint length field out of range"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::data(path, "not a checkpoint (bad magic)"));
    }
    let mut c = Cursor { bytes, pos: 8, path };
    let n = c.len()?;
    let header = std::str::from_utf8(c.take(n)?).map_err(|_| Error::data(path, "checkpoint header is not UTF-8"))?;
    let mut vit = ViTConfig::default();
    let mut adaptation = None;
    let mut domains = Vec::new();
    for (i, text) in header.lines().enumerate() {
        let bad = |m: String| Error::data(path, format!("checkpoint header line {}: {m}", i + 1));
        let (key, value) = text.split_once(" = ").ok_or_else(|| bad(format!("expected key = value, found '{text}'")))?;
        match key {
            "adaptation" => adaptation = Some(value.parse::<Adaptation>().map_err(|e| bad(e.to_string()))?),
            "domain" => domains.push(value.to_string()),
            _ => {
                if !set_vit_key(&mut vit, key, value).map_err(|e| bad(e.to_string()))? {
                    return Err(bad(format!("unknown key '{key}'")));
                }
            }
        }
    }
    let adaptation = adaptation.ok_or_else(|| Error::data(path, "checkpoint header lacks adaptation"))?;
    let count = c.len()?;
    let mut values = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = c.len()?;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| Error::data(path, "parameter name is not UTF-8"))?;
        let rank = c.len()?;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::data(path, "parameter shape overflows"))?;
        let data = c.take(numel)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        values.push((name.to_string(), Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::data(path, "trailing bytes after the last parameter"));
    }
    let mut model = VptViT::new(vit, domains.len(), 0).map_err(|e| Error::data(path, format!("checkpoint config: {e}")))?;
    model.load_values(&values).map_err(|e| Error::data(path, format!("checkpoint parameters: {e}")))?;
    model.set_adaptation(adaptation);
    Ok(Checkpoint { model, domains })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
