//! Manifest CSV with the exact header `image_path,label,domain`. Image paths
//! are relative to the manifest's directory unless absolute.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use mitoshift_core::stain::RgbPatch;

use crate::error::{Error, Result};
use crate::formats::png;

pub const HEADER: [&str; 3] = ["image_path", "label", "domain"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub image_path: String,
    /// 0 = normal, 1 = atypical.
    pub label: u8,
    /// Scanner identifier.
    pub domain: String,
    /// 1-based line in the manifest, for error messages.
    pub line: usize,
}

pub fn load_manifest(path: &Path) -> Result<Vec<PatchRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file, path)
}

/// Parses manifest text; `path` only labels errors.
pub fn parse_manifest(reader: impl Read, path: &Path) -> Result<Vec<PatchRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| Error::line(path, 1, e.to_string()))?,
        None => return Err(Error::line(path, 1, "missing header")),
    };
    if header.iter().ne(HEADER) {
        return Err(Error::line(path, 1, format!("header must be '{}'", HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::line(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::line(path, line, format!("label must be 0 or 1, found '{other}'"))),
        };
        if rec[0].is_empty() || rec[2].is_empty() {
            return Err(Error::line(path, line, "image_path and domain must be nonempty"));
        }
        if rec[2].chars().any(char::is_control) || rec[2].trim() != &rec[2] {
            return Err(Error::line(path, line, "domain must not contain control characters or surrounding spaces"));
        }
        out.push(PatchRecord {
            image_path: rec[0].to_string(),
            label,
            domain: rec[2].to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn write_manifest(writer: impl Write, records: &[PatchRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([r.image_path.as_str(), if r.label == 0 { "0" } else { "1" }, r.domain.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_manifest(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(std::io::BufWriter::new(file), records).map_err(|e| Error::data(path, e.to_string()))
}

pub fn resolve_image(manifest: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

/// Decodes every image of the manifest; failures cite the manifest line.
pub fn load_patches(manifest: &Path, records: &[PatchRecord], side: usize) -> Result<Vec<RgbPatch>> {
    records
        .iter()
        .map(|r| {
            png::read_patch(&resolve_image(manifest, &r.image_path), Some(side))
                .map_err(|e| Error::line(manifest, r.line, e.to_string()))
        })
        .collect()
}

/// Sorted distinct domain names; a record's domain index is its position here.
pub fn domain_names(records: &[PatchRecord]) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = records.iter().map(|r| r.domain.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<PatchRecord>> {
        parse_manifest(text.as_bytes(), Path::new("m.csv"))
    }

    #[test]
    fn valid_and_empty_manifests() {
        let recs = parse("image_path,label,domain\na.png,0,s1\nb.png,1,s2\nc.png,1,s1\n").unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!((recs[1].image_path.as_str(), recs[1].label, recs[1].domain.as_str(), recs[1].line), ("b.png", 1, "s2", 3));
        assert!(parse("image_path,label,domain\n").unwrap().is_empty());
    }

    #[test]
    fn errors_cite_lines() {
        let err = parse("image_path,label,domain\na,0,x\nb,1,x\nc,0,x\nd,2,x\n").unwrap_err();
        assert!(matches!(err, Error::DataLine { line: 5, .. }), "{err}");
        let err = parse("path,label,domain\n").unwrap_err();
        assert!(matches!(err, Error::DataLine { line: 1, .. }));
        assert!(parse("").is_err());
        assert!(parse("image_path,label,domain\na,0\n").is_err());
    }

    #[test]
    fn write_then_parse() {
        let recs = parse("image_path,label,domain\n\"x,y.png\",1,s\n").unwrap();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &recs).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), recs);
    }
}
