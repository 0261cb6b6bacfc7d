//! Text form of stain models: six stain-matrix values row-major, then the two
//! maximum concentrations, whitespace-separated with 17 significant digits.
//!
//! A reference file holds two such lines, Macenko first and Vahadane second.
//! The synthetic ground-truth sidecar `domains.txt` prefixes each line with
//! the domain name.

use std::path::Path;

use mitoshift_core::stain::StainModel;
use mitoshift_core::tta::StainTargets;

use crate::error::{Error, Result};

pub fn format_model(m: &StainModel) -> String {
    m.to_values().iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ")
}

/// Parses eight whitespace-separated numbers.
pub fn parse_model(text: &str) -> std::result::Result<StainModel, String> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    let values: [f64; 8] = values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 8 values, found {}", v.len()))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err("stain model values must be finite".into());
    }
    Ok(StainModel::from_values(values))
}

pub fn format_reference(targets: &StainTargets) -> Option<String> {
    Some(format!("{}\n{}\n", format_model(targets.macenko.as_ref()?), format_model(targets.vahadane.as_ref()?)))
}

pub fn parse_reference(text: &str) -> std::result::Result<StainTargets, (usize, String)> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if lines.len() != 2 {
        return Err((lines.len().max(1), format!("expected 2 stain model lines, found {}", lines.len())));
    }
    let parse = |(n, l): (usize, &str)| parse_model(l).map_err(|e| (n, e));
    Ok(StainTargets {
        macenko: Some(parse(lines[0])?),
        vahadane: Some(parse(lines[1])?),
    })
}

pub fn write_reference(path: &Path, targets: &StainTargets) -> Result<()> {
    let text = format_reference(targets).ok_or_else(|| Error::Config("reference needs both stain models".into()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_reference(path: &Path) -> Result<StainTargets> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reference(&text).map_err(|(line, msg)| Error::line(path, line, msg))
}

/// `name v1 … v8` per domain.
pub fn format_domains(domains: &[(String, StainModel)]) -> String {
    domains.iter().map(|(name, m)| format!("{name} {}\n", format_model(m))).collect()
}

pub fn read_domains(path: &Path) -> Result<Vec<(String, StainModel)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line.split_once(char::is_whitespace).ok_or_else(|| Error::line(path, i + 1, "missing values"))?;
        let model = parse_model(rest).map_err(|e| Error::line(path, i + 1, e))?;
        out.push((name.to_string(), model));
    }
    Ok(out)
}
