//! Dataset manifests: UTF-8 CSV with a `path,mos` header.

use std::path::{Path, PathBuf};

use csiqa_core::train::Sample;

use crate::error::{Error, Result};
use crate::pnm;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// 1-based line in the manifest file.
    pub line: usize,
    pub path: PathBuf,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub msg: String,
}

fn manifest_error(path: &Path, rows: Vec<RowError>) -> Error {
    Error::Manifest { path: path.to_path_buf(), rows }
}

/// Parses manifest text. Every malformed row is reported, not just the
/// first.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<Entry>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let header_ok = reader
        .headers()
        .map(|h| h.len() == 2 && h.get(0).map(str::trim) == Some("path") && h.get(1).map(str::trim) == Some("mos"))
        .unwrap_or(false);
    if !header_ok {
        return Err(manifest_error(origin, vec![RowError { line: 1, msg: "header must be `path,mos`".into() }]));
    }
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                errors.push(RowError { line, msg: e.to_string() });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 {
            errors.push(RowError { line, msg: format!("expected 2 fields, found {}", record.len()) });
            continue;
        }
        let path = record[0].trim();
        if path.is_empty() {
            errors.push(RowError { line, msg: "empty path".into() });
            continue;
        }
        match record[1].trim().parse::<f64>() {
            Ok(mos) if mos.is_finite() => entries.push(Entry { line, path: PathBuf::from(path), mos }),
            _ => errors.push(RowError { line, msg: format!("mos `{}` is not a finite number", &record[1]) }),
        }
    }
    if !errors.is_empty() {
        return Err(manifest_error(origin, errors));
    }
    if entries.is_empty() {
        return Err(manifest_error(origin, vec![RowError { line: 1, msg: "no rows".into() }]));
    }
    Ok(entries)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Loads every listed image as luminance. Unreadable images are reported
/// against their manifest line.
pub fn load_samples(path: &Path) -> Result<(Vec<Entry>, Vec<Sample>)> {
    let entries = read(path)?;
    let mut samples = Vec::with_capacity(entries.len());
    let mut errors = Vec::new();
    for e in &entries {
        match pnm::read_luma(&e.path) {
            Ok(image) => samples.push(Sample { image, mos: e.mos }),
            Err(err) => errors.push(RowError { line: e.line, msg: err.to_string() }),
        }
    }
    if !errors.is_empty() {
        return Err(manifest_error(path, errors));
    }
    Ok((entries, samples))
}

/// Manifest text for `(path, mos)` rows.
pub fn render(rows: &[(String, f64)]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Usage(format!("cannot write manifest: {e}"));
    w.write_record(["path", "mos"]).map_err(to_err)?;
    for (p, m) in rows {
        w.write_record([p.as_str(), &m.to_string()]).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(format!("cannot write manifest: {e}")))?;
    Ok(String::from_utf8(bytes).expect("manifest text is UTF-8"))
}
