//! CSV tables, JSON documents and line-delimited logs.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `header` then `rows` as RFC-4180 CSV.
pub fn save_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    std::fs::write(path, csv_bytes(header, rows)?).map_err(|e| Error::io(path, e))
}

pub fn csv_bytes<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    let fail = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::shape(
                "csv",
                format!("row has {} fields, header has {}", r.len(), header.len()),
            ));
        }
        w.write_record(r.iter().map(|s| s.as_ref())).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn save_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format {
        offset: 0,
        detail: format!("{}: {e}", path.display()),
    })
}

/// Appends one JSON record per line.
pub struct JsonlWriter {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write<V: Serialize>(&mut self, record: &V) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl<V: DeserializeOwned>(path: &Path) -> Result<Vec<V>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in s.split_inclusive('\n') {
        let body = line.trim_end();
        if !body.is_empty() {
            out.push(serde_json::from_str(body).map_err(|e| Error::Format {
                offset,
                detail: format!("{}: {e}", path.display()),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}
