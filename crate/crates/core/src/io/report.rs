//! Experiment reports and tidy plot tables, written atomically.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub kind: String,
    /// Effective configuration, defaults included.
    pub config: Value,
    pub config_hash: String,
    pub weights_hash: String,
    pub n_queries: usize,
    pub per_query: Vec<Value>,
    pub aggregates: Value,
}

impl ExperimentReport {
    pub fn new(kind: &str, config: Value, weights_hash: String, per_query: Vec<Value>, aggregates: Value) -> Result<Self> {
        let config_hash = sha256_hex(&serde_json::to_vec(&config)?);
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.to_string(),
            config,
            config_hash,
            weights_hash,
            n_queries: per_query.len(),
            per_query,
            aggregates,
        })
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// One aggregated point of a plot: mean over `count` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub x: usize,
    pub condition: String,
    pub mean: f64,
    pub count: usize,
}

/// Tidy CSV with a header `x_label,condition,mean,count`. Rows with no
/// samples are left out rather than written as zeros.
pub fn plot_csv(x_label: &str, rows: &[PlotRow]) -> String {
    let mut out = format!("{x_label},condition,mean,count\n");
    for r in rows.iter().filter(|r| r.count > 0) {
        writeln!(out, "{},{},{},{}", r.x, r.condition, r.mean, r.count).expect("write to string");
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::file(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::file(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::file(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::file(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_buckets_are_omitted() {
        let rows = vec![
            PlotRow { x: 1, condition: "subject".into(), mean: -0.25, count: 4 },
            PlotRow { x: 2, condition: "subject".into(), mean: 0.0, count: 0 },
        ];
        assert_eq!(plot_csv("center", &rows), "center,condition,mean,count\n1,subject,-0.25,4\n");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
