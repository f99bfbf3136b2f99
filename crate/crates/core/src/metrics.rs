//! Per-epoch metrics table.
//!
//! The file starts with a `# config_hash=<hash>` comment line followed by the
//! CSV header [`METRICS_HEADER`]. Accuracies are percentages.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 6] = ["epoch", "lr", "train_adv_loss", "train_cons_loss", "clean_acc", "pgd10_acc"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_adv_loss: f64,
    pub train_cons_loss: f64,
    pub clean_acc: f64,
    pub pgd10_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub config_hash: Option<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: Some(config_hash.to_string()),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .expect("csv output is utf-8");
        Ok(match &self.config_hash {
            Some(h) => format!("# config_hash={h}\n{body}"),
            None => body,
        })
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let config_hash = text
            .lines()
            .filter_map(|l| l.strip_prefix('#'))
            .find_map(|l| l.trim().strip_prefix("config_hash="))
            .map(|h| h.trim().to_string());
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
            return Err(Error::MalformedData {
                path: origin.to_path_buf(),
                message: format!(
                    "expected columns `{}`, found `{}`",
                    METRICS_HEADER.join(","),
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(|e| Error::MalformedData {
                path: origin.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(Self { config_hash, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Rewrites the whole file through a rename, so each append is atomic.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

pub const TERMS_HEADER: [&str; 3] = ["epoch", "term", "value"];

/// Epoch means of every named loss term, one row per `(epoch, term)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermsTable {
    pub config_hash: Option<String>,
    pub rows: Vec<TermRow>,
}

impl TermsTable {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: Some(config_hash.to_string()),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(TERMS_HEADER)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .expect("csv output is utf-8");
        Ok(match &self.config_hash {
            Some(h) => format!("# config_hash={h}\n{body}"),
            None => body,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config_hash = text
            .lines()
            .filter_map(|l| l.strip_prefix('#'))
            .find_map(|l| l.trim().strip_prefix("config_hash="))
            .map(|h| h.trim().to_string());
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let malformed = |message: String| Error::MalformedData {
            path: path.to_path_buf(),
            message,
        };
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != TERMS_HEADER {
            return Err(malformed(format!("expected columns `{}`", TERMS_HEADER.join(","))));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<TermRow>, _>>()
            .map_err(|e| malformed(e.to_string()))?;
        Ok(Self { config_hash, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}
