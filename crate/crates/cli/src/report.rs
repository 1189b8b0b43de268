//! Report envelopes and output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const TOOL: &str = "hpt";

/// Common wrapper of every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope<T> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    /// Effective configuration; feeding it back reproduces the run.
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    /// Failed internal checks; empty on success.
    pub failures: Vec<String>,
    pub payload: T,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl<T: Serialize + DeserializeOwned> ReportEnvelope<T> {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: Vec<u64>, started_at: u64, failures: Vec<String>, payload: T) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config.hash(),
            config: config.clone(),
            seeds,
            started_at,
            finished_at: unix_now(),
            failures,
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Output directory with helpers for the JSON report and CSV tables.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_report<T: Serialize + DeserializeOwned>(&self, name: &str, report: &ReportEnvelope<T>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, report.to_json()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Write a CSV with `header` and one row per record.
    pub fn write_csv<R, I>(&self, name: &str, header: &[&str], rows: I) -> Result<PathBuf, CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

/// Format an optional float for CSV; missing values are empty cells.
pub fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}
