//! CSV bodies plus a sidecar JSON report.
//!
//! CSV output depends only on the resolved config, so reruns are
//! byte-identical. The wall-clock time lives in the sidecar's `metadata`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Shortest round-trip decimal, switching to exponent form for very small or
/// very large magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub struct Report {
    pub command: &'static str,
    pub config: ExperimentConfig,
    pub rows: Vec<Vec<String>>,
    pub summary: Value,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    csv: &'a Path,
    seed: Option<u64>,
    config: &'a ExperimentConfig,
    summary: &'a Value,
    metadata: Metadata,
}

#[derive(Serialize)]
struct Metadata {
    tool_version: &'static str,
    created_unix_secs: u64,
}

/// `run.csv` reports to `run.json`; any other name gets `.report.json` appended.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    match csv.extension() {
        Some(ext) if ext == "csv" => csv.with_extension("json"),
        _ => {
            let mut s = csv.as_os_str().to_owned();
            s.push(".report.json");
            PathBuf::from(s)
        }
    }
}

impl Report {
    pub fn new(
        command: &'static str,
        config: &ExperimentConfig,
        rows: Vec<Vec<String>>,
        summary: Value,
    ) -> Self {
        Report {
            command,
            config: config.clone(),
            rows,
            summary,
        }
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner()
            .map_err(|e| CliError::Csv(e.into_error().into()))
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let sidecar = Sidecar {
            command: self.command,
            csv: &self.config.output_path,
            seed: self.config.seed(),
            config: &self.config,
            summary: &self.summary,
            metadata: Metadata {
                tool_version: env!("CARGO_PKG_VERSION"),
                created_unix_secs: created,
            },
        };
        Ok(serde_json::to_string_pretty(&sidecar)? + "\n")
    }

    /// Writes the CSV and its sidecar, creating parent directories. Returns
    /// the sidecar path.
    pub fn write(&self) -> Result<PathBuf> {
        let csv_path = &self.config.output_path;
        let json_path = sidecar_path(csv_path);
        if let Some(src) = &self.config.source {
            for out in [csv_path, &json_path] {
                if same_file(src, out) {
                    return Err(CliError::Precondition(format!(
                        "output {} would overwrite the config file",
                        out.display()
                    )));
                }
            }
        }
        if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| CliError::Write {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        write_file(csv_path, &self.csv_bytes()?)?;
        write_file(&json_path, self.sidecar_json()?.as_bytes())?;
        Ok(json_path)
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}
