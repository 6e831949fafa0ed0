//! Result files. Every CSV starts with a `schema_version` column; JSON files
//! carry a `schema_version` key.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Formats a float with shortest round-trip notation; empty for NaN.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut full_header = vec!["schema_version"];
    full_header.extend_from_slice(header);
    writer.write_record(&full_header).map_err(|e| csv_err(path, e))?;
    let version = SCHEMA_VERSION.to_string();
    for row in rows {
        writer
            .write_record(std::iter::once(&version).chain(row.iter()))
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(CliError::io(path))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes through a temporary file and renames it into place.
pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialise");
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub config: Value,
    pub master_seed: Option<u64>,
    pub schedule: Value,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, master_seed: Option<u64>) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            tool: "trunc-mc",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: serde_json::to_value(config).expect("configs serialise"),
            master_seed,
            schedule: Value::Null,
            outputs: Vec::new(),
            notes: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn write(mut self, out: &Path, elapsed: Duration) -> CliResult<PathBuf> {
        self.outputs.sort();
        self.wall_clock_secs = elapsed.as_secs_f64();
        let path = out.join("manifest.json");
        write_json(&path, &self)?;
        Ok(path)
    }
}
