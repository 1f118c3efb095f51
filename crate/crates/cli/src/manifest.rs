//! Run manifests: written before any work, completed when the command finishes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub outputs: Vec<String>,
    pub status: Option<String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Handle on an in-progress run directory.
pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(dir: &Path, command: &str, config: serde_json::Value, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let run = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                seed,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                started_at: now(),
                finished_at: None,
                outputs: Vec::new(),
                status: None,
            },
        };
        run.write()?;
        Ok(run)
    }

    /// Path of an output file, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> Result<PathBuf, CliError> {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
            self.write()?;
        }
        Ok(self.dir.join(name))
    }

    pub fn finish(mut self, status: &str) -> Result<(), CliError> {
        self.manifest.finished_at = Some(now());
        self.manifest.status = Some(status.to_string());
        self.write()
    }

    fn write(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(self.dir.join(FILE_NAME), text)?;
        Ok(())
    }
}

pub fn read(dir: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(dir.join(FILE_NAME))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("bad manifest: {e}")))
}
