use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::CliError;
use crate::format::write_atomic;

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub library_version: String,
    /// Fully resolved configuration after overrides.
    pub config: serde_json::Value,
    pub overrides: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub threads: usize,
    pub started_unix_secs: f64,
    pub finished_unix_secs: f64,
    pub wall_time_secs: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(subcommand: &str, config: serde_json::Value, overrides: &[String], threads: usize) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                library_version: env!("CARGO_PKG_VERSION").to_string(),
                config,
                overrides: overrides.to_vec(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                threads,
                started_unix_secs: unix_now(),
                finished_unix_secs: 0.0,
                wall_time_secs: 0.0,
            },
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn elapsed(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    /// Writes the manifest atomically to `path`.
    pub fn finish(mut self, path: &Path) -> Result<RunManifest, CliError> {
        self.manifest.finished_unix_secs = unix_now();
        self.manifest.wall_time_secs = self.elapsed();
        let text = serde_json::to_vec_pretty(&self.manifest).expect("manifest serialises");
        write_atomic(path, &text)?;
        Ok(self.manifest)
    }
}

/// `<output>.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
