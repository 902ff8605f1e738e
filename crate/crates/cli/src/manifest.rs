//! Per-run provenance record.

use crate::error::CliError;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Effective configuration after merging the config file and flags.
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data("io", "Io", format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects inputs and outputs while a subcommand runs.
pub struct Recorder {
    command: String,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), started: Instant::now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn hash_all(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
        paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
    }

    pub fn finish(self, seed: Option<u64>, config: serde_json::Value) -> Result<RunManifest, CliError> {
        Ok(RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            threads: rayon::current_num_threads(),
            config,
            inputs: Self::hash_all(&self.inputs)?,
            outputs: Self::hash_all(&self.outputs)?,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }
}
