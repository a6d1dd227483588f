//! Run manifests: every command writes one next to its outputs, recording
//! the fully resolved configuration (all defaults materialized), the seeds
//! in play, input and output paths, tool version, and wall-clock time.  A
//! manifest doubles as a `--config` file: feeding it back reproduces the
//! run, bit for bit in deterministic mode.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// The command's resolved configuration, reusable via `--config`.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub jobs: usize,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, jobs: usize) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)
                .map_err(|e| CliError::Integrity(format!("serializing config: {e}")))?,
            seeds: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            jobs,
            wall_clock_seconds: 0.0,
        })
    }

    pub fn input(mut self, key: &str, path: impl AsRef<Path>) -> Self {
        self.inputs
            .insert(key.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn output(mut self, key: &str, path: impl AsRef<Path>) -> Self {
        self.outputs
            .insert(key.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seeds.push(seed);
        self
    }

    pub fn write(mut self, path: &Path, started: std::time::Instant) -> Result<(), CliError> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Integrity(format!("serializing manifest: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Resolve a command's configuration: defaults, overlaid by an optional
/// JSON file.  The file may be a bare config object (missing fields fall
/// back to defaults via `#[serde(default)]`) or a manifest from an earlier
/// run, in which case its embedded config is used after checking that it
/// belongs to the same subcommand.
pub fn resolve_config<T>(command: &str, path: Option<&Path>) -> Result<T, CliError>
where
    T: DeserializeOwned + Default,
{
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
    let config_value = match (value.get("command"), value.get("config")) {
        (Some(cmd), Some(cfg)) => {
            if cmd.as_str() != Some(command) {
                return Err(CliError::Usage(format!(
                    "manifest {} belongs to {:?}, not {command:?}",
                    path.display(),
                    cmd
                )));
            }
            cfg.clone()
        }
        _ => value,
    };
    serde_json::from_value(config_value)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Refuse to write into an existing non-empty directory unless forced;
/// creates the directory if needed.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        if !force && dir.read_dir()?.next().is_some() {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Refuse to overwrite an existing file unless forced.
pub fn prepare_out_file(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "output file {} exists (pass --force to overwrite)",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Sidecar manifest path for a file output: `traj.bin` -> `traj.manifest.json`.
pub fn sidecar_manifest_path(out: &Path) -> std::path::PathBuf {
    out.with_extension("manifest.json")
}
