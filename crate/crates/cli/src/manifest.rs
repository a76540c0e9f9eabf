use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use simat_core::atomic_write;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to every output so a run can be reproduced.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_file: Option<String>,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Unix seconds; `SOURCE_DATE_EPOCH` overrides the clock.
    pub timestamp: u64,
    pub notes: BTreeMap<String, serde_json::Value>,
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {}", path.display(), e)))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, config_file: Option<&Path>, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_file: config_file.map(|p| p.display().to_string()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: timestamp(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Digests every regular file directly inside `dir`, except manifests.
    pub fn input_dir(&mut self, dir: &Path) -> Result<(), CliError> {
        for path in dir_files(dir)? {
            self.input(&path)?;
        }
        Ok(())
    }

    pub fn note<V: Serialize>(&mut self, key: &str, value: V) {
        self.notes
            .insert(key.to_string(), serde_json::to_value(value).expect("note serializes"));
    }

    /// Digests the files of `out_dir` and writes the manifest there.
    pub fn write(mut self, out_dir: &Path) -> Result<(), CliError> {
        for path in dir_files(out_dir)? {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            self.outputs.insert(name, sha256_file(&path)?);
        }
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        atomic_write(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }
}

fn dir_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("{}: {}", dir.display(), e)))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    Ok(files)
}
