//! Run manifests and content hashes.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use hgae_core::analysis::SyntheticSpec;
use hgae_core::config::Config;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    /// Parsed command-line arguments.
    pub args: serde_json::Value,
    /// Effective hyperparameters after flag overrides.
    pub config: Option<Config>,
    pub synthetic_spec: Option<SyntheticSpec>,
    pub dataset_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl Manifest {
    pub fn new(command: &str, args: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_owned(),
            args,
            config: None,
            synthetic_spec: None,
            dataset_hash: None,
            checkpoint_hash: None,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            started_unix: now(),
            finished_unix: None,
        }
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        crate::write_file(&out.join(MANIFEST), s.as_bytes())
    }

    pub fn finish(mut self, out: &Path) -> Result<(), CliError> {
        self.finished_unix = Some(now());
        self.write(out)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 over the regular files of `dir` in name order, skipping any
/// manifest. Each file contributes its name, its length and its bytes.
pub fn dir_hash(dir: &Path) -> Result<String, CliError> {
    let read_err = |e: std::io::Error| CliError::Usage(format!("{}: {e}", dir.display()));
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(read_err)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file() && e.file_name() != MANIFEST)
        .map(|e| e.file_name())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for name in files {
        let bytes = fs::read(dir.join(&name)).map_err(read_err)?;
        h.update(name.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("sha256:{}", hex(&h.finalize())))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
