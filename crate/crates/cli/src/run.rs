//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::CliError;

/// Default output root when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "LODE_OUT";
pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_file: Option<PathBuf>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// `<root>/<run_name>`, with root from `--out`, then the environment, then `runs`.
    pub fn create(command: &str, out: Option<&Path>, config_file: Option<&Path>, settings: &Settings) -> Result<Self, CliError> {
        let seed = settings.seed()?;
        let root = match out {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")),
        };
        let name = settings.opt("run_name").map(str::to_string).unwrap_or_else(|| format!("{command}-seed{seed}"));
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| CliError::msg(format!("cannot create {}: {e}", dir.display())))?;
        let manifest = RunManifest {
            command: command.to_string(),
            config_file: config_file.map(Path::to_path_buf),
            config: settings.values.clone(),
            seed,
            output_dir: dir.clone(),
            artifacts: BTreeMap::new(),
        };
        Ok(Self { dir, manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes `bytes` under the run directory and records its hash.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::msg(format!("cannot create {}: {e}", parent.display())))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::msg(format!("cannot write {}: {e}", p.display())))?;
        self.manifest.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(p)
    }

    /// Records an artifact written elsewhere (absolute paths are kept as is).
    pub fn record(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::msg(format!("cannot read {}: {e}", path.display())))?;
        let key = path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().into_owned();
        self.manifest.artifacts.insert(key, sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let p = self.dir.join(MANIFEST_NAME);
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| CliError::msg(e.to_string()))?;
        fs::write(&p, json).map_err(|e| CliError::msg(format!("cannot write {}: {e}", p.display())))?;
        Ok(self.dir)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
