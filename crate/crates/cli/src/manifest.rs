//! Run manifests: everything needed to re-run a command and check that it
//! reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gridloc::sync::ClockModel;

use crate::config::Config;
use crate::{CliError, Command};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Command with absolute input paths.
    pub command: Command,
    /// Absolute path of the `--grid` input, when one was given.
    pub grid: Option<PathBuf>,
    /// Effective configuration after flag overrides.
    pub config: Config,
    pub seed: u64,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// SHA-256 of every grid container read or written.
    pub grid_digests: BTreeMap<String, String>,
    pub clock_models: Vec<ClockModel>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Output directory that records the digest of every file written to it.
pub struct Outputs {
    dir: PathBuf,
    pub files: BTreeMap<String, String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Records a file some other writer already produced.
    pub fn record(&mut self, name: &str) -> Result<(), CliError> {
        let digest = file_digest(&self.path(name))?;
        self.files.insert(name.to_string(), digest);
        Ok(())
    }
}
