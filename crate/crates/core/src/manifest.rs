//! Per-stage manifests recording what a stage consumed and produced.
//!
//! A stage is up to date when its manifest exists, the configuration
//! fingerprint and every input hash still match, and every recorded output
//! is present with the recorded hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::CallStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub toolkit_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub backend: String,
    /// Input path -> SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub calls: CallStats,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn hash_files(paths: &[PathBuf]) -> std::io::Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), hash_file(p)?))).collect()
}

impl Manifest {
    pub fn path_for(dir: &Path, stage: &str) -> PathBuf {
        dir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn load(dir: &Path, stage: &str) -> Option<Self> {
        let bytes = fs::read(Self::path_for(dir, stage)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        let p = Self::path_for(dir, &self.stage);
        fs::create_dir_all(p.parent().expect("manifest path has a parent"))?;
        let mut bytes = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        fs::write(p, bytes)
    }

    /// Whether this manifest still describes the given configuration and
    /// inputs, with all outputs intact.
    pub fn is_current(&self, config_hash: &str, inputs: &BTreeMap<String, String>) -> bool {
        self.config_hash == config_hash
            && &self.inputs == inputs
            && self.outputs.iter().all(|(p, h)| hash_file(Path::new(p)).map(|got| &got == h).unwrap_or(false))
    }
}
