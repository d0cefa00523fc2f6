//! Per-stage run manifests: the configuration a stage ran with and content
//! hashes of what it read and wrote. A stage whose manifest still matches is
//! skipped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::store::{read_json, write_json, Store};

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config: Value,
    /// Store-relative path (or a logical name) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Inputs, configuration and outputs were unchanged.
    Skipped,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub(crate) struct StageRun<'a> {
    store: &'a Store,
    stage: &'static str,
    config: Value,
    inputs: BTreeMap<String, String>,
}

impl<'a> StageRun<'a> {
    pub fn new(store: &'a Store, stage: &'static str, config: &impl Serialize) -> Self {
        Self { store, stage, config: serde_json::to_value(config).expect("config serializes"), inputs: BTreeMap::new() }
    }

    fn key(&self, path: &Path) -> String {
        let rel = path.strip_prefix(self.store.root()).unwrap_or(path);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(self.key(path), digest);
        Ok(())
    }

    pub fn input_digest(&mut self, name: &str, digest: String) {
        self.inputs.insert(name.to_string(), digest);
    }

    fn run_path(&self) -> PathBuf {
        self.store.stage_dir(self.stage).join(RUN_FILE)
    }

    /// True when the previous run used the same configuration and inputs and
    /// its outputs are still intact.
    pub fn is_current(&self) -> bool {
        let Ok(prev) = read_json::<RunManifest>(&self.run_path()) else {
            return false;
        };
        prev.stage == self.stage
            && prev.config == self.config
            && prev.inputs == self.inputs
            && prev
                .outputs
                .iter()
                .all(|(rel, digest)| sha256_file(&self.store.root().join(rel)).is_ok_and(|d| &d == digest))
    }

    pub fn finish(self, outputs: &[PathBuf]) -> Result<RunManifest> {
        let mut out = BTreeMap::new();
        for p in outputs {
            out.insert(self.key(p), sha256_file(p)?);
        }
        let run = RunManifest {
            stage: self.stage.to_string(),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: out,
        };
        write_json(&self.run_path(), &run)?;
        Ok(run)
    }
}
