//! Output directories: report files plus a `<command>.manifest.json`
//! carrying input hashes, seeds and output hashes (no timestamps, so reruns
//! are byte-identical). Commands sharing a directory keep separate manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::file_sha256;
use crate::error::{LabError, Result};

pub struct OutputDir {
    root: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, Value>,
    outputs: BTreeMap<String, String>,
    extra: BTreeMap<String, Value>,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| LabError::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            outputs: BTreeMap::new(),
            extra: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn record_seed(&mut self, stream: &str, seed: impl Into<Value>) {
        self.seeds.insert(stream.to_string(), seed.into());
    }

    pub fn record(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    /// Writes `rel` under the root and records its hash.
    pub fn write(&mut self, rel: &str, body: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        fs::write(&path, body).map_err(|e| LabError::io(&path, e))?;
        self.outputs.insert(rel.to_string(), hex::encode(Sha256::digest(body)));
        Ok(path)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "inputs": self.inputs,
            "seeds": self.seeds,
            "outputs": self.outputs,
            "details": self.extra,
        });
        let path = self.root.join(format!("{}.manifest.json", self.command));
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, body).map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }
}
