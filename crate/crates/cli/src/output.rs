//! Output directory handling: report files, content digests and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of a report: what was measured, against what, and whether it held.
#[derive(Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub inputs_digest: String,
    pub observed: f64,
    pub budget: f64,
    /// `None` when the check is inconclusive.
    pub pass: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct InputEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    rng: &'a str,
    config: &'a serde_json::Value,
    inputs: Vec<InputEntry>,
    inputs_digest: &'a str,
    files: Vec<FileEntry>,
}

/// Collects the files of one command and writes the manifest last.
pub struct OutDir {
    root: PathBuf,
    command: String,
    config: serde_json::Value,
    inputs: Vec<InputEntry>,
    files: Vec<FileEntry>,
    pub inputs_digest: String,
}

impl OutDir {
    /// `inputs` are read and hashed; the digest of all inputs plus the config names the run.
    pub fn create(root: &Path, command: &str, config: serde_json::Value, inputs: &[(&str, &[u8])]) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut all = Sha256::new();
        let inputs: Vec<InputEntry> = inputs
            .iter()
            .map(|(path, bytes)| {
                all.update(bytes);
                InputEntry { path: path.to_string(), sha256: sha256_hex(bytes) }
            })
            .collect();
        all.update(serde_json::to_vec(&config)?);
        let inputs_digest = all.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(OutDir {
            root: root.to_path_buf(),
            command: command.into(),
            config,
            inputs,
            files: Vec::new(),
            inputs_digest,
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(FileEntry { name: name.into(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn check(&self, name: impl Into<String>, observed: f64, budget: f64, pass: Option<bool>) -> CheckRecord {
        CheckRecord { name: name.into(), inputs_digest: self.inputs_digest.clone(), observed, budget, pass, note: None }
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            tool: "osflow",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            rng: osflow::scenario::RNG_NAME,
            config: &self.config,
            inputs: self.inputs,
            inputs_digest: &self.inputs_digest,
            files: self.files,
        };
        let path = self.root.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
