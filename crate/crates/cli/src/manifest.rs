use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub run_id: String,
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Tracks files written into one output directory.
pub struct Outputs {
    pub dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, bytes)?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(p)
    }

    pub fn finish(self, command: &str, config: BTreeMap<String, String>, seed: u64) -> CliResult<()> {
        let mut files = Vec::with_capacity(self.written.len());
        for name in &self.written {
            let bytes = std::fs::read(self.dir.join(name))?;
            files.push(FileEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let mut id = Sha256::new();
        id.update(command.as_bytes());
        for (k, v) in &config {
            id.update(format!("{k}={v}\n").as_bytes());
        }
        let run_id: String = id.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
        let manifest = Manifest {
            run_id,
            version: version(),
            command: command.to_string(),
            config,
            seeds: BTreeMap::from([("seed".to_string(), seed)]),
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(self.dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }
}
