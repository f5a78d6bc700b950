use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use kvcore::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Entry {
    pub path: String,
    pub sha256: String,
}

/// Record of one run: the resolved parameters, their hash, and a hash of
/// every file read or written. Paths are relative, so runs in different
/// directories produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<Entry>,
    pub outputs: Vec<Entry>,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &'static str, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let canonical = serde_json::to_vec(&config)?;
        Ok(Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_sha256: hex::encode(Sha256::digest(&canonical)),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Inputs are recorded by file name.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        self.inputs.push(Entry {
            path: name,
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    /// Outputs are recorded relative to the run's output directory.
    pub fn output(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs.push(Entry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hash_file(path)?,
        });
        Ok(())
    }

    /// Writes `manifest.json` into `root` and returns its text.
    pub fn finish(self, root: &Path) -> Result<String> {
        let text = serde_json::to_string_pretty(&self)? + "\n";
        let path: PathBuf = root.join("manifest.json");
        std::fs::write(&path, &text).map_err(|e| Error::from(e).in_file(path))?;
        Ok(text)
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = match f.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::from(e).in_file(path)),
        };
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}
