//! Output-directory bookkeeping. Each verb writes its artifacts through
//! one of these so the run can close with a manifest naming every file
//! and its SHA-256.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use voicespace_core::{CoreError, Result};

pub struct RunDir {
    root: PathBuf,
    entries: Vec<(String, String)>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root).map_err(|e| CoreError::Io(format!("{}: {e}", root.display())))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Writes `name` under the run directory and records its checksum.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))?;
        self.entries.push((name.to_string(), hex_sha256(bytes)));
        Ok(())
    }

    /// Records a file a library call already wrote into the run
    /// directory.
    pub fn absorb(&mut self, name: &str) -> Result<()> {
        let path = self.root.join(name);
        let bytes =
            fs::read(&path).map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))?;
        self.entries.push((name.to_string(), hex_sha256(&bytes)));
        Ok(())
    }

    /// Closes the run: writes `manifest.txt` listing every recorded
    /// file in write order.
    pub fn finish(self) -> Result<()> {
        let mut manifest = String::new();
        for (name, digest) in &self.entries {
            let _ = writeln!(manifest, "{digest}  {name}");
        }
        let path = self.root.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}
