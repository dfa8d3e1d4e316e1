//! Output files: atomic writes, hashing and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects output files and writes each through a temporary file that is
/// renamed into place.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let target = self.path(name);
        write_atomic(&target, bytes)?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(target)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::numerical(format!("cannot serialise {name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Names and hashes of every file written so far.
    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.written
    }
}

pub fn write_atomic(target: &Path, bytes: &[u8]) -> CliResult<()> {
    let file_name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = target.with_file_name(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, target).map_err(|e| CliError::io(target, e))
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub vpmap_version: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, jobs: usize, config_text: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            seed,
            jobs,
            vpmap_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records an input file by its hash.
    pub fn add_input(&mut self, label: &str, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.insert(label.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish(mut self, out: &mut OutputDir) -> CliResult<PathBuf> {
        self.outputs = out.files().clone();
        out.write_json("manifest.json", &self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("a.txt", b"hello").unwrap();
        out.write("a.txt", b"world").unwrap();
        assert_eq!(fs::read(dir.path().join("a.txt")).unwrap(), b"world");
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert_eq!(out.files()["a.txt"], sha256_hex(b"world"));
    }
}
