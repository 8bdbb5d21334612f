use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn hashed(role: &str, path: &Path) -> CliResult<Self> {
        Ok(Self { role: role.to_string(), path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

/// Fields that change between otherwise identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct Volatile {
    pub started_unix_s: u64,
    pub wall_times_s: serde_json::Value,
}

/// Provenance record written next to a command's primary output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub config: serde_json::Value,
    pub results: serde_json::Value,
    pub warnings: Vec<String>,
    pub volatile: Volatile,
}

impl RunManifest {
    pub fn new(command: &str, started: SystemTime) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: serde_json::Value::Null,
            results: serde_json::Value::Null,
            warnings: Vec::new(),
            volatile: Volatile {
                started_unix_s: started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                wall_times_s: serde_json::Value::Null,
            },
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.inputs.push(FileRecord::hashed(role, path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.outputs.push(FileRecord::hashed(role, path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// `out.nii.gz` -> `out.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    out.with_file_name(format!("{stem}.manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_path_strips_nifti_suffixes() {
        assert_eq!(manifest_path(Path::new("a/vat.nii.gz")), Path::new("a/vat.manifest.json"));
        assert_eq!(manifest_path(Path::new("vat.nii")), Path::new("vat.manifest.json"));
        assert_eq!(manifest_path(Path::new("vat")), Path::new("vat.manifest.json"));
    }

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
