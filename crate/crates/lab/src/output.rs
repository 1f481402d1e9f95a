//! One directory per run: CSV series, `summary.txt` and `manifest.toml`.
//! Everything except the manifest is a pure function of the configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{LabError, Result};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create the directory (and parents) and make sure it takes files.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| LabError::Config(format!("output directory {}: {e}", root.display())))?;
        let probe = root.join(".write-test");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| LabError::Config(format!("output directory {} is not writable: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Header from the field names of `S`, comma separated, floats in
    /// shortest round-trip form.
    pub fn write_csv<S: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| LabError::io(&path, e))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| LabError::io(path, e))
    }
}

/// Sorted names of the CSV files directly inside `dir`.
pub fn csv_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| LabError::io(dir, e))? {
        let entry = entry.map_err(|e| LabError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".csv") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Serialize)]
pub struct ManifestCheck {
    pub name: String,
    pub pass: bool,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub gate_slack: f64,
    pub started_unix: u64,
    pub total_seconds: f64,
    pub config: String,
    pub checks: Vec<ManifestCheck>,
}

impl Manifest {
    pub fn write(&self, dir: &RunDir) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))?;
        dir.write_text("manifest.toml", &text)
    }
}
