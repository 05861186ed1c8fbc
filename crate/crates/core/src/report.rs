//! CSV emission and all-or-nothing output directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Removes every file it tracked unless `commit` is called, so a failed
/// command leaves no partial outputs behind.
#[derive(Debug, Default)]
pub struct OutputGuard {
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        OutputGuard::default()
    }

    /// Registers `path` for cleanup and returns it.
    pub fn track(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Shortest representation that round-trips; never uses an exponent.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Writes a header row and the given records.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != header.len() {
            return Err(Error::Format(format!(
                "{}: row {i} has {} fields, expected {}",
                path.display(),
                r.len(),
                header.len()
            )));
        }
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
