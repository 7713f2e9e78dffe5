//! Staged file output: everything is written to temporary siblings first
//! and renamed into place only once every file is ready.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("cannot write `{}`: {e}", path.display()))
}

#[derive(Debug, Default)]
pub struct Staged {
    pending: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let tmp = path.with_file_name(name);
        fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
        self.pending.push((tmp, path.to_path_buf()));
        Ok(())
    }

    pub fn csv<R: Serialize>(&mut self, path: &Path, rows: &[R]) -> Result<(), CliError> {
        self.bytes(path, &csv_bytes(rows)?)
    }

    pub fn json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<(), CliError> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.bytes(path, text.as_bytes())
    }

    /// Move every staged file into place.
    pub fn commit(mut self) -> Result<(), CliError> {
        for (tmp, path) in std::mem::take(&mut self.pending) {
            fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = fs::remove_file(tmp);
        }
    }
}

/// Rows as CSV with a header line.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}
