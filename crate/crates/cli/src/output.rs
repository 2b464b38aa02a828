use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::error::{CliError, Result};

/// Output directory whose files are replaced atomically.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write to a temporary file in the destination directory, then rename.
    pub fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let dest = self.path(name);
        let dir = dest.parent().unwrap_or(Path::new(".")).to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
        tmp.write_all(contents).map_err(|e| CliError::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
        tmp.persist(&dest).map_err(|e| CliError::io(&dest, e.error))?;
        Ok(dest)
    }

    pub fn write_with(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::io(self.path(name), e))?;
        self.write(name, &buf)
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::io(self.path(name), std::io::Error::other(e)))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}
