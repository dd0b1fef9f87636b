//! Small filesystem helpers that attach the path to every error.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Non-empty lines of a UTF-8 corpus file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Appends `text` to `path`, creating it (and writing `header` first) if needed.
pub fn append(path: &Path, header: &str, text: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        f.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
