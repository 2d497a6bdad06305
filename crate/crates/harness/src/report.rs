//! Where reports and archived counterexamples go on disk.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const DATA_DIR_ENV: &str = "CBT_DATA_DIR";

/// `$CBT_DATA_DIR`, or `./cbt-data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cbt-data"))
}

/// Writes `value` as pretty JSON to `dir/name.json`.
pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.json"));
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

pub fn reports_dir(root: &Path) -> PathBuf {
    root.join("reports")
}

pub fn counterexamples_dir(root: &Path) -> PathBuf {
    root.join("counterexamples")
}
