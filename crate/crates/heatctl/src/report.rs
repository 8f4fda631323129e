//! Artifact writers. Every run produces a directory with CSV tables and
//! a `summary.json` stamped with the config hash; numbers are written
//! with 17 significant digits so artifacts round-trip bit-exactly and
//! reruns can be compared with plain `diff`.

use serde_json::Value;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Fixed-format float for CSV cells: full f64 round-trip precision.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn temp_path(target: &Path) -> PathBuf {
    let mut name = target
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    target.with_file_name(name)
}

fn commit(target: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(target);
    let write = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    })();
    if let Err(e) = write {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    if let Err(e) = fs::rename(&tmp, target) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

/// Writes a CSV table atomically (temp file + rename). Every row must
/// match the header width.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Dimension {
                expected: header.len(),
                got: row.len(),
            });
        }
        let cells: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    commit(path, text.as_bytes())
}

/// Writes `summary.json` atomically.
pub fn write_summary(path: &Path, summary: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(summary)
        .map_err(|e| Error::Numeric(format!("summary serialization failed: {e}")))?;
    bytes.push(b'\n');
    commit(path, &bytes)
}

/// Prepares an output directory. A directory already stamped with a
/// *different* config hash is refused unless `force` is set, so stale
/// artifacts cannot silently mix with a new experiment.
pub fn guard_output_dir(dir: &Path, config_hash: &str, force: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let summary = dir.join("summary.json");
    if !summary.exists() || force {
        return Ok(());
    }
    let existing: Option<String> = fs::read_to_string(&summary)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v["config_hash"].as_str().map(str::to_owned));
    match existing {
        Some(h) if h == config_hash => Ok(()),
        Some(h) => Err(Error::Config(format!(
            "output directory {} holds artifacts for config {}..., current config is {}...; \
             pass --force to overwrite",
            dir.display(),
            &h[..12.min(h.len())],
            &config_hash[..12]
        ))),
        None => Err(Error::Config(format!(
            "output directory {} holds an unreadable summary.json; pass --force to overwrite",
            dir.display()
        ))),
    }
}
