//! Dataset manifests: one tab-separated line per pair with the mixture
//! path, clean path, SNR in dB, seed and noise kind. Paths are relative to
//! the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

pub const FILE_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub mixture: PathBuf,
    pub clean: PathBuf,
    pub snr_db: f64,
    pub seed: u64,
    /// Label used to group results, e.g. the noise type.
    pub kind: String,
}

pub fn render(entries: &[Entry]) -> String {
    let mut out = String::new();
    for e in entries {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", e.mixture.display(), e.clean.display(), e.snr_db, e.seed, e.kind).unwrap();
    }
    out
}

pub fn parse(text: &str) -> anyhow::Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 && f.len() != 5 {
            bail!("manifest line {}: expected 4 or 5 tab-separated fields, found {}", i + 1, f.len());
        }
        entries.push(Entry {
            mixture: f[0].into(),
            clean: f[1].into(),
            snr_db: f[2].parse().with_context(|| format!("manifest line {}: bad SNR", i + 1))?,
            seed: f[3].parse().with_context(|| format!("manifest line {}: bad seed", i + 1))?,
            kind: f.get(4).unwrap_or(&"all").to_string(),
        });
    }
    if entries.is_empty() {
        bail!("manifest has no entries");
    }
    Ok(entries)
}

/// Accepts either a manifest file or a directory containing `manifest.tsv`.
/// Returns the entries with paths resolved against the manifest directory.
pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Vec<Entry>> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path.push(FILE_NAME);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = parse(&text).with_context(|| format!("in {}", path.display()))?;
    for e in &mut entries {
        e.mixture = base.join(&e.mixture);
        e.clean = base.join(&e.clean);
    }
    Ok(entries)
}
