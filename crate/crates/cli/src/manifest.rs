//! Run manifests and small file helpers shared by the subcommands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use xvl_core::errorsim::{read_corrupted, CorruptedStudy, CORRUPTED_SCHEMA};
use xvl_core::synthdata::{read_corpus, SyntheticStudy};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub git_describe: String,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: git_describe(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(mut self, p: impl Into<PathBuf>) -> Self {
        self.outputs.push(p.into());
        self
    }

    /// Creates `dir` if needed and writes the manifest into it, replacing
    /// any earlier one.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn load_corpus(path: &Path) -> Result<Vec<SyntheticStudy>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_corpus(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Reads either a plain corpus or a corrupted set. Plain studies come back
/// with no error record.
pub fn load_studies(path: &Path) -> Result<Vec<(SyntheticStudy, Option<CorruptedStudy>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.lines().next().map(str::trim) == Some(CORRUPTED_SCHEMA) {
        let set = read_corrupted(text.as_bytes()).with_context(|| format!("reading {}", path.display()))?;
        Ok(set.into_iter().map(|c| (c.study.clone(), Some(c))).collect())
    } else {
        let corpus = read_corpus(text.as_bytes()).with_context(|| format!("reading {}", path.display()))?;
        Ok(corpus.into_iter().map(|s| (s, None)).collect())
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
