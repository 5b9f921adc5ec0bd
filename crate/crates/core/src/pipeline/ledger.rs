//! Append-only record of stage progress, one JSON object per line.
//!
//! A unit of work (a stage on one shard, or a corpus-level stage) is done
//! when its latest entry says `done`, the recorded input hash matches the
//! current input and the output on disk still hashes to the recorded value.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: Stage,
    /// `None` for corpus-level stages.
    pub shard: Option<u32>,
    pub status: EntryStatus,
    pub input_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_hash: Option<String>,
    /// Number of shards produced; set by `collect`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shards: Option<u32>,
}

#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    entries: Mutex<Vec<LedgerEntry>>,
    file: Mutex<File>,
}

fn parse_entries(path: &Path, text: &str) -> Result<Vec<LedgerEntry>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => out.push(e),
            // A torn final line is what a crash during append leaves behind.
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                tracing::warn!(path = %path.display(), "ignoring truncated ledger line");
            }
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

impl Ledger {
    /// Opens the ledger, creating it if needed.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        let entries = parse_entries(path, &text)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if !text.is_empty() && !text.ends_with('\n') {
            // Drop the torn line so later appends start on a clean line.
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    /// Reads an existing ledger without opening it for writing.
    pub fn read(path: &Path) -> Result<Vec<LedgerEntry>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_entries(path, &text)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: LedgerEntry) -> Result<()> {
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        {
            let mut f = self.file.lock().expect("ledger file lock");
            f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
            f.sync_data().map_err(|e| Error::io(&self.path, e))?;
        }
        self.entries.lock().expect("ledger lock").push(entry);
        Ok(())
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock").clone()
    }

    pub fn latest(&self, stage: Stage, shard: Option<u32>) -> Option<LedgerEntry> {
        latest(&self.entries.lock().expect("ledger lock"), stage, shard).cloned()
    }
}

pub fn latest(entries: &[LedgerEntry], stage: Stage, shard: Option<u32>) -> Option<&LedgerEntry> {
    entries
        .iter()
        .rev()
        .find(|e| e.stage == stage && e.shard == shard)
}

/// The latest `done` entry of a unit, if that is its latest entry.
pub fn latest_done(entries: &[LedgerEntry], stage: Stage, shard: Option<u32>) -> Option<&LedgerEntry> {
    latest(entries, stage, shard).filter(|e| e.status == EntryStatus::Done)
}
