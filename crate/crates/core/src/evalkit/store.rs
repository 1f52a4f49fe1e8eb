use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{HumanScore, RecordRef};
use crate::error::{Error, Result};

/// Append-only JSONL log of scores. A single handle serializes writers.
pub struct ScoreStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

struct Inner {
    file: File,
    next_id: u64,
}

impl ScoreStore {
    /// Opens or creates the log, checking existing lines.
    pub fn open(path: &Path) -> Result<Self> {
        let existing = if path.exists() { read_log(path)?.len() } else { 0 };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(ScoreStore {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner {
                file,
                next_id: existing as u64 + 1,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates and appends; an empty id becomes `score-NNNNNN`.
    pub fn append(&self, mut score: HumanScore) -> Result<HumanScore> {
        score.validate()?;
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if score.id.is_empty() {
            score.id = format!("score-{:06}", inner.next_id);
        }
        let mut line = serde_json::to_string(&score)?;
        line.push('\n');
        inner
            .file
            .write_all(line.as_bytes())
            .and_then(|_| inner.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        inner.next_id += 1;
        Ok(score)
    }

    /// Every record in append order.
    pub fn all(&self) -> Result<Vec<HumanScore>> {
        let _guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        read_log(&self.path)
    }
}

fn read_log(path: &Path) -> Result<Vec<HumanScore>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: HumanScore = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

/// Keeps the last score per (sample, evaluator); a rescore replaces the
/// earlier entry in place.
pub fn latest_scores(scores: &[HumanScore]) -> Vec<HumanScore> {
    let mut slot: HashMap<(RecordRef, &str), usize> = HashMap::new();
    let mut out: Vec<HumanScore> = Vec::new();
    for s in scores {
        match slot.get(&(s.record.clone(), s.evaluator_id.as_str())) {
            Some(&i) => out[i] = s.clone(),
            None => {
                slot.insert((s.record.clone(), &s.evaluator_id), out.len());
                out.push(s.clone());
            }
        }
    }
    out
}
