//! Corpus cleaning, deduplication and train/validation splitting.

mod clean;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use clean::{clean_text, split_sentences, CleanConfig, Rule};

use crate::error::{Error, Result};
use crate::tokenizer::{default_profiles, detect_script};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub language: String,
    pub script: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.95,
            seed: 0,
        }
    }
}

/// Script covering most non-whitespace codepoints of `text` (`Other` if none).
pub fn dominant_script(text: &str) -> String {
    detect_script(text, &default_profiles())
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or_else(|| "Other".to_string(), |(s, _)| s)
}

/// Cleans one document; with sentence splitting enabled each sentence is
/// cleaned separately and the survivors are joined by single spaces.
pub fn clean_document(doc: &RawDocument, config: &CleanConfig) -> Result<RawDocument> {
    let text = if config.enabled(Rule::SentenceSplit) {
        split_sentences(&doc.text, &doc.script, config)?
            .iter()
            .map(|s| clean_text(s, config))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        clean_text(&doc.text, config)
    };
    Ok(RawDocument { text, ..doc.clone() })
}

/// Drops documents whose text was already seen; first occurrence wins.
pub fn deduplicate(docs: Vec<RawDocument>) -> Vec<RawDocument> {
    let mut seen = HashSet::new();
    docs.into_iter().filter(|d| seen.insert(d.text.clone())).collect()
}

/// Line-level variant: drops lines seen anywhere earlier in the corpus and
/// then documents left empty.
pub fn deduplicate_lines(docs: Vec<RawDocument>) -> Vec<RawDocument> {
    let mut seen = HashSet::new();
    docs.into_iter()
        .filter_map(|d| {
            let kept: Vec<&str> = d.text.lines().filter(|l| seen.insert(l.to_string())).collect();
            (!kept.is_empty()).then(|| RawDocument {
                text: kept.join("\n"),
                ..d.clone()
            })
        })
        .collect()
}

/// Seeded document shuffle followed by a cut at `round(fraction · n)`.
pub fn split_train_val(
    docs: Vec<RawDocument>,
    spec: &SplitSpec,
) -> Result<(Vec<RawDocument>, Vec<RawDocument>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1], got {}",
            spec.train_fraction
        )));
    }
    if docs.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty corpus".into()));
    }
    let n_train = (spec.train_fraction * docs.len() as f64).round() as usize;
    let mut docs = docs;
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let val = docs.split_off(n_train.min(docs.len()));
    Ok((docs, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub codepoints: usize,
    pub bytes: usize,
    /// Non-whitespace codepoints per script.
    pub scripts: BTreeMap<String, usize>,
    /// The most frequent codepoints, `U+XXXX` keyed.
    pub top_codepoints: Vec<(String, usize)>,
    pub input_documents: usize,
    pub dedup_ratio: f64,
}

/// Statistics of a cleaned corpus; `input_documents` is the count before dedup.
pub fn corpus_stats(docs: &[RawDocument], input_documents: usize) -> CorpusStats {
    let profiles = default_profiles();
    let mut scripts: BTreeMap<String, usize> = BTreeMap::new();
    let mut hist: BTreeMap<char, usize> = BTreeMap::new();
    let (mut cps, mut bytes) = (0, 0);
    for d in docs {
        bytes += d.text.len();
        for c in d.text.chars() {
            cps += 1;
            if !c.is_whitespace() {
                *scripts
                    .entry(crate::tokenizer::script_of(c, &profiles).to_string())
                    .or_default() += 1;
                *hist.entry(c).or_default() += 1;
            }
        }
    }
    let mut top: Vec<(char, usize)> = hist.into_iter().collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    CorpusStats {
        documents: docs.len(),
        codepoints: cps,
        bytes,
        scripts,
        top_codepoints: top
            .into_iter()
            .take(32)
            .map(|(c, n)| (format!("U+{:04X}", c as u32), n))
            .collect(),
        input_documents,
        dedup_ratio: if input_documents == 0 {
            0.0
        } else {
            1.0 - docs.len() as f64 / input_documents as f64
        },
    }
}

/// Reads documents from a directory of text files (one document per file,
/// sorted by name), a `.jsonl` file of records, or a plain text file with
/// one document per line.
pub fn load_documents(path: impl AsRef<Path>, language: &str) -> Result<Vec<RawDocument>> {
    let path = path.as_ref();
    let make = |id: String, text: String| RawDocument {
        script: dominant_script(&text),
        id,
        language: language.to_string(),
        text,
    };
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        return entries
            .into_iter()
            .map(|p| {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let id = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                Ok(make(id, text))
            })
            .collect();
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if jsonl {
            docs.push(serde_json::from_str(&line)?);
        } else {
            docs.push(make(format!("{}", i + 1), line));
        }
    }
    Ok(docs)
}

pub fn write_jsonl(path: impl AsRef<Path>, docs: &[RawDocument]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for d in docs {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
