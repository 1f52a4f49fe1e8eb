//! Perplexity reports and the human-evaluation data model.

mod reference;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{Generation, SamplerConfig};
use crate::error::{Error, Result};
use crate::lm::{forward_incremental, nll, perplexity, ModelWeights};
use crate::tokenizer::Tokenizer;

pub use reference::{reference_manifest, reference_table, ReferenceEntry, ReferenceTable};
pub use store::{latest_scores, ScoreStore};

/// Highest score on the human-evaluation scale (lowest is 0).
pub const SCORE_MAX: f64 = 5.0;

/// Generations scored per prompt unless configured otherwise.
pub const DEFAULT_TOP_N: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub model_id: String,
    /// Predicted tokens.
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    pub elapsed_seconds: f64,
}

/// Sum of next-token NLLs over `ids` and the number of predicted tokens.
/// Longer streams are cut into context-sized windows that overlap by one
/// token, so every token after the first is predicted exactly once.
pub fn stream_nll<W: ModelWeights + ?Sized>(weights: &W, ids: &[u32]) -> Result<(f64, usize)> {
    let ctx = weights.config().context_len;
    let (mut sum, mut count) = (0.0, 0);
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + ctx + 1).min(ids.len());
        let logits = forward_incremental(weights, &ids[start..end - 1])?;
        for (row, &tgt) in logits.iter().zip(&ids[start + 1..end]) {
            sum += nll(row, tgt as usize);
        }
        count += end - 1 - start;
        start = end - 1;
    }
    Ok((sum, count))
}

/// Token-weighted validation perplexity. Each document is encoded with a
/// leading bos and scored on its own.
pub fn perplexity_report<W: ModelWeights + ?Sized, S: AsRef<str>>(
    model_id: &str,
    weights: &W,
    tokenizer: &Tokenizer,
    docs: &[S],
) -> Result<PerplexityReport> {
    if tokenizer.vocab_size() != weights.config().vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the model expects {}",
            tokenizer.vocab_size(),
            weights.config().vocab_size
        )));
    }
    let t0 = Instant::now();
    let (mut sum, mut count) = (0.0, 0);
    for doc in docs {
        let mut ids = vec![tokenizer.specials().bos];
        ids.extend(tokenizer.encode(doc.as_ref()));
        let (s, c) = stream_nll(weights, &ids)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::InvalidInput("validation corpus has no tokens to predict".into()));
    }
    let mean_nll = sum / count as f64;
    Ok(PerplexityReport {
        model_id: model_id.to_string(),
        tokens: count,
        mean_nll,
        perplexity: perplexity(mean_nll)?,
        elapsed_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Perplexity of an add-one smoothed unigram model fitted on `train`,
/// evaluated on `val[1..]` (the positions a language model predicts).
pub fn unigram_perplexity(train: &[u32], val: &[u32], vocab_size: usize) -> Result<f64> {
    if val.len() < 2 || vocab_size == 0 {
        return Err(Error::InvalidInput("unigram baseline needs two validation tokens and a vocabulary".into()));
    }
    let mut counts = vec![1.0f64; vocab_size];
    for &t in train {
        *counts
            .get_mut(t as usize)
            .ok_or(Error::TokenOutOfRange { id: t, vocab_size })? += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let mut nll = 0.0;
    for &t in &val[1..] {
        let c = counts.get(t as usize).ok_or(Error::TokenOutOfRange { id: t, vocab_size })?;
        nll -= (c / total).ln();
    }
    perplexity(nll / (val.len() - 1) as f64)
}

/// Identifies one generated sample.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordRef {
    pub prompt_id: String,
    pub model_id: String,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub prompt: String,
    pub model_id: String,
    pub sample_index: usize,
    pub text: String,
    pub sampler: SamplerConfig,
}

impl GenerationRecord {
    pub fn reference(&self) -> RecordRef {
        RecordRef {
            prompt_id: self.prompt_id.clone(),
            model_id: self.model_id.clone(),
            sample_index: self.sample_index,
        }
    }
}

pub fn records_from_generations(
    prompt_id: &str,
    model_id: &str,
    generations: &[Generation],
    sampler: &SamplerConfig,
) -> Vec<GenerationRecord> {
    generations
        .iter()
        .map(|g| GenerationRecord {
            prompt_id: prompt_id.to_string(),
            prompt: g.prompt.clone(),
            model_id: model_id.to_string(),
            sample_index: g.sample_index,
            text: g.text.clone(),
            sampler: sampler.clone(),
        })
        .collect()
}

/// Errors on a repeated (prompt, model, sample) triple.
pub fn check_unique_records(records: &[GenerationRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        let key = r.reference();
        if !seen.insert(key.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate generation record for prompt {:?}, model {:?}, sample {}",
                key.prompt_id, key.model_id, key.sample_index
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Grammar,
    Coherence,
    Creativity,
    Factuality,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Grammar, Metric::Coherence, Metric::Creativity, Metric::Factuality];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Grammar => "grammar",
            Metric::Coherence => "coherence",
            Metric::Creativity => "creativity",
            Metric::Factuality => "factuality",
        }
    }
}

/// One evaluator's scores for one sample. Factuality may be 0 when the
/// premise could not be checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanScore {
    /// Assigned by the store when empty.
    #[serde(default)]
    pub id: String,
    pub record: RecordRef,
    pub grammar: f64,
    pub coherence: f64,
    pub creativity: f64,
    pub factuality: f64,
    pub evaluator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl HumanScore {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Grammar => self.grammar,
            Metric::Coherence => self.coherence,
            Metric::Creativity => self.creativity,
            Metric::Factuality => self.factuality,
        }
    }

    /// Metrics outside [0, 5] (NaN included).
    pub fn invalid_metrics(&self) -> Vec<Metric> {
        Metric::ALL
            .into_iter()
            .filter(|&m| !(0.0..=SCORE_MAX).contains(&self.get(m)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.invalid_metrics();
        if let Some(&m) = bad.first() {
            let fields: Vec<String> = bad.iter().map(|m| format!("{}={}", m.name(), self.get(*m))).collect();
            return Err(Error::InvalidInput(format!(
                "scores must lie in [0, {SCORE_MAX}]: {} (first bad field `{}`)",
                fields.join(", "),
                m.name()
            )));
        }
        if self.evaluator_id.is_empty() {
            return Err(Error::InvalidInput("evaluator_id is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    pub grammar: f64,
    pub coherence: f64,
    pub creativity: f64,
    pub factuality: f64,
}

impl ModelScores {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Grammar => self.grammar,
            Metric::Coherence => self.coherence,
            Metric::Creativity => self.creativity,
            Metric::Factuality => self.factuality,
        }
    }

    fn from_fn(model: &str, mut f: impl FnMut(Metric) -> f64) -> Self {
        ModelScores {
            model: model.to_string(),
            grammar: f(Metric::Grammar),
            coherence: f(Metric::Coherence),
            creativity: f(Metric::Creativity),
            factuality: f(Metric::Factuality),
        }
    }
}

/// Per-model aggregates. `provenance` lists the ids of the scores behind each row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<ModelScores>,
    #[serde(default)]
    pub provenance: BTreeMap<String, Vec<String>>,
}

const CSV_HEADER: [&str; 5] = ["model", "grammar", "coherence", "creativity", "factuality"];

impl EvalTable {
    pub fn row(&self, model: &str) -> Option<&ModelScores> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Header plus one row per model, five decimals per value.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.model.clone()];
            rec.extend(Metric::ALL.iter().map(|&m| format!("{:.5}", r.get(m))));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses [`EvalTable::to_csv`] output. Provenance is not part of the format.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::InvalidInput(format!("unexpected csv header {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let mut vals = [0.0; 4];
            for (k, v) in vals.iter_mut().enumerate() {
                *v = rec[k + 1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("row {}: bad number {:?}", i + 1, &rec[k + 1])))?;
            }
            rows.push(ModelScores {
                model: rec[0].to_string(),
                grammar: vals[0],
                coherence: vals[1],
                creativity: vals[2],
                factuality: vals[3],
            });
        }
        Ok(EvalTable {
            rows,
            provenance: BTreeMap::new(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Mean over prompts of the per-prompt mean over `n` samples, each sample
/// averaged over its evaluators. Every evaluator of a (model, prompt) pair
/// must have scored samples `0..n` exactly once.
pub fn aggregate_scores(scores: &[HumanScore], n: usize) -> Result<EvalTable> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    // model -> prompt -> evaluator -> sample -> score
    type Grid<'a> = BTreeMap<&'a str, BTreeMap<&'a str, BTreeMap<&'a str, BTreeMap<usize, &'a HumanScore>>>>;
    let mut grid: Grid = BTreeMap::new();
    for s in scores {
        s.validate()?;
        let r = &s.record;
        if r.sample_index >= n {
            return Err(Error::InvalidInput(format!(
                "score {:?} refers to sample {} but only {n} are aggregated",
                s.id, r.sample_index
            )));
        }
        let slot = grid
            .entry(&r.model_id)
            .or_default()
            .entry(&r.prompt_id)
            .or_default()
            .entry(&s.evaluator_id)
            .or_default();
        if slot.insert(r.sample_index, s).is_some() {
            return Err(Error::InvalidInput(format!(
                "evaluator {:?} scored model {:?}, prompt {:?}, sample {} twice",
                s.evaluator_id, r.model_id, r.prompt_id, r.sample_index
            )));
        }
    }

    let mut gaps = Vec::new();
    for (model, prompts) in &grid {
        for (prompt, evaluators) in prompts {
            for (evaluator, samples) in evaluators {
                let missing: Vec<usize> = (0..n).filter(|i| !samples.contains_key(i)).collect();
                if !missing.is_empty() {
                    gaps.push(format!("{model}/{prompt}/{evaluator}: samples {missing:?}"));
                }
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::MissingScores(gaps.join("; ")));
    }

    let mut table = EvalTable::default();
    for (model, prompts) in &grid {
        let row = ModelScores::from_fn(model, |m| {
            let per_prompt: f64 = prompts
                .values()
                .map(|evaluators| {
                    let per_sample: f64 = (0..n)
                        .map(|i| evaluators.values().map(|s| s[&i].get(m)).sum::<f64>() / evaluators.len() as f64)
                        .sum();
                    per_sample / n as f64
                })
                .sum();
            per_prompt / prompts.len() as f64
        });
        let mut ids: Vec<String> = prompts
            .values()
            .flat_map(|e| e.values())
            .flat_map(|s| s.values())
            .map(|s| s.id.clone())
            .collect();
        ids.sort();
        table.provenance.insert(model.to_string(), ids);
        table.rows.push(row);
    }
    Ok(table)
}

/// Min-max normalization of `a` into [0, 1].
pub fn normalize_score(a: f64, a_min: f64, a_max: f64) -> Result<f64> {
    if !(a_min.is_finite() && a_max.is_finite() && a_max > a_min) {
        return Err(Error::InvalidInput(format!("degenerate range [{a_min}, {a_max}]")));
    }
    if !(a_min..=a_max).contains(&a) {
        return Err(Error::InvalidInput(format!("{a} lies outside [{a_min}, {a_max}]")));
    }
    Ok((a - a_min) / (a_max - a_min))
}
