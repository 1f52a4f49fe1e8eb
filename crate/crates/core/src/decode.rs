//! Temperature, top-k and nucleus filtering, sampling and n-sample generation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{DecodeState, ModelWeights};
use crate::tokenizer::Tokenizer;

const SUM_TOLERANCE: f64 = 1e-6;

/// Sampling settings. `temperature == 0` selects greedy decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub max_new_tokens: usize,
    pub n_samples: usize,
    pub stop_tokens: Vec<u32>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_k: None,
            top_p: Some(0.9),
            max_new_tokens: 64,
            n_samples: 3,
            stop_tokens: Vec::new(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig {
            temperature: 0.0,
            top_p: None,
            n_samples: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top_p must be in (0, 1], got {p}")));
            }
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty probability vector".into()));
    }
    if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidInput("probabilities must be finite and non-negative".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidInput(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// `softmax(logits / τ)` in f64.
pub fn apply_temperature(logits: &[f32], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() || logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("logits must be non-empty and finite".into()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| ((x as f64 - max) / temperature).exp())
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// One generated sample as text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt: String,
    pub sample_index: usize,
    pub text: String,
    pub token_count: usize,
    pub seconds: f64,
    pub stop: StopReason,
}

/// `bos` followed by the encoded prompt.
pub fn prompt_ids(tokenizer: &Tokenizer, prompt: &str) -> Vec<u32> {
    let mut ids = vec![tokenizer.specials().bos];
    ids.extend(tokenizer.encode(prompt));
    ids
}

/// Text-level generation. The tokenizer's eos always ends a sample, in
/// addition to any configured stop tokens.
pub fn generate<W: ModelWeights + ?Sized>(
    weights: &W,
    tokenizer: &Tokenizer,
    prompt: &str,
    config: &SamplerConfig,
) -> Result<Vec<Generation>> {
    if tokenizer.vocab_size() != weights.config().vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the model expects {}",
            tokenizer.vocab_size(),
            weights.config().vocab_size
        )));
    }
    let mut config = config.clone();
    let eos = tokenizer.specials().eos;
    if !config.stop_tokens.contains(&eos) {
        config.stop_tokens.push(eos);
    }
    let ids = prompt_ids(tokenizer, prompt);
    generate_ids(weights, &ids, &config)?
        .into_iter()
        .map(|s| {
            Ok(Generation {
                prompt: prompt.to_string(),
                sample_index: s.index,
                text: tokenizer.decode(&s.ids)?,
                token_count: s.ids.len(),
                seconds: s.seconds,
                stop: s.stop,
            })
        })
        .collect()
}

/// Token ids ordered by descending probability, smaller id first on ties.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn keep_renormalized(probs: &[f64], keep: &[usize]) -> Vec<f64> {
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in keep {
        out[i] = probs[i] / mass;
    }
    out
}

/// Zeroes all but the `k` most probable entries and renormalizes.
pub fn top_k_filter(probs: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidInput("top_k must be at least 1".into()));
    }
    check_distribution(probs)?;
    if k >= probs.len() {
        return Ok(probs.to_vec());
    }
    let order = ranked(probs);
    Ok(keep_renormalized(probs, &order[..k]))
}

/// Keeps the shortest descending-probability prefix whose mass reaches `p`
/// (the crossing token included) and renormalizes.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("top_p must be in (0, 1], got {p}")));
    }
    check_distribution(probs)?;
    if p >= 1.0 {
        return Ok(probs.to_vec());
    }
    let order = ranked(probs);
    let mut cum = 0.0;
    let mut n = order.len();
    for (i, &id) in order.iter().enumerate() {
        cum += probs[id];
        if cum >= p {
            n = i + 1;
            break;
        }
    }
    Ok(keep_renormalized(probs, &order[..n]))
}

/// Inverse-CDF draw over ascending ids.
pub fn sample_next<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<u32> {
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) || probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidInput("cannot sample from an all-zero distribution".into()));
    }
    let u = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return Ok(i as u32);
            }
        }
    }
    Ok(last as u32)
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Index of the largest logit, smaller id on ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the PRNG substream used by sample `index`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ splitmix64(index as u64)
}

/// Picks the next token from raw logits: temperature, then top-k, then top-p, then sampling.
pub fn choose_token<R: Rng + ?Sized>(logits: &[f32], config: &SamplerConfig, rng: &mut R) -> Result<u32> {
    if config.temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let mut probs = apply_temperature(logits, config.temperature)?;
    if let Some(k) = config.top_k {
        probs = top_k_filter(&probs, k)?;
    }
    if let Some(p) = config.top_p {
        probs = top_p_filter(&probs, p)?;
    }
    sample_next(&probs, rng)
}

/// Why a sample stopped growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopToken,
    MaxTokens,
    ContextLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdSample {
    pub index: usize,
    /// Generated ids, excluding the prompt and any stop token.
    pub ids: Vec<u32>,
    pub stop: StopReason,
    pub seconds: f64,
}

/// Generates `n_samples` continuations of `prompt` from independent PRNG substreams.
/// The prompt is consumed once and its cache shared by every sample.
pub fn generate_ids<W: ModelWeights + ?Sized>(
    weights: &W,
    prompt: &[u32],
    config: &SamplerConfig,
) -> Result<Vec<IdSample>> {
    config.validate()?;
    let ctx = weights.config().context_len;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must contain at least one token".into()));
    }
    if prompt.len() >= ctx {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            context_len: ctx,
        });
    }
    let start = Instant::now();
    let mut prefill = DecodeState::new(weights);
    let mut first_logits = Vec::new();
    for &id in prompt {
        first_logits = prefill.step(id)?;
    }
    let prefill_secs = start.elapsed().as_secs_f64();

    let mut out = Vec::with_capacity(config.n_samples);
    for index in 0..config.n_samples {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, index));
        let mut state = prefill.clone();
        let mut logits = first_logits.clone();
        let mut ids = Vec::new();
        let stop = loop {
            let next = choose_token(&logits, config, &mut rng)?;
            if config.stop_tokens.contains(&next) {
                break StopReason::StopToken;
            }
            ids.push(next);
            if ids.len() >= config.max_new_tokens {
                break StopReason::MaxTokens;
            }
            // prompt plus output never exceeds the context window
            if prompt.len() + ids.len() >= ctx {
                break StopReason::ContextLimit;
            }
            logits = state.step(next)?;
        };
        out.push(IdSample {
            index,
            ids,
            stop,
            seconds: prefill_secs + t0.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}
