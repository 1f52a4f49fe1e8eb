//! Pretraining and supervised fine-tuning loops.

mod batches;
mod checkpoint;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batches::{make_batches, Batch, BatchIter, RngState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, lr_at};

use crate::error::{Error, Result};
use crate::lm::{batch_loss, loss_and_grad, perplexity, ModelConfig, Parameters};

/// Mixed into the seed of the fixed validation windows.
const EVAL_SALT: u64 = 0x5eed_0f_e7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Validation runs at every multiple of this many steps.
    pub eval_interval_k: u64,
    pub eval_batches: usize,
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Floor of the cosine schedule as a fraction of `learning_rate`.
    pub min_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 100,
            max_steps: 2000,
            batch_size: 16,
            seq_len: 128,
            eval_interval_k: 1000,
            eval_batches: 8,
            checkpoint_every: 1000,
            grad_clip: 1.0,
            seed: 0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            min_lr_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.max_steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return bad("max_steps, batch_size and seq_len must be positive".into());
        }
        if self.eval_interval_k == 0 || self.eval_batches == 0 || self.checkpoint_every == 0 {
            return bad("eval_interval_k, eval_batches and checkpoint_every must be positive".into());
        }
        if self.seq_len > model.context_len {
            return bad(format!(
                "seq_len {} exceeds the model context length {}",
                self.seq_len, model.context_len
            ));
        }
        if self.eval_interval_k > self.max_steps {
            return bad(format!(
                "eval_interval_k {} exceeds max_steps {}",
                self.eval_interval_k, self.max_steps
            ));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("weight_decay must be >= 0 and min_lr_ratio in [0, 1]".into());
        }
        Ok(())
    }
}

/// Everything besides the weights needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub rng: RngState,
    pub m: Parameters<f32>,
    pub v: Parameters<f32>,
}

impl TrainState {
    pub fn new(params: &Parameters<f32>, seed: u64) -> Self {
        TrainState {
            step: 0,
            best_val_loss: None,
            rng: RngState::capture(seed, &ChaCha8Rng::seed_from_u64(seed)),
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub perplexity: f64,
    pub lr: f64,
    pub elapsed_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoints (`step-NNNNNNNN.plmf`, `best.plmf`) and `metrics.jsonl` go here.
    pub out_dir: Option<PathBuf>,
    /// Continue from a saved state instead of starting at step 0.
    pub resume: Option<TrainState>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub state: TrainState,
    pub log: Vec<MetricRecord>,
    /// SFT sequences dropped because no target position was masked in.
    pub skipped: usize,
}

impl TrainOutcome {
    pub fn train_losses(&self) -> Vec<f64> {
        self.log.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect()
    }

    pub fn val_records(&self) -> Vec<&MetricRecord> {
        self.log.iter().filter(|r| r.split == Split::Val).collect()
    }
}

/// Concatenates documents as `bos doc eos` runs for window sampling.
pub fn document_stream<S: AsRef<str>>(tokenizer: &crate::tokenizer::Tokenizer, docs: &[S]) -> Vec<u32> {
    let sp = tokenizer.specials();
    let mut out = Vec::new();
    for d in docs {
        out.push(sp.bos);
        out.extend(tokenizer.encode(d.as_ref()));
        out.push(sp.eos);
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct TokenizedCorpus<'a> {
    pub train: &'a [u32],
    pub val: &'a [u32],
}

struct MetricsSink {
    file: Option<std::fs::File>,
    path: PathBuf,
    log: Vec<MetricRecord>,
}

impl MetricsSink {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let (file, path) = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                (Some(f), path)
            }
            None => (None, PathBuf::new()),
        };
        Ok(MetricsSink {
            file,
            path,
            log: Vec::new(),
        })
    }

    fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_vec(&r)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        }
        self.log.push(r);
        Ok(())
    }
}

fn non_finite(grads: &Parameters<f32>, params: &Parameters<f32>, step: u64) -> Error {
    let tensor = grads
        .first_non_finite()
        .map(|n| format!("grad.{n}"))
        .or_else(|| params.first_non_finite())
        .unwrap_or_else(|| "loss".to_string());
    Error::NonFinite { tensor, step }
}

/// The loop shared by pretraining and fine-tuning. `draw` produces the next
/// training batch from the run's RNG; `eval` returns the validation loss.
fn run(
    mut params: Parameters<f32>,
    config: &TrainConfig,
    opts: &RunOptions,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Batch,
    eval: impl Fn(&Parameters<f32>) -> Result<f64>,
) -> Result<(Parameters<f32>, TrainState, Vec<MetricRecord>)> {
    config.validate(&params.config)?;
    let mut state = match &opts.resume {
        Some(s) => {
            if s.m.config != params.config {
                return Err(Error::Config("resume state was saved for a different model".into()));
            }
            s.clone()
        }
        None => TrainState::new(&params, config.seed),
    };
    let mut rng = state.rng.restore();
    let mut sink = MetricsSink::open(opts.out_dir.as_deref())?;
    let start = Instant::now();
    let mut grads = params.zeros_like();

    while state.step < config.max_steps {
        let step = state.step + 1;
        let batch = draw(&mut rng);
        grads.fill(0.0);
        let (loss, _) = loss_and_grad(&params, &batch.seqs(), &mut grads)?;
        if !loss.is_finite() || grads.first_non_finite().is_some() {
            return Err(non_finite(&grads, &params, step));
        }
        let norm = clip_grad_norm(&mut grads, config.grad_clip);
        let lr = lr_at(config, step);
        adamw_step(&mut params, &grads, &mut state.m, &mut state.v, config, lr, step);
        if let Some(t) = params.first_non_finite() {
            return Err(Error::NonFinite { tensor: t, step });
        }
        state.step = step;
        state.rng = RngState::capture(state.rng.seed, &rng);
        sink.push(MetricRecord {
            step,
            split: Split::Train,
            loss,
            perplexity: loss.exp(),
            lr,
            elapsed_s: start.elapsed().as_secs_f64(),
            grad_norm: Some(norm),
        })?;

        if step % config.eval_interval_k == 0 {
            let val = eval(&params)?;
            if !val.is_finite() {
                return Err(non_finite(&grads, &params, step));
            }
            sink.push(MetricRecord {
                step,
                split: Split::Val,
                loss: val,
                perplexity: perplexity(val)?,
                lr,
                elapsed_s: start.elapsed().as_secs_f64(),
                grad_norm: None,
            })?;
            log::info!("step {step}: train loss {loss:.4}, val loss {val:.4}");
            if state.best_val_loss.map_or(true, |b| val < b) {
                state.best_val_loss = Some(val);
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&params, Some(&state), &dir.join("best.plmf"))?;
                }
            }
        }
        if step % config.checkpoint_every == 0 {
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(&params, Some(&state), &dir.join(format!("step-{step:08}.plmf")))?;
            }
        }
    }
    Ok((params, state, sink.log))
}

/// Mean loss over fixed validation windows drawn from a reseeded RNG, so
/// successive evaluations see the same tokens.
pub fn window_loss(
    params: &Parameters<f32>,
    stream: &[u32],
    seq_len: usize,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<f64> {
    let t = seq_len.min(stream.len().saturating_sub(1));
    if t == 0 {
        return Err(Error::InvalidInput("validation stream needs at least 2 tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..n_batches {
        let b = batches::draw_windows(stream, t, batch_size, &mut rng);
        let (l, n) = batch_loss(params, &b.seqs())?;
        sum += l * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

/// Next-token pretraining on random windows of the training stream.
pub fn pretrain(
    params: Parameters<f32>,
    data: TokenizedCorpus<'_>,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate(&params.config)?;
    if data.train.len() <= config.seq_len {
        return Err(Error::InvalidInput(format!(
            "training stream of {} tokens is too short for seq_len {}",
            data.train.len(),
            config.seq_len
        )));
    }
    if data.val.len() < 2 {
        return Err(Error::InvalidInput("validation stream needs at least 2 tokens".into()));
    }
    let (params, state, log) = run(
        params,
        config,
        opts,
        |rng| batches::draw_windows(data.train, config.seq_len, config.batch_size, rng),
        |p| window_loss(p, data.val, config.seq_len, config.batch_size, config.eval_batches, config.seed),
    )?;
    Ok(TrainOutcome {
        params,
        state,
        log,
        skipped: 0,
    })
}

/// A full token sequence for fine-tuning; `mask[i]` marks `ids[i]` as a loss
/// target (response tokens and the closing eos).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl SftSequence {
    /// Inputs, shifted targets and the target mask.
    pub fn training_pair(&self) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
        let n = self.ids.len();
        (self.ids[..n - 1].to_vec(), self.ids[1..].to_vec(), self.mask[1..].to_vec())
    }

    fn usable(&self) -> bool {
        self.ids.len() >= 2 && self.mask[1..].iter().any(|&m| m)
    }
}

fn sft_batch(seqs: &[&SftSequence]) -> Batch {
    let mut b = Batch {
        inputs: Vec::new(),
        targets: Vec::new(),
        masks: Some(Vec::new()),
    };
    for s in seqs {
        let (x, y, m) = s.training_pair();
        b.inputs.push(x);
        b.targets.push(y);
        b.masks.as_mut().unwrap().push(m);
    }
    b
}

/// Masked loss averaged over every response position of `seqs`.
pub fn sft_loss(params: &Parameters<f32>, seqs: &[SftSequence], batch_size: usize) -> Result<f64> {
    let usable: Vec<&SftSequence> = seqs.iter().filter(|s| s.usable()).collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput("no sequence has a masked-in target".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in usable.chunks(batch_size.max(1)) {
        let b = sft_batch(chunk);
        let (l, n) = batch_loss(params, &b.seqs())?;
        sum += l * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

/// Response-masked fine-tuning. Each step draws `batch_size` sequences
/// uniformly with replacement. `val` may be empty, in which case the
/// training set is also used for the periodic evaluation.
pub fn finetune_sft(
    params: Parameters<f32>,
    train: &[SftSequence],
    val: &[SftSequence],
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate(&params.config)?;
    if train.is_empty() {
        return Err(Error::InvalidInput("fine-tuning dataset is empty".into()));
    }
    for (i, s) in train.iter().chain(val).enumerate() {
        if s.ids.len() != s.mask.len() {
            return Err(Error::InvalidInput(format!("sequence {i}: ids and mask lengths differ")));
        }
        if s.ids.len() > params.config.context_len + 1 {
            return Err(Error::SequenceTooLong {
                len: s.ids.len() - 1,
                context_len: params.config.context_len,
            });
        }
    }
    let usable: Vec<&SftSequence> = train.iter().filter(|s| s.usable()).collect();
    let skipped = train.len() - usable.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} sequences with no response positions");
    }
    if usable.is_empty() {
        return Err(Error::InvalidInput("every fine-tuning sequence is fully masked out".into()));
    }
    let eval_set = if val.iter().any(SftSequence::usable) { val } else { train };
    let (params, state, log) = run(
        params,
        config,
        opts,
        |rng| {
            let pick: Vec<&SftSequence> = (0..config.batch_size)
                .map(|_| usable[rng.gen_range(0..usable.len())])
                .collect();
            sft_batch(&pick)
        },
        |p| sft_loss(p, eval_set, config.batch_size),
    )?;
    Ok(TrainOutcome {
        params,
        state,
        log,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::init_model;

    fn tiny() -> Parameters<f32> {
        init_model(&ModelConfig::new(12, 8, 1, 2).with_context_len(16)).unwrap()
    }

    #[test]
    fn config_validation() {
        let m = ModelConfig::new(12, 8, 1, 2).with_context_len(16);
        let ok = TrainConfig {
            seq_len: 16,
            max_steps: 10,
            eval_interval_k: 10,
            ..Default::default()
        };
        ok.validate(&m).unwrap();
        assert!(TrainConfig { seq_len: 17, ..ok.clone() }.validate(&m).is_err());
        assert!(TrainConfig { eval_interval_k: 11, ..ok.clone() }.validate(&m).is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok }.validate(&m).is_err());
    }

    #[test]
    fn nan_aborts_naming_a_tensor() {
        let mut p = tiny();
        p.layers[0].wq[3] = f32::NAN;
        let stream: Vec<u32> = (0..40).map(|i| i % 12).collect();
        let cfg = TrainConfig {
            seq_len: 8,
            batch_size: 2,
            max_steps: 3,
            eval_interval_k: 3,
            warmup_steps: 0,
            ..Default::default()
        };
        let err = pretrain(p, TokenizedCorpus { train: &stream, val: &stream }, &cfg, &RunOptions::default())
            .unwrap_err();
        match err {
            Error::NonFinite { tensor, step } => {
                assert_eq!(step, 1);
                assert!(tensor.contains("layers.0") || tensor.starts_with("grad."), "{tensor}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_response_token_loss_is_its_nll() {
        let p = tiny();
        let s = SftSequence {
            ids: vec![1, 5, 6, 7],
            mask: vec![false, false, false, true],
        };
        let out = crate::lm::forward(&p, &[1, 5, 6], None).unwrap();
        let row = out.row(2);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        let expect = lse - row[7] as f64;
        let got = sft_loss(&p, &[s], 4).unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn empty_and_fully_masked_datasets_fail() {
        let cfg = TrainConfig {
            seq_len: 4,
            max_steps: 2,
            eval_interval_k: 2,
            ..Default::default()
        };
        assert!(finetune_sft(tiny(), &[], &[], &cfg, &RunOptions::default()).is_err());
        let dead = SftSequence {
            ids: vec![1, 2, 3],
            mask: vec![false, false, false],
        };
        assert!(finetune_sft(tiny(), &[dead], &[], &cfg, &RunOptions::default()).is_err());
    }
}
