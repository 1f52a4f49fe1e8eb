//! Incremental (KV-cached) decoding, shared by the FP32 and int8 weight sets.

use super::config::ModelConfig;
use super::model::{check_ids, gelu, Rope, NORM_EPS};
use super::params::Parameters;
use crate::error::{Error, Result};

/// The linear maps of one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

/// Read access to a weight set for single-token decoding.
pub trait ModelWeights: Sync {
    fn config(&self) -> &ModelConfig;
    /// Writes the embedding row of `id` into `out`.
    fn embed(&self, id: u32, out: &mut [f32]);
    fn attn_norm(&self, layer: usize) -> &[f32];
    fn ff_norm(&self, layer: usize) -> &[f32];
    fn final_norm(&self) -> &[f32];
    /// `y = W x` for the given projection.
    fn project(&self, layer: usize, proj: Proj, x: &[f32], y: &mut [f32]);
    /// `logits = H x` with the output head.
    fn head(&self, x: &[f32], logits: &mut [f32]);
}

pub(crate) fn matvec(w: &[f32], x: &[f32], y: &mut [f32]) {
    let n = x.len();
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(n)) {
        *yi = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
    }
}

impl ModelWeights for Parameters<f32> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, id: u32, out: &mut [f32]) {
        let d = self.config.d_model;
        let id = id as usize;
        out.copy_from_slice(&self.embedding[id * d..(id + 1) * d]);
    }

    fn attn_norm(&self, layer: usize) -> &[f32] {
        &self.layers[layer].attn_norm
    }

    fn ff_norm(&self, layer: usize) -> &[f32] {
        &self.layers[layer].ff_norm
    }

    fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    fn project(&self, layer: usize, proj: Proj, x: &[f32], y: &mut [f32]) {
        let l = &self.layers[layer];
        let w = match proj {
            Proj::Q => &l.wq,
            Proj::K => &l.wk,
            Proj::V => &l.wv,
            Proj::O => &l.wo,
            Proj::Up => &l.w_up,
            Proj::Down => &l.w_down,
        };
        matvec(w, x, y);
    }

    fn head(&self, x: &[f32], logits: &mut [f32]) {
        matvec(self.head_matrix(), x, logits);
    }
}

fn rms_norm_vec(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + NORM_EPS as f32).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * inv * gain[i];
    }
}

/// Per-request decoding state: the key/value cache of every layer.
pub struct DecodeState<'w, W: ModelWeights + ?Sized> {
    weights: &'w W,
    rope: Rope<f32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    pos: usize,
    // scratch
    x: Vec<f32>,
    h: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    up: Vec<f32>,
    scores: Vec<f32>,
}

// derive would demand `W: Clone`; only the reference is copied
impl<W: ModelWeights + ?Sized> Clone for DecodeState<'_, W> {
    fn clone(&self) -> Self {
        DecodeState {
            weights: self.weights,
            rope: self.rope.clone(),
            keys: self.keys.clone(),
            values: self.values.clone(),
            pos: self.pos,
            x: self.x.clone(),
            h: self.h.clone(),
            q: self.q.clone(),
            k: self.k.clone(),
            v: self.v.clone(),
            attn: self.attn.clone(),
            proj: self.proj.clone(),
            up: self.up.clone(),
            scores: self.scores.clone(),
        }
    }
}

impl<'w, W: ModelWeights + ?Sized> DecodeState<'w, W> {
    pub fn new(weights: &'w W) -> Self {
        let cfg = weights.config();
        let d = cfg.d_model;
        DecodeState {
            weights,
            rope: Rope::new(cfg.head_dim(), cfg.context_len),
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            pos: 0,
            x: vec![0.0; d],
            h: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            attn: vec![0.0; d],
            proj: vec![0.0; d],
            up: vec![0.0; cfg.ff_dim()],
            scores: Vec::with_capacity(cfg.context_len),
        }
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn step(&mut self, id: u32) -> Result<Vec<f32>> {
        let cfg = self.weights.config().clone();
        check_ids(&cfg, &[id])?;
        if self.pos >= cfg.context_len {
            return Err(Error::SequenceTooLong {
                len: self.pos + 1,
                context_len: cfg.context_len,
            });
        }
        let (d, hd, nh) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
        let w = self.weights;
        w.embed(id, &mut self.x);
        let scale = 1.0 / (hd as f32).sqrt();
        let len = self.pos + 1;

        for layer in 0..cfg.n_layers {
            rms_norm_vec(&self.x, w.attn_norm(layer), &mut self.h);
            w.project(layer, Proj::Q, &self.h, &mut self.q);
            w.project(layer, Proj::K, &self.h, &mut self.k);
            w.project(layer, Proj::V, &self.h, &mut self.v);
            for head in 0..nh {
                self.rope.apply(&mut self.q[head * hd..(head + 1) * hd], self.pos, false);
                self.rope.apply(&mut self.k[head * hd..(head + 1) * hd], self.pos, false);
            }
            self.keys[layer].extend_from_slice(&self.k);
            self.values[layer].extend_from_slice(&self.v);
            let (keys, values) = (&self.keys[layer], &self.values[layer]);
            for head in 0..nh {
                let qh = &self.q[head * hd..(head + 1) * hd];
                self.scores.clear();
                for t in 0..len {
                    let kt = &keys[t * d + head * hd..t * d + (head + 1) * hd];
                    self.scores
                        .push(qh.iter().zip(kt).map(|(a, b)| a * b).sum::<f32>() * scale);
                }
                let max = self.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for s in self.scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut self.attn[head * hd..(head + 1) * hd];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (t, &p) in self.scores.iter().enumerate() {
                    let vt = &values[t * d + head * hd..t * d + (head + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vt) {
                        *o += p / sum * vv;
                    }
                }
            }
            w.project(layer, Proj::O, &self.attn, &mut self.proj);
            for (x, p) in self.x.iter_mut().zip(&self.proj) {
                *x += p;
            }
            rms_norm_vec(&self.x, w.ff_norm(layer), &mut self.h);
            w.project(layer, Proj::Up, &self.h, &mut self.up);
            self.up.iter_mut().for_each(|u| *u = gelu(*u));
            w.project(layer, Proj::Down, &self.up, &mut self.proj);
            for (x, p) in self.x.iter_mut().zip(&self.proj) {
                *x += p;
            }
        }
        rms_norm_vec(&self.x, w.final_norm(), &mut self.h);
        let mut logits = vec![0.0; cfg.vocab_size];
        w.head(&self.h, &mut logits);
        self.pos += 1;
        Ok(logits)
    }
}

/// Logits for every position of `ids`, computed token by token through the cache.
pub fn forward_incremental<W: ModelWeights + ?Sized>(weights: &W, ids: &[u32]) -> Result<Vec<Vec<f32>>> {
    check_ids(weights.config(), ids)?;
    let mut state = DecodeState::new(weights);
    ids.iter().map(|&id| state.step(id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::forward;
    use crate::lm::params::init_model;

    #[test]
    fn cached_decoding_matches_full_forward() {
        let cfg = ModelConfig::new(24, 16, 2, 4).with_context_len(20).with_seed(11);
        let p = init_model(&cfg).unwrap();
        let ids = [3u32, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        let full = forward(&p, &ids, None).unwrap();
        let inc = forward_incremental(&p, &ids).unwrap();
        for (t, row) in inc.iter().enumerate() {
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-5, "pos {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn step_past_context_errors() {
        let cfg = ModelConfig::new(8, 8, 1, 2).with_context_len(2);
        let p = init_model(&cfg).unwrap();
        let mut s = DecodeState::new(&p);
        s.step(1).unwrap();
        s.step(2).unwrap();
        assert!(s.step(3).is_err());
    }
}
