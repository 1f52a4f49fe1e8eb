//! Pre-norm decoder-only transformer: RMS-normalised blocks, rotary position
//! encoding, causal multi-head attention, GELU feed-forward and a (by default
//! tied) output head.
//!
//! A batch is a list of independent sequences packed row-wise into one
//! `[N × d]` activation matrix. Linear layers run over all rows at once;
//! attention and rotary positions are computed per sequence. Reductions
//! always run in sequence order then row order, so results are
//! bit-reproducible on a single thread.

use super::config::ModelConfig;
use super::params::{Layer, Parameters};
use super::scalar::{matmul, matmul_strided, Mat, Scalar};
use crate::error::{Error, Result};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// Logits for every position, plus the mean next-token loss when targets were given.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    pub logits: Vec<T>,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Reduced in f64 regardless of `T`.
    pub loss: Option<f64>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn row(&self, t: usize) -> &[T] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }
}

/// One training sequence. When `mask` is given, only positions where it is
/// `true` contribute to the loss.
#[derive(Debug, Clone, Copy)]
pub struct TrainSeq<'a> {
    pub ids: &'a [u32],
    pub targets: &'a [u32],
    pub mask: Option<&'a [bool]>,
}

impl<'a> TrainSeq<'a> {
    pub fn new(ids: &'a [u32], targets: &'a [u32]) -> Self {
        TrainSeq {
            ids,
            targets,
            mask: None,
        }
    }

    pub fn masked(ids: &'a [u32], targets: &'a [u32], mask: &'a [bool]) -> Self {
        TrainSeq {
            ids,
            targets,
            mask: Some(mask),
        }
    }

    fn active_positions(&self) -> usize {
        match self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.ids.len(),
        }
    }
}

pub(crate) fn check_ids(config: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.len() > config.context_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            context_len: config.context_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

struct LayerCache<T> {
    x_in: Vec<T>,
    inv_rms1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, one `[len × len]` block per (sequence, head).
    probs: Vec<Vec<T>>,
    attn: Vec<T>,
    x_mid: Vec<T>,
    inv_rms2: Vec<T>,
    h2: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

struct Cache<T> {
    rows: usize,
    /// (start row, length) of every packed sequence
    segments: Vec<(usize, usize)>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    inv_rms_f: Vec<T>,
    h_final: Vec<T>,
    logits: Vec<T>,
}

fn rms_norm<T: Scalar>(x: &[T], gain: &[T], d: usize, out: &mut [T], inv_rms: &mut [T]) {
    let eps = T::from_f64(NORM_EPS);
    let dt = T::from_f64(d as f64);
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / dt;
        let inv = T::one() / (ms + eps).sqrt();
        inv_rms[r] = inv;
        for i in 0..d {
            or[i] = xr[i] * inv * gain[i];
        }
    }
}

/// Accumulates into `dx` and `dgain`.
fn rms_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    dy: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let dt = T::from_f64(d as f64);
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let inv = inv_rms[r];
        let mut dot = T::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i] * inv;
            dot += dyr[i] * gain[i] * xr[i];
        }
        let coef = dot * inv * inv * inv / dt;
        for i in 0..d {
            dxr[i] += dyr[i] * gain[i] * inv - xr[i] * coef;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + th)
        + half * u * (T::one() - th * th) * c * (T::one() + T::from_f64(3.0) * a * u * u)
}

/// Per-position rotary angles: `cos/sin[pos][i]` for pair `i` of a head.
#[derive(Clone)]
pub(crate) struct Rope<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    pub fn new(head_dim: usize, max_len: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotates one head vector in place (`inverse` applies the transpose).
    pub fn apply(&self, v: &mut [T], pos: usize, inverse: bool) {
        let h = self.half;
        let (c, s) = (&self.cos[pos * h..(pos + 1) * h], &self.sin[pos * h..(pos + 1) * h]);
        for i in 0..h {
            let (a, b) = (v[i], v[i + h]);
            let sn = if inverse { -s[i] } else { s[i] };
            v[i] = a * c[i] - b * sn;
            v[i + h] = a * sn + b * c[i];
        }
    }
}

fn rope_rows<T: Scalar>(
    rope: &Rope<T>,
    x: &mut [T],
    segments: &[(usize, usize)],
    d: usize,
    n_heads: usize,
    inverse: bool,
) {
    let hd = d / n_heads;
    for &(start, len) in segments {
        for pos in 0..len {
            let row = &mut x[(start + pos) * d..(start + pos + 1) * d];
            for h in 0..n_heads {
                rope.apply(&mut row[h * hd..(h + 1) * hd], pos, inverse);
            }
        }
    }
}

/// `y[N × out] = x[N × in] · Wᵀ` for `W` stored `[out × in]`.
fn linear<T: Scalar>(x: &[T], w: &[T], rows: usize, in_dim: usize, out_dim: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out_dim];
    matmul(
        Mat::new(x, rows, in_dim),
        Mat::new(w, out_dim, in_dim).t(),
        &mut y,
        false,
    );
    y
}

/// Backward of [`linear`]: accumulates `dW += dyᵀ x` and returns `dx = dy · W`
/// (accumulated into `dx` when given).
fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dw: &mut [T],
    dx: &mut [T],
) {
    matmul(
        Mat::new(dy, rows, out_dim).t(),
        Mat::new(x, rows, in_dim),
        dw,
        true,
    );
    matmul(
        Mat::new(dy, rows, out_dim),
        Mat::new(w, out_dim, in_dim),
        dx,
        true,
    );
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn attention_forward<T: Scalar>(
    cfg: &ModelConfig,
    q: &[T],
    k: &[T],
    v: &[T],
    segments: &[(usize, usize)],
    out: &mut [T],
) -> Vec<Vec<T>> {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut all_probs = Vec::with_capacity(segments.len() * cfg.n_heads);
    for &(start, len) in segments {
        for h in 0..cfg.n_heads {
            let off = start * d + h * hd;
            let qh = Mat::strided(&q[off..], len, hd, d);
            let kh = Mat::strided(&k[off..], len, hd, d);
            let vh = Mat::strided(&v[off..], len, hd, d);
            let mut p = vec![T::zero(); len * len];
            matmul(qh, kh.t(), &mut p, false);
            for i in 0..len {
                let row = &mut p[i * len..(i + 1) * len];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j <= i { *s * scale } else { T::neg_infinity() };
                }
                softmax_in_place(row);
            }
            matmul_strided(Mat::new(&p, len, len), vh, &mut out[off..], d, false);
            all_probs.push(p);
        }
    }
    all_probs
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    cfg: &ModelConfig,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[Vec<T>],
    segments: &[(usize, usize)],
    d_out: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut idx = 0;
    for &(start, len) in segments {
        for h in 0..cfg.n_heads {
            let p = &probs[idx];
            idx += 1;
            let off = start * d + h * hd;
            let doh = Mat::strided(&d_out[off..], len, hd, d);
            // dP = dO · Vᵀ
            let mut dp = vec![T::zero(); len * len];
            matmul(doh, Mat::strided(&v[off..], len, hd, d).t(), &mut dp, false);
            // dV = Pᵀ · dO
            matmul_strided(Mat::new(p, len, len).t(), doh, &mut dv[off..], d, true);
            // dS = P ⊙ (dP − rowsum(P ⊙ dP)), then the 1/√hd scale
            for i in 0..len {
                let pr = &p[i * len..(i + 1) * len];
                let dr = &mut dp[i * len..(i + 1) * len];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            matmul_strided(
                Mat::new(&dp, len, len),
                Mat::strided(&k[off..], len, hd, d),
                &mut dq[off..],
                d,
                true,
            );
            matmul_strided(
                Mat::new(&dp, len, len).t(),
                Mat::strided(&q[off..], len, hd, d),
                &mut dk[off..],
                d,
                true,
            );
        }
    }
}

fn validate_batch(cfg: &ModelConfig, seqs: &[&[u32]]) -> Result<Vec<(usize, usize)>> {
    let mut segments = Vec::with_capacity(seqs.len());
    let mut start = 0;
    for ids in seqs {
        check_ids(cfg, ids)?;
        segments.push((start, ids.len()));
        start += ids.len();
    }
    Ok(segments)
}

fn forward_cached<T: Scalar>(params: &Parameters<T>, seqs: &[&[u32]]) -> Result<Cache<T>> {
    let cfg = &params.config;
    let segments = validate_batch(cfg, seqs)?;
    let d = cfg.d_model;
    let f = cfg.ff_dim();
    let rows: usize = seqs.iter().map(|s| s.len()).sum();
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let rope = Rope::<T>::new(cfg.head_dim(), max_len);

    let mut x = Vec::with_capacity(rows * d);
    for ids in seqs {
        for &id in ids.iter() {
            let id = id as usize;
            x.extend_from_slice(&params.embedding[id * d..(id + 1) * d]);
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let mut h1 = vec![T::zero(); rows * d];
        let mut inv_rms1 = vec![T::zero(); rows];
        rms_norm(&x, &layer.attn_norm, d, &mut h1, &mut inv_rms1);
        let mut q = linear(&h1, &layer.wq, rows, d, d);
        let mut k = linear(&h1, &layer.wk, rows, d, d);
        let v = linear(&h1, &layer.wv, rows, d, d);
        rope_rows(&rope, &mut q, &segments, d, cfg.n_heads, false);
        rope_rows(&rope, &mut k, &segments, d, cfg.n_heads, false);
        let mut attn = vec![T::zero(); rows * d];
        let probs = attention_forward(cfg, &q, &k, &v, &segments, &mut attn);
        let proj = linear(&attn, &layer.wo, rows, d, d);
        let x_mid: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

        let mut h2 = vec![T::zero(); rows * d];
        let mut inv_rms2 = vec![T::zero(); rows];
        rms_norm(&x_mid, &layer.ff_norm, d, &mut h2, &mut inv_rms2);
        let up = linear(&h2, &layer.w_up, rows, d, f);
        let act: Vec<T> = up.iter().map(|&u| gelu(u)).collect();
        let down = linear(&act, &layer.w_down, rows, f, d);
        let x_out: Vec<T> = x_mid.iter().zip(&down).map(|(&a, &b)| a + b).collect();

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            inv_rms1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            inv_rms2,
            h2,
            up,
            act,
        });
    }

    let mut h_final = vec![T::zero(); rows * d];
    let mut inv_rms_f = vec![T::zero(); rows];
    rms_norm(&x, &params.final_norm, d, &mut h_final, &mut inv_rms_f);
    let logits = linear(&h_final, params.head_matrix(), rows, d, cfg.vocab_size);

    Ok(Cache {
        rows,
        segments,
        layers,
        x_final: x,
        inv_rms_f,
        h_final,
        logits,
    })
}

/// `−log softmax(row)[target]` in f64, computed with max subtraction.
pub(crate) fn nll<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|&v| Scalar::to_f64(v)).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (Scalar::to_f64(v) - max).exp()).sum::<f64>().ln() + max;
    lse - Scalar::to_f64(row[target])
}

/// Runs the model over one sequence. With targets, `loss` is the mean
/// next-token negative log-likelihood over all positions.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    ids: &[u32],
    targets: Option<&[u32]>,
) -> Result<ForwardOutput<T>> {
    let cfg = &params.config;
    if let Some(t) = targets {
        if t.len() != ids.len() {
            return Err(Error::InvalidInput(format!(
                "targets length {} differs from ids length {}",
                t.len(),
                ids.len()
            )));
        }
        check_ids(cfg, t)?;
    }
    let cache = forward_cached(params, &[ids])?;
    let v = cfg.vocab_size;
    let loss = targets.filter(|t| !t.is_empty()).map(|t| {
        let total: f64 = t
            .iter()
            .enumerate()
            .map(|(i, &tgt)| nll(&cache.logits[i * v..(i + 1) * v], tgt as usize))
            .sum();
        total / t.len() as f64
    });
    Ok(ForwardOutput {
        logits: cache.logits,
        seq_len: ids.len(),
        vocab_size: v,
        loss,
    })
}

/// Mean loss over every active target position of the batch and its gradient,
/// accumulated into `grads`. Returns the loss and the number of positions.
pub fn loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    batch: &[TrainSeq<'_>],
    grads: &mut Parameters<T>,
) -> Result<(f64, usize)> {
    let cfg = &params.config;
    for s in batch {
        if s.targets.len() != s.ids.len() || s.mask.is_some_and(|m| m.len() != s.ids.len()) {
            return Err(Error::InvalidInput(
                "ids, targets and mask must have equal lengths".into(),
            ));
        }
        check_ids(cfg, s.targets)?;
    }
    let count: usize = batch.iter().map(|s| s.active_positions()).sum();
    if count == 0 {
        return Err(Error::InvalidInput("batch has no active loss positions".into()));
    }
    let seqs: Vec<&[u32]> = batch.iter().map(|s| s.ids).collect();
    let cache = forward_cached(params, &seqs)?;
    let v = cfg.vocab_size;
    let weight = T::one() / T::from_f64(count as f64);

    // dlogits = w · (softmax − onehot) on active rows, zero elsewhere
    let mut dlogits = vec![T::zero(); cache.rows * v];
    let mut loss = 0.0;
    let mut row = 0;
    for s in batch {
        for t in 0..s.ids.len() {
            let active = s.mask.map_or(true, |m| m[t]);
            if active {
                let logits = &cache.logits[row * v..(row + 1) * v];
                let tgt = s.targets[t] as usize;
                loss += nll(logits, tgt) / count as f64;
                let out = &mut dlogits[row * v..(row + 1) * v];
                out.copy_from_slice(logits);
                softmax_in_place(out);
                out[tgt] -= T::one();
                out.iter_mut().for_each(|g| *g *= weight);
            }
            row += 1;
        }
    }

    backward(params, &cache, &seqs, &dlogits, grads);
    Ok((loss, count))
}

/// Gradient of the mean loss w.r.t. every parameter for a single sequence
/// (fresh gradient buffers).
pub fn backward_seq<T: Scalar>(
    params: &Parameters<T>,
    ids: &[u32],
    targets: &[u32],
) -> Result<(f64, Parameters<T>)> {
    let mut grads = params.zeros_like();
    let (loss, _) = loss_and_grad(params, &[TrainSeq::new(ids, targets)], &mut grads)?;
    Ok((loss, grads))
}

/// Gradient of the loss with respect to the logits (for identity checks).
pub fn logit_grad<T: Scalar>(params: &Parameters<T>, ids: &[u32], targets: &[u32]) -> Result<Vec<T>> {
    let out = forward(params, ids, Some(targets))?;
    let v = params.config.vocab_size;
    let weight = T::one() / T::from_f64(ids.len() as f64);
    let mut g = out.logits.clone();
    for (t, &tgt) in targets.iter().enumerate() {
        let row = &mut g[t * v..(t + 1) * v];
        softmax_in_place(row);
        row[tgt as usize] -= T::one();
        row.iter_mut().for_each(|x| *x *= weight);
    }
    Ok(g)
}

fn backward<T: Scalar>(
    params: &Parameters<T>,
    cache: &Cache<T>,
    seqs: &[&[u32]],
    dlogits: &[T],
    grads: &mut Parameters<T>,
) {
    let cfg = &params.config;
    let (d, f, v, rows) = (cfg.d_model, cfg.ff_dim(), cfg.vocab_size, cache.rows);
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let rope = Rope::<T>::new(cfg.head_dim(), max_len);

    // output head
    let mut dh_final = vec![T::zero(); rows * d];
    {
        let head = params.head_matrix();
        let dhead = match grads.head.as_mut() {
            Some(h) => h,
            None => &mut grads.embedding,
        };
        linear_backward(&cache.h_final, head, dlogits, rows, d, v, dhead, &mut dh_final);
    }
    let mut dx = vec![T::zero(); rows * d];
    rms_norm_backward(
        &cache.x_final,
        &params.final_norm,
        &cache.inv_rms_f,
        &dh_final,
        d,
        &mut dx,
        &mut grads.final_norm,
    );

    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g: &mut Layer<T> = &mut grads.layers[li];

        // feed-forward branch: x_out = x_mid + down(gelu(up(norm(x_mid))))
        let mut dact = vec![T::zero(); rows * f];
        linear_backward(&lc.act, &layer.w_down, &dx, rows, f, d, &mut g.w_down, &mut dact);
        let dup: Vec<T> = dact
            .iter()
            .zip(&lc.up)
            .map(|(&da, &u)| da * gelu_grad(u))
            .collect();
        let mut dh2 = vec![T::zero(); rows * d];
        linear_backward(&lc.h2, &layer.w_up, &dup, rows, d, f, &mut g.w_up, &mut dh2);
        let mut dx_mid = dx;
        rms_norm_backward(
            &lc.x_mid,
            &layer.ff_norm,
            &lc.inv_rms2,
            &dh2,
            d,
            &mut dx_mid,
            &mut g.ff_norm,
        );

        // attention branch: x_mid = x_in + o(attn(norm(x_in)))
        let mut dattn = vec![T::zero(); rows * d];
        linear_backward(&lc.attn, &layer.wo, &dx_mid, rows, d, d, &mut g.wo, &mut dattn);
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        attention_backward(
            cfg,
            &lc.q,
            &lc.k,
            &lc.v,
            &lc.probs,
            &cache.segments,
            &dattn,
            &mut dq,
            &mut dk,
            &mut dv,
        );
        rope_rows(&rope, &mut dq, &cache.segments, d, cfg.n_heads, true);
        rope_rows(&rope, &mut dk, &cache.segments, d, cfg.n_heads, true);
        let mut dh1 = vec![T::zero(); rows * d];
        linear_backward(&lc.h1, &layer.wq, &dq, rows, d, d, &mut g.wq, &mut dh1);
        linear_backward(&lc.h1, &layer.wk, &dk, rows, d, d, &mut g.wk, &mut dh1);
        linear_backward(&lc.h1, &layer.wv, &dv, rows, d, d, &mut g.wv, &mut dh1);
        let mut dx_in = dx_mid;
        rms_norm_backward(
            &lc.x_in,
            &layer.attn_norm,
            &lc.inv_rms1,
            &dh1,
            d,
            &mut dx_in,
            &mut g.attn_norm,
        );
        dx = dx_in;
    }

    let mut row = 0;
    for ids in seqs {
        for &id in ids.iter() {
            let id = id as usize;
            let dst = &mut grads.embedding[id * d..(id + 1) * d];
            for (a, &b) in dst.iter_mut().zip(&dx[row * d..(row + 1) * d]) {
                *a += b;
            }
            row += 1;
        }
    }
}

/// Mean next-token loss of a batch without gradients.
pub fn batch_loss<T: Scalar>(params: &Parameters<T>, batch: &[TrainSeq<'_>]) -> Result<(f64, usize)> {
    let seqs: Vec<&[u32]> = batch.iter().map(|s| s.ids).collect();
    let cache = forward_cached(params, &seqs)?;
    let v = params.config.vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut row = 0;
    for s in batch {
        check_ids(&params.config, s.targets)?;
        for t in 0..s.ids.len() {
            if s.mask.map_or(true, |m| m[t]) {
                total += nll(&cache.logits[row * v..(row + 1) * v], s.targets[t] as usize);
                count += 1;
            }
            row += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("batch has no active loss positions".into()));
    }
    Ok((total / count as f64, count))
}

/// Sum of per-position NLLs of one sequence (token-weighted aggregation helper).
pub fn sequence_nll_sum<T: Scalar>(params: &Parameters<T>, ids: &[u32], targets: &[u32]) -> Result<f64> {
    let out = forward(params, ids, Some(targets))?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, &tgt)| nll(out.row(t), tgt as usize))
        .sum())
}

/// `exp(avg_loss)`, evaluated as a power of two so that `perplexity(ln 2^k)`
/// is exactly `2^k`.
pub fn perplexity(avg_loss: f64) -> Result<f64> {
    if !avg_loss.is_finite() || avg_loss < 0.0 {
        return Err(Error::InvalidInput(format!(
            "average loss must be finite and non-negative, got {avg_loss}"
        )));
    }
    Ok((avg_loss * std::f64::consts::LOG2_E).exp2())
}
