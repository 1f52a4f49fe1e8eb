//! Symmetric per-row int8 weight quantization, the int8 checkpoint and the
//! CPU decoding benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{argmax, prompt_ids};
use crate::error::{Error, Result};
use crate::lm::checkpoint::{params_from_records, CheckpointFile, Payload, TensorRecord};
use crate::lm::infer::matvec;
use crate::lm::{DecodeState, ModelConfig, ModelWeights, Parameters, Proj, TensorKind};
use crate::tokenizer::Tokenizer;

/// Int8 matrix `[rows × cols]` with one scale per row: `w ≈ q · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub rows: usize,
    pub cols: usize,
    pub scales: Vec<f32>,
    pub values: Vec<i8>,
}

/// Quantizes each row with `scale = max|row| / 127`. All-zero rows get scale 0.
pub fn quantize_int8(data: &[f32], rows: usize, cols: usize) -> QuantTensor {
    assert_eq!(data.len(), rows * cols, "data does not match {rows}x{cols}");
    let mut scales = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(data.len());
    for row in data.chunks_exact(cols.max(1)).take(rows) {
        let max = row.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        let scale = max / 127.0;
        scales.push(scale);
        if scale == 0.0 {
            values.extend(std::iter::repeat(0).take(cols));
        } else {
            // f64 quotient keeps the rounding error within half a step
            let s = scale as f64;
            values.extend(row.iter().map(|&x| (x as f64 / s).round().clamp(-127.0, 127.0) as i8));
        }
    }
    QuantTensor {
        rows,
        cols,
        scales,
        values,
    }
}

impl QuantTensor {
    pub fn dequantize(&self) -> Vec<f32> {
        self.values
            .chunks_exact(self.cols.max(1))
            .zip(&self.scales)
            .flat_map(|(r, &s)| r.iter().map(move |&q| q as f32 * s))
            .collect()
    }

    pub fn row_into(&self, r: usize, out: &mut [f32]) {
        let s = self.scales[r];
        for (o, &q) in out.iter_mut().zip(&self.values[r * self.cols..(r + 1) * self.cols]) {
            *o = q as f32 * s;
        }
    }

    /// `y = W x`: int8 row times f32 activations, accumulated in f32, then scaled.
    pub fn matvec(&self, x: &[f32], y: &mut [f32]) {
        for ((yi, row), &s) in y.iter_mut().zip(self.values.chunks_exact(self.cols)).zip(&self.scales) {
            let acc: f32 = row.iter().zip(x).map(|(&q, &b)| q as f32 * b).sum();
            *yi = acc * s;
        }
    }
}

/// A weight matrix that is either kept in FP32 or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum Matrix {
    F32 { rows: usize, cols: usize, data: Vec<f32> },
    I8(QuantTensor),
}

impl Matrix {
    fn row_into(&self, r: usize, out: &mut [f32]) {
        match self {
            Matrix::F32 { cols, data, .. } => out.copy_from_slice(&data[r * cols..(r + 1) * cols]),
            Matrix::I8(q) => q.row_into(r, out),
        }
    }

    fn matvec(&self, x: &[f32], y: &mut [f32]) {
        match self {
            Matrix::F32 { data, .. } => matvec(data, x, y),
            Matrix::I8(q) => q.matvec(x, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub attn_norm: Vec<f32>,
    pub ff_norm: Vec<f32>,
    pub wq: QuantTensor,
    pub wk: QuantTensor,
    pub wv: QuantTensor,
    pub wo: QuantTensor,
    pub w_up: QuantTensor,
    pub w_down: QuantTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParameters {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<QuantLayer>,
    pub final_norm: Vec<f32>,
    /// Present only for an untied head.
    pub head: Option<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantOptions {
    /// Quantize the embedding (and with it a tied head) per token row.
    pub quantize_embedding: bool,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            quantize_embedding: true,
        }
    }
}

fn q(data: &[f32], shape: &[usize]) -> QuantTensor {
    quantize_int8(data, shape[0], shape[1])
}

impl QuantizedParameters {
    pub fn from_params(params: &Parameters<f32>, opts: QuantOptions) -> Self {
        let c = &params.config;
        let (v, d, f) = (c.vocab_size, c.d_model, c.ff_dim());
        let mat = |data: &[f32]| {
            if opts.quantize_embedding {
                Matrix::I8(quantize_int8(data, v, d))
            } else {
                Matrix::F32 {
                    rows: v,
                    cols: d,
                    data: data.to_vec(),
                }
            }
        };
        QuantizedParameters {
            config: c.clone(),
            embedding: mat(&params.embedding),
            layers: params
                .layers
                .iter()
                .map(|l| QuantLayer {
                    attn_norm: l.attn_norm.clone(),
                    ff_norm: l.ff_norm.clone(),
                    wq: q(&l.wq, &[d, d]),
                    wk: q(&l.wk, &[d, d]),
                    wv: q(&l.wv, &[d, d]),
                    wo: q(&l.wo, &[d, d]),
                    w_up: q(&l.w_up, &[f, d]),
                    w_down: q(&l.w_down, &[d, f]),
                })
                .collect(),
            final_norm: params.final_norm.clone(),
            head: params.head.as_deref().map(mat),
        }
    }

    pub fn quantize(params: &Parameters<f32>) -> Self {
        Self::from_params(params, QuantOptions::default())
    }

    /// FP32 parameters holding the dequantized values.
    pub fn dequantize(&self) -> Parameters<f32> {
        let mut p = Parameters::<f32>::zeros(&self.config).expect("config validated");
        let records = self.records();
        for (t, r) in p.tensors_mut().into_iter().zip(records) {
            *t.data = match r.payload {
                Payload::F32(v) => v,
                Payload::I8 { scales, values } => QuantTensor {
                    rows: r.shape[0],
                    cols: r.shape[1],
                    scales,
                    values,
                }
                .dequantize(),
            };
        }
        p
    }

    fn records(&self) -> Vec<TensorRecord> {
        let names = Parameters::<f32>::zeros(&self.config).expect("config validated");
        let mut out = Vec::new();
        let mut layer_tensors = Vec::new();
        for l in &self.layers {
            layer_tensors.push([
                Matrix::F32 { rows: l.attn_norm.len(), cols: 1, data: l.attn_norm.clone() },
                Matrix::I8(l.wq.clone()),
                Matrix::I8(l.wk.clone()),
                Matrix::I8(l.wv.clone()),
                Matrix::I8(l.wo.clone()),
                Matrix::F32 { rows: l.ff_norm.len(), cols: 1, data: l.ff_norm.clone() },
                Matrix::I8(l.w_up.clone()),
                Matrix::I8(l.w_down.clone()),
            ]);
        }
        let final_norm = Matrix::F32 {
            rows: self.final_norm.len(),
            cols: 1,
            data: self.final_norm.clone(),
        };
        let mut sources: Vec<&Matrix> = vec![&self.embedding];
        for l in &layer_tensors {
            sources.extend(l.iter());
        }
        sources.push(&final_norm);
        if let Some(h) = &self.head {
            sources.push(h);
        }
        for (t, m) in names.tensors().into_iter().zip(sources) {
            let payload = match m {
                Matrix::F32 { data, .. } => Payload::F32(data.clone()),
                Matrix::I8(q) => Payload::I8 {
                    scales: q.scales.clone(),
                    values: q.values.clone(),
                },
            };
            out.push(TensorRecord {
                name: t.name,
                shape: t.shape,
                payload,
            });
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        CheckpointFile {
            config: self.config.clone(),
            tensors: self.records(),
            state: None,
        }
        .write(path)
    }

    fn from_file(file: &CheckpointFile) -> Result<Self> {
        let c = &file.config;
        let template = Parameters::<f32>::zeros(c)?;
        let mut mats = Vec::new();
        for t in template.tensors() {
            let rec = file
                .tensor(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", t.name)))?;
            if rec.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    t.name, rec.shape, t.shape
                )));
            }
            let (rows, cols) = (t.shape[0], t.shape.get(1).copied().unwrap_or(1));
            mats.push(match (&rec.payload, t.kind) {
                (Payload::F32(v), TensorKind::Linear) => Matrix::I8(quantize_int8(v, rows, cols)),
                (Payload::F32(v), _) => Matrix::F32 { rows, cols, data: v.clone() },
                (Payload::I8 { .. }, TensorKind::Norm) => {
                    return Err(Error::Checkpoint(format!("norm tensor `{}` must be f32", t.name)))
                }
                (Payload::I8 { scales, values }, _) => Matrix::I8(QuantTensor {
                    rows,
                    cols,
                    scales: scales.clone(),
                    values: values.clone(),
                }),
            });
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("one matrix per tensor");
        let vec = |m: Matrix| match m {
            Matrix::F32 { data, .. } => data,
            Matrix::I8(q) => q.dequantize(),
        };
        let quant = |m: Matrix| match m {
            Matrix::I8(q) => q,
            Matrix::F32 { rows, cols, data } => quantize_int8(&data, rows, cols),
        };
        let embedding = next();
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let attn_norm = vec(next());
            let (wq, wk, wv, wo) = (quant(next()), quant(next()), quant(next()), quant(next()));
            let ff_norm = vec(next());
            let (w_up, w_down) = (quant(next()), quant(next()));
            layers.push(QuantLayer {
                attn_norm,
                ff_norm,
                wq,
                wk,
                wv,
                wo,
                w_up,
                w_down,
            });
        }
        let final_norm = vec(next());
        let head = (!c.tie_embeddings).then(&mut next);
        Ok(QuantizedParameters {
            config: c.clone(),
            embedding,
            layers,
            final_norm,
            head,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = CheckpointFile::read(path)?;
        file.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
        Self::from_file(&file)
    }
}

impl ModelWeights for QuantizedParameters {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, id: u32, out: &mut [f32]) {
        self.embedding.row_into(id as usize, out);
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
        w.matvec(x, y);
    }

    fn head(&self, x: &[f32], logits: &mut [f32]) {
        self.head.as_ref().unwrap_or(&self.embedding).matvec(x, logits);
    }
}

/// Logits `[T × V]` for every position of `ids`, computed with the int8 weights.
pub fn forward_quantized(qparams: &QuantizedParameters, ids: &[u32]) -> Result<Vec<f32>> {
    let mut state = DecodeState::new(qparams);
    let mut out = Vec::with_capacity(ids.len() * qparams.config.vocab_size);
    for &id in ids {
        out.extend(state.step(id)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Int8,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Int8 => "int8",
        })
    }
}

/// Either weight set, as loaded from a checkpoint file.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Fp32(Parameters<f32>),
    Int8(QuantizedParameters),
}

impl LoadedModel {
    /// Int8 if any tensor in the file is quantized, FP32 otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let file = CheckpointFile::read(path)?;
        file.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
        if file.tensors.iter().any(|t| matches!(t.payload, Payload::I8 { .. })) {
            Ok(LoadedModel::Int8(QuantizedParameters::from_file(&file)?))
        } else {
            Ok(LoadedModel::Fp32(params_from_records(&file.config, &file, "")?))
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            LoadedModel::Fp32(_) => Precision::Fp32,
            LoadedModel::Int8(_) => Precision::Int8,
        }
    }

    pub fn weights(&self) -> &dyn ModelWeights {
        match self {
            LoadedModel::Fp32(p) => p,
            LoadedModel::Int8(q) => q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model_id: String,
    pub precision: Precision,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub elapsed_seconds: f64,
    pub tokens_per_second: f64,
    pub threads: usize,
}

impl BenchResult {
    pub fn new(
        model_id: &str,
        precision: Precision,
        prompt_tokens: usize,
        generated_tokens: usize,
        elapsed_seconds: f64,
    ) -> Result<Self> {
        if !(elapsed_seconds > 0.0 && elapsed_seconds.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "elapsed time must be positive, got {elapsed_seconds}"
            )));
        }
        Ok(BenchResult {
            model_id: model_id.to_string(),
            precision,
            prompt_tokens,
            generated_tokens,
            elapsed_seconds,
            tokens_per_second: generated_tokens as f64 / elapsed_seconds,
            threads: 1,
        })
    }
}

/// Greedy decoding of up to `n_tokens` after `prompt`. The clock covers the
/// token loop only: prompt encoding and the prompt prefill are excluded.
/// Generation ends early at eos or at the context limit.
pub fn bench_inference<W: ModelWeights + ?Sized>(
    weights: &W,
    tokenizer: &Tokenizer,
    prompt: &str,
    n_tokens: usize,
    precision: Precision,
    model_id: &str,
) -> Result<BenchResult> {
    if n_tokens == 0 {
        return Err(Error::InvalidInput("n_tokens must be at least 1".into()));
    }
    let ids = prompt_ids(tokenizer, prompt);
    let ctx = weights.config().context_len;
    if ids.len() >= ctx {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            context_len: ctx,
        });
    }
    let eos = tokenizer.specials().eos;
    let mut state = DecodeState::new(weights);
    let mut logits = Vec::new();
    for &id in &ids {
        logits = state.step(id)?;
    }
    let budget = n_tokens.min(ctx - ids.len());
    let start = Instant::now();
    let mut generated = 0;
    while generated < budget {
        let next = argmax(&logits);
        if next == eos {
            break;
        }
        generated += 1;
        if generated < budget {
            logits = state.step(next)?;
        }
    }
    let elapsed = start.elapsed().as_secs_f64().max(1e-9);
    BenchResult::new(model_id, precision, ids.len(), generated, elapsed)
}
