use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::scalar::Scalar;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

/// Weights of one decoder block. Linear weights are stored `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub attn_norm: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ff_norm: Vec<T>,
    pub w_up: Vec<T>,
    pub w_down: Vec<T>,
}

/// All model weights. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    pub config: ModelConfig,
    pub embedding: Vec<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Vec<T>,
    /// Present only when the output head is untied.
    pub head: Option<Vec<T>>,
}

/// Which kind of tensor a named entry is; drives weight decay and quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Norm,
    Linear,
    Head,
}

pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub data: &'a mut Vec<T>,
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.ff_dim());
        let z = |n: usize| vec![T::zero(); n];
        Ok(Parameters {
            config: config.clone(),
            embedding: z(v * d),
            layers: (0..config.n_layers)
                .map(|_| Layer {
                    attn_norm: z(d),
                    wq: z(d * d),
                    wk: z(d * d),
                    wv: z(d * d),
                    wo: z(d * d),
                    ff_norm: z(d),
                    w_up: z(f * d),
                    w_down: z(d * f),
                })
                .collect(),
            final_norm: z(d),
            head: (!config.tie_embeddings).then(|| z(v * d)),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config was validated on construction")
    }

    /// Canonical tensor order, shared by checkpoints, optimizers and gradient checks.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let c = &self.config;
        let (v, d, f) = (c.vocab_size, c.d_model, c.ff_dim());
        let mut out = vec![TensorRef {
            name: "embedding".into(),
            shape: vec![v, d],
            kind: TensorKind::Embedding,
            data: &self.embedding[..],
        }];
        for (i, l) in self.layers.iter().enumerate() {
            let entries: [(&str, &Vec<T>, Vec<usize>, TensorKind); 8] = [
                ("attn_norm", &l.attn_norm, vec![d], TensorKind::Norm),
                ("wq", &l.wq, vec![d, d], TensorKind::Linear),
                ("wk", &l.wk, vec![d, d], TensorKind::Linear),
                ("wv", &l.wv, vec![d, d], TensorKind::Linear),
                ("wo", &l.wo, vec![d, d], TensorKind::Linear),
                ("ff_norm", &l.ff_norm, vec![d], TensorKind::Norm),
                ("w_up", &l.w_up, vec![f, d], TensorKind::Linear),
                ("w_down", &l.w_down, vec![d, f], TensorKind::Linear),
            ];
            for (name, data, shape, kind) in entries {
                out.push(TensorRef {
                    name: format!("layers.{i}.{name}"),
                    shape,
                    kind,
                    data,
                });
            }
        }
        out.push(TensorRef {
            name: "final_norm".into(),
            shape: vec![d],
            kind: TensorKind::Norm,
            data: &self.final_norm,
        });
        if let Some(h) = &self.head {
            out.push(TensorRef {
                name: "head".into(),
                shape: vec![v, d],
                kind: TensorKind::Head,
                data: h,
            });
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let c = self.config.clone();
        let (v, d, f) = (c.vocab_size, c.d_model, c.ff_dim());
        let mut out = vec![TensorMut {
            name: "embedding".into(),
            shape: vec![v, d],
            kind: TensorKind::Embedding,
            data: &mut self.embedding,
        }];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let entries: [(&str, &mut Vec<T>, Vec<usize>, TensorKind); 8] = [
                ("attn_norm", &mut l.attn_norm, vec![d], TensorKind::Norm),
                ("wq", &mut l.wq, vec![d, d], TensorKind::Linear),
                ("wk", &mut l.wk, vec![d, d], TensorKind::Linear),
                ("wv", &mut l.wv, vec![d, d], TensorKind::Linear),
                ("wo", &mut l.wo, vec![d, d], TensorKind::Linear),
                ("ff_norm", &mut l.ff_norm, vec![d], TensorKind::Norm),
                ("w_up", &mut l.w_up, vec![f, d], TensorKind::Linear),
                ("w_down", &mut l.w_down, vec![d, f], TensorKind::Linear),
            ];
            for (name, data, shape, kind) in entries {
                out.push(TensorMut {
                    name: format!("layers.{i}.{name}"),
                    shape,
                    kind,
                    data,
                });
            }
        }
        out.push(TensorMut {
            name: "final_norm".into(),
            shape: vec![d],
            kind: TensorKind::Norm,
            data: &mut self.final_norm,
        });
        if let Some(h) = &mut self.head {
            out.push(TensorMut {
                name: "head".into(),
                shape: vec![v, d],
                kind: TensorKind::Head,
                data: h,
            });
        }
        out
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Output projection matrix `[vocab × d]` (the embedding when tied).
    pub fn head_matrix(&self) -> &[T] {
        self.head.as_deref().unwrap_or(&self.embedding)
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name)
    }

    pub fn fill(&mut self, value: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from_f64(Scalar::to_f64(x))).collect::<Vec<U>>();
        Parameters {
            config: self.config.clone(),
            embedding: conv(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    attn_norm: conv(&l.attn_norm),
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    ff_norm: conv(&l.ff_norm),
                    w_up: conv(&l.w_up),
                    w_down: conv(&l.w_down),
                })
                .collect(),
            final_norm: conv(&self.final_norm),
            head: self.head.as_ref().map(conv),
        }
    }
}

/// Deterministic initialisation: N(0, 0.02²) weights, output projections of
/// each residual branch scaled by `1/√(2·n_layers)`, norm gains at 1.
pub fn init_model(config: &ModelConfig) -> Result<Parameters<f32>> {
    let mut params = Parameters::<f32>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f64, INIT_STD).map_err(|e| Error::Config(e.to_string()))?;
    let residual = Normal::new(0.0f64, INIT_STD / (2.0 * config.n_layers as f64).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    for t in params.tensors_mut() {
        let is_residual_out = t.name.ends_with(".wo") || t.name.ends_with(".w_down");
        match t.kind {
            TensorKind::Norm => t.data.iter_mut().for_each(|x| *x = 1.0),
            _ => {
                let dist = if is_residual_out { &residual } else { &normal };
                t.data
                    .iter_mut()
                    .for_each(|x| *x = dist.sample(&mut rng) as f32);
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = ModelConfig::new(32, 16, 2, 2).with_seed(7);
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        let c = init_model(&cfg.clone().with_seed(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn norm_gains_start_at_one() {
        let cfg = ModelConfig::new(32, 16, 3, 4);
        let p = init_model(&cfg).unwrap();
        for t in p.tensors() {
            if t.kind == TensorKind::Norm {
                assert!(t.data.iter().all(|&g| g == 1.0), "{}", t.name);
            }
        }
    }

    #[test]
    fn element_count_matches_closed_form() {
        let cfg = ModelConfig::new(16, 8, 1, 2);
        let p = init_model(&cfg).unwrap();
        assert_eq!(p.num_elements(), cfg.count_params());
        let untied = init_model(&cfg.clone().with_tied(false)).unwrap();
        assert_eq!(untied.num_elements(), cfg.with_tied(false).count_params());
    }

    #[test]
    fn shapes_cover_data() {
        let p = init_model(&ModelConfig::new(20, 12, 2, 3).with_ff_mult(2)).unwrap();
        for t in p.tensors() {
            assert_eq!(t.shape.iter().product::<usize>(), t.data.len(), "{}", t.name);
        }
    }
}
