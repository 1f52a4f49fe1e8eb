//! Decoder-only transformer language model.

pub mod checkpoint;
mod config;
pub mod infer;
mod model;
mod params;
mod scalar;

pub use checkpoint::{load_params, save_params, CheckpointFile};
pub use config::{ModelConfig, DEFAULT_CONTEXT_LEN};
pub use infer::{forward_incremental, DecodeState, ModelWeights, Proj};
pub use model::{
    backward_seq, batch_loss, forward, logit_grad, loss_and_grad, perplexity, sequence_nll_sum,
    ForwardOutput, TrainSeq,
};
pub use params::{init_model, Layer, Parameters, TensorKind, TensorMut, TensorRef};
pub use scalar::Scalar;
pub(crate) use model::nll;

/// Closed-form parameter count for a configuration.
pub fn count_params(config: &ModelConfig) -> usize {
    config.count_params()
}
