use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RngState, TrainState};
use crate::error::{Error, Result};
use crate::lm::checkpoint::{param_records, params_from_records, CheckpointFile};
use crate::lm::Parameters;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    best_val_loss: Option<f64>,
    rng: RngState,
}

/// Writes weights and, when given, the optimizer state. The file is written
/// to a temporary name and renamed, so a crash never leaves a partial file
/// under `path`.
pub fn save_checkpoint(params: &Parameters<f32>, state: Option<&TrainState>, path: &Path) -> Result<()> {
    let mut tensors = param_records(params, "");
    let meta = match state {
        Some(s) => {
            tensors.extend(param_records(&s.m, M_PREFIX));
            tensors.extend(param_records(&s.v, V_PREFIX));
            Some(serde_json::to_value(StateMeta {
                step: s.step,
                best_val_loss: s.best_val_loss,
                rng: s.rng,
            })?)
        }
        None => None,
    };
    CheckpointFile {
        config: params.config.clone(),
        tensors,
        state: meta,
    }
    .write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, Option<TrainState>)> {
    let file = CheckpointFile::read(path)?;
    file.config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    let params = params_from_records(&file.config, &file, "")?;
    let state = match &file.state {
        Some(v) => {
            let meta: StateMeta = serde_json::from_value(v.clone())
                .map_err(|e| Error::Checkpoint(format!("bad training state: {e}")))?;
            Some(TrainState {
                step: meta.step,
                best_val_loss: meta.best_val_loss,
                rng: meta.rng,
                m: params_from_records(&file.config, &file, M_PREFIX)?,
                v: params_from_records(&file.config, &file, V_PREFIX)?,
            })
        }
        None => None,
    };
    Ok((params, state))
}
