use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use indiclm_core::lm::count_params;
use indiclm_core::quant::{LoadedModel, Precision};
use indiclm_core::tokenizer::Tokenizer;
use indiclm_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MODEL_FILE: &str = "model.plmf";
pub const TOKENIZER_FILE: &str = "tokenizer.txt";
const META_FILE: &str = "meta.json";

pub struct ModelEntry {
    pub id: String,
    pub model: LoadedModel,
    pub tokenizer: Tokenizer,
    pub language: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub precision: Precision,
    pub language: Option<String>,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub parameters: usize,
}

impl ModelEntry {
    pub fn new(id: &str, model: LoadedModel, tokenizer: Tokenizer, language: Option<String>) -> Result<Self> {
        let cfg = model.weights().config();
        if cfg.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "model {id}: tokenizer has {} tokens but the model expects {}",
                tokenizer.vocab_size(),
                cfg.vocab_size
            )));
        }
        Ok(ModelEntry {
            id: id.to_string(),
            model,
            tokenizer,
            language,
        })
    }

    pub fn summary(&self) -> ModelSummary {
        let c = self.model.weights().config();
        ModelSummary {
            id: self.id.clone(),
            precision: self.model.precision(),
            language: self.language.clone(),
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            context_len: c.context_len,
            parameters: count_params(c),
        }
    }
}

pub type Registry = BTreeMap<String, Arc<ModelEntry>>;

#[derive(Deserialize)]
struct Meta {
    language: Option<String>,
}

/// Every subdirectory holding `model.plmf` and `tokenizer.txt` becomes a
/// model named after the directory. An optional `meta.json` may set `language`.
pub fn load_models_dir(dir: &Path) -> Result<Registry> {
    let mut out = Registry::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let mut dirs: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    for d in dirs {
        let (model, tok) = (d.join(MODEL_FILE), d.join(TOKENIZER_FILE));
        if !model.is_file() || !tok.is_file() {
            continue;
        }
        let id = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let language = match std::fs::read_to_string(d.join(META_FILE)) {
            Ok(s) => serde_json::from_str::<Meta>(&s)?.language,
            Err(_) => None,
        };
        let entry = ModelEntry::new(&id, LoadedModel::load(&model)?, Tokenizer::load(&tok)?, language)?;
        log::info!("loaded model {id} ({})", entry.model.precision());
        out.insert(id, Arc::new(entry));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no models found under {}", dir.display())));
    }
    Ok(out)
}
