use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use indiclm_core::decode::{generate, SamplerConfig};
use indiclm_core::evalkit::{
    aggregate_scores, latest_scores, reference_manifest, reference_table, HumanScore, ScoreStore, DEFAULT_TOP_N,
};
use indiclm_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::registry::Registry;

/// When set, every request must carry `Authorization: Bearer <token>`.
pub const AUTH_TOKEN_ENV: &str = "INDICLM_SERVE_TOKEN";

const MAX_SAMPLES: usize = 16;

#[derive(Clone)]
pub struct AppState {
    pub models: Arc<Registry>,
    pub store: Arc<ScoreStore>,
    pub auth_token: Option<Arc<str>>,
}

impl AppState {
    pub fn new(models: Registry, store: ScoreStore) -> Self {
        AppState {
            models: Arc::new(models),
            store: Arc::new(store),
            auth_token: None,
        }
    }

    pub fn with_auth_token(mut self, token: Option<String>) -> Self {
        self.auth_token = token.filter(|t| !t.is_empty()).map(Into::into);
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{message}")]
    NotFound { code: &'static str, message: String },
    #[error("{message}")]
    Invalid {
        code: &'static str,
        message: String,
        fields: Vec<FieldError>,
    },
    #[error("missing or wrong bearer token")]
    Unauthorized,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn invalid(code: &'static str, fields: Vec<FieldError>) -> Self {
        let message = fields
            .iter()
            .map(|f| format!("{}: {}", f.field, f.message))
            .collect::<Vec<_>>()
            .join("; ");
        ApiError::Invalid { code, message, fields }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidInput(_) | Error::SequenceTooLong { .. } | Error::TokenOutOfRange { .. } => {
                ApiError::Invalid {
                    code: "invalid_request",
                    message: e.to_string(),
                    fields: Vec::new(),
                }
            }
            Error::MissingScores(_) => ApiError::Invalid {
                code: "incomplete_scores",
                message: e.to_string(),
                fields: Vec::new(),
            },
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::Invalid {
            code: "invalid_json",
            message: r.body_text(),
            fields: Vec::new(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (status, code, fields) = match self {
            ApiError::NotFound { code, .. } => (StatusCode::NOT_FOUND, code, Vec::new()),
            ApiError::Invalid { code, fields, .. } => (StatusCode::BAD_REQUEST, code, fields),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized", Vec::new()),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", Vec::new()),
        };
        let body = json!({ "error": { "code": code, "message": message, "fields": fields } });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn default_temperature() -> f64 {
    1.0
}

fn default_top_p() -> Option<f64> {
    Some(0.9)
}

const DEFAULT_MAX_NEW_TOKENS: usize = 64;

fn default_n() -> usize {
    DEFAULT_TOP_N
}

/// Omitted fields take the evaluation defaults: three samples at
/// temperature 1.0 with nucleus 0.9. `top_p: null` disables the nucleus filter.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub model: String,
    pub prompt: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default = "default_top_p")]
    pub top_p: Option<f64>,
    /// Defaults to 64, capped at the model's context length.
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub text: String,
    pub tokens: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub model: String,
    pub seed: u64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub samples: Vec<Sample>,
}

fn field(name: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: name.to_string(),
        message: message.into(),
    }
}

fn check_generate(req: &GenerateRequest, context_len: usize) -> Vec<FieldError> {
    let mut bad = Vec::new();
    if req.prompt.is_empty() {
        bad.push(field("prompt", "must not be empty"));
    }
    if !req.temperature.is_finite() || req.temperature < 0.0 {
        bad.push(field("temperature", format!("must be finite and >= 0, got {}", req.temperature)));
    }
    if req.top_k == Some(0) {
        bad.push(field("top_k", "must be at least 1"));
    }
    if let Some(p) = req.top_p {
        if !(p > 0.0 && p <= 1.0) {
            bad.push(field("top_p", format!("must be in (0, 1], got {p}")));
        }
    }
    if !(1..=MAX_SAMPLES).contains(&req.n) {
        bad.push(field("n", format!("must be in 1..={MAX_SAMPLES}, got {}", req.n)));
    }
    if let Some(m) = req.max_new_tokens.filter(|m| !(1..=context_len).contains(m)) {
        bad.push(field("max_new_tokens", format!("must be in 1..={context_len}, got {m}")));
    }
    bad
}

async fn list_models(State(st): State<AppState>) -> Json<serde_json::Value> {
    let models: Vec<_> = st.models.values().map(|m| m.summary()).collect();
    Json(json!({ "models": models }))
}

async fn generate_handler(
    State(st): State<AppState>,
    payload: Result<Json<GenerateRequest>, JsonRejection>,
) -> ApiResult<Json<GenerateResponse>> {
    let Json(req) = payload?;
    let entry = st.models.get(&req.model).cloned().ok_or_else(|| ApiError::NotFound {
        code: "model_not_found",
        message: format!("no model named {:?}", req.model),
    })?;
    let context_len = entry.model.weights().config().context_len;
    let bad = check_generate(&req, context_len);
    if !bad.is_empty() {
        return Err(ApiError::invalid("invalid_sampler", bad));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let config = SamplerConfig {
        temperature: req.temperature,
        top_k: req.top_k,
        top_p: req.top_p,
        max_new_tokens: req.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS.min(context_len)),
        n_samples: req.n,
        stop_tokens: Vec::new(),
        seed,
    };
    let prompt = req.prompt.clone();
    let gens = tokio::task::spawn_blocking(move || generate(entry.model.weights(), &entry.tokenizer, &prompt, &config))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(GenerateResponse {
        model: req.model,
        seed,
        temperature: req.temperature,
        top_k: req.top_k,
        top_p: req.top_p,
        samples: gens
            .into_iter()
            .map(|g| Sample {
                index: g.sample_index,
                text: g.text,
                tokens: g.token_count,
                seconds: g.seconds,
            })
            .collect(),
    }))
}

async fn post_score(
    State(st): State<AppState>,
    payload: Result<Json<HumanScore>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<HumanScore>)> {
    let Json(mut score) = payload?;
    let bad: Vec<FieldError> = score
        .invalid_metrics()
        .into_iter()
        .map(|m| field(m.name(), format!("must be within [0, 5], got {}", score.get(m))))
        .collect();
    if !bad.is_empty() {
        return Err(ApiError::invalid("score_out_of_range", bad));
    }
    if score.evaluator_id.is_empty() {
        return Err(ApiError::invalid("invalid_request", vec![field("evaluator_id", "must not be empty")]));
    }
    // ids are assigned by the store
    score.id.clear();
    let store = st.store.clone();
    let saved = tokio::task::spawn_blocking(move || store.append(score))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(saved)))
}

async fn list_scores(State(st): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let scores = st.store.all()?;
    Ok(Json(json!({ "scores": scores })))
}

#[derive(Deserialize)]
struct TopN {
    n: Option<usize>,
}

fn current_table(st: &AppState, n: Option<usize>) -> ApiResult<indiclm_core::evalkit::EvalTable> {
    let scores = latest_scores(&st.store.all()?);
    Ok(aggregate_scores(&scores, n.unwrap_or(DEFAULT_TOP_N))?)
}

async fn aggregate(State(st): State<AppState>, Query(q): Query<TopN>) -> ApiResult<Json<serde_json::Value>> {
    Ok(Json(serde_json::to_value(current_table(&st, q.n)?).map_err(|e| ApiError::Internal(e.to_string()))?))
}

async fn export_csv(State(st): State<AppState>, Query(q): Query<TopN>) -> ApiResult<Response> {
    let csv = current_table(&st, q.n)?.to_csv()?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn list_reference() -> Json<serde_json::Value> {
    Json(json!({ "tables": reference_manifest() }))
}

async fn get_reference(Path(table): Path<String>) -> ApiResult<Response> {
    let (key, tsv) = match table.strip_suffix(".tsv") {
        Some(k) => (k, true),
        None => (table.as_str(), false),
    };
    let t = reference_table(key).ok_or_else(|| ApiError::NotFound {
        code: "table_not_found",
        message: format!("no reference table {key:?}"),
    })?;
    Ok(if tsv {
        ([(header::CONTENT_TYPE, "text/tab-separated-values; charset=utf-8")], t.to_tsv()).into_response()
    } else {
        Json(t).into_response()
    })
}

async fn require_token(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.auth_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == &**token);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn fallback() -> ApiError {
    ApiError::NotFound {
        code: "not_found",
        message: "no such endpoint".into(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/models", get(list_models))
        .route("/v1/generate", post(generate_handler))
        .route("/v1/scores", post(post_score).get(list_scores))
        .route("/v1/scores/aggregate", get(aggregate))
        .route("/v1/scores/export", get(export_csv))
        .route("/v1/reference", get(list_reference))
        .route("/v1/reference/{table}", get(get_reference))
        .fallback(fallback)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}
