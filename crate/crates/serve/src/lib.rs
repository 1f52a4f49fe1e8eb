//! HTTP service: generation, human scores and bundled reference tables.

mod api;
mod registry;

pub use api::{router, ApiError, AppState, GenerateRequest, GenerateResponse, Sample, AUTH_TOKEN_ENV};
pub use registry::{load_models_dir, ModelEntry, ModelSummary, Registry, MODEL_FILE, TOKENIZER_FILE};

/// Serves `state` on `addr` until ctrl-c.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
