//! HTTP+JSON session service around the refinement loop.
//!
//! A session holds one slice and its refinement run. Clients step the loop,
//! change the threshold, roll back to an earlier iteration and accept one
//! iteration as the segmentation. Requests to one session are applied in
//! order; different sessions run independently.

mod api;
mod config;
mod error;
mod models;
mod session;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{
    router, AcceptRequest, AcceptResponse, AppState, CreateSession, RollbackRequest, SetTau, StepRequest,
    API_PREFIX, API_VERSION, API_VERSION_HEADER,
};
pub use config::{ServiceConfig, ENV_MODEL_DIR, ENV_PORT};
pub use error::{ApiError, ApiResult};
pub use models::{ModelBundle, ModelStore, CALIBRATION_FILE, INIT_CHECKPOINT, MAIN_CHECKPOINT};
pub use session::{RawState, SessionStatus, SessionSummary, StateImages, StatePayload};

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad address: {e}")))?;
    let state = Arc::new(AppState::new(config));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
