use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex as StdMutex, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use itermask::data_io::{encode_png, generate_phantom, mask_image, save_mask_volume, slice_from_raw, PhantomSpec};
use itermask::refinement::{RefinementConfig, RefinementRun};
use itermask::{Plane, Slice32};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::config::ServiceConfig;
use crate::error::{ApiError, ApiResult};
use crate::models::{ModelBundle, ModelStore};
use crate::session::{now_ms, Accepted, Session, SessionStatus, SessionSummary, StatePayload};

pub const API_VERSION: &str = "1";
pub const API_VERSION_HEADER: &str = "x-itermask-api-version";
pub const API_PREFIX: &str = "/api/v1";

struct SessionSlot {
    busy: AtomicBool,
    summary: StdMutex<SessionSummary>,
    session: Arc<Mutex<Session>>,
}

pub struct AppState {
    pub config: ServiceConfig,
    pub models: ModelStore,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let models = ModelStore::new(Some(config.model_dir.clone()));
        AppState::with_models(config, models)
    }

    pub fn with_models(config: ServiceConfig, models: ModelStore) -> Self {
        AppState {
            config,
            models,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        self.sessions
            .read()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id:?}")))
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/models", get(list_models))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/raw", get(get_raw))
        .route("/sessions/{id}/tau", put(set_tau))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/rollback", post(rollback))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/export", get(export));
    Router::new()
        .nest(API_PREFIX, api)
        .layer(middleware::from_fn(api_version))
        .with_state(state)
}

async fn api_version(req: Request, next: Next) -> Response {
    let requested = req.headers().get(API_VERSION_HEADER).cloned();
    let mut resp = match requested {
        Some(v) if v.as_bytes() != API_VERSION.as_bytes() => ApiError::BadRequest(format!(
            "unsupported API version {:?}; this server speaks {API_VERSION}",
            String::from_utf8_lossy(v.as_bytes())
        ))
        .into_response(),
        _ => next.run(req).await,
    };
    resp.headers_mut()
        .insert(API_VERSION_HEADER, HeaderValue::from_static(API_VERSION));
    resp
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    api_version: &'static str,
    sessions: usize,
}

async fn health(State(state): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok",
        api_version: API_VERSION,
        sessions: state.sessions.read().expect("session lock").len(),
    })
}

async fn list_models(State(state): State<Shared>) -> Json<Vec<String>> {
    Json(state.models.ids())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub model: String,
    pub phantom: Option<PhantomSpec>,
    /// Base64 PNG; the brain is the largest nonzero region.
    pub image_png: Option<String>,
    pub tau: Option<f64>,
    pub percentile: Option<f64>,
    pub seed: Option<u64>,
    pub first_shrink_percentile: Option<f64>,
    pub termination_fraction: Option<f64>,
    pub max_iterations: Option<usize>,
}

fn decode_slice(req: &CreateSession) -> ApiResult<Slice32> {
    match (&req.phantom, &req.image_png) {
        (Some(spec), None) => Ok(generate_phantom::<f32>(spec)?.slice),
        (None, Some(b64)) => {
            let bytes = STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::BadRequest(format!("image_png is not base64: {e}")))?;
            let img = image::load_from_memory(&bytes)
                .map_err(|e| ApiError::BadRequest(format!("image_png is not a readable image: {e}")))?
                .into_luma16();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw = Plane::from_vec(h, w, img.into_raw().into_iter().map(f32::from).collect())?;
            Ok(slice_from_raw(&raw, "upload", 0, "unknown")?)
        }
        _ => Err(ApiError::BadRequest("give exactly one of `phantom` or `image_png`".into())),
    }
}

fn resolve_tau(
    models: &ModelBundle,
    tau: Option<f64>,
    percentile: Option<f64>,
    default_percentile: Option<f64>,
) -> ApiResult<f64> {
    let uncalibrated = || ApiError::BadRequest("model has no calibration; give `tau` explicitly".into());
    match (tau, percentile) {
        (Some(_), Some(_)) => Err(ApiError::BadRequest("give `tau` or `percentile`, not both".into())),
        (Some(t), None) => Ok(t),
        (None, Some(p)) => Ok(models.calibration.as_ref().ok_or_else(uncalibrated)?.tau_at(p)?),
        (None, None) => match default_percentile {
            Some(p) => Ok(models.calibration.as_ref().ok_or_else(uncalibrated)?.tau_at(p)?),
            None => Err(ApiError::BadRequest("give `tau` or `percentile`".into())),
        },
    }
}

fn new_session_id() -> String {
    format!("{:016x}", rand::random::<u64>())
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<StatePayload>)> {
    if state.sessions.read().expect("session lock").len() >= state.config.max_sessions {
        return Err(ApiError::Conflict("session limit reached".into()));
    }
    let models = state.models.get(&req.model)?;
    let slice = decode_slice(&req)?;
    let defaults = RefinementConfig::default();
    let config = RefinementConfig {
        tau: resolve_tau(&models, req.tau, req.percentile, Some(state.config.default_percentile))?,
        radius: models.main.radius(),
        seed: req.seed.unwrap_or(defaults.seed),
        first_shrink_percentile: req.first_shrink_percentile.unwrap_or(defaults.first_shrink_percentile),
        termination_fraction: req.termination_fraction.unwrap_or(defaults.termination_fraction),
        max_iterations: req.max_iterations.unwrap_or(defaults.max_iterations),
    };
    let model_id = req.model.clone();
    let session = tokio::task::spawn_blocking(move || -> ApiResult<Session> {
        let run = RefinementRun::start(&slice, &models.main, &models.init, config)?;
        let now = now_ms();
        Ok(Session {
            id: new_session_id(),
            model_id,
            models,
            run,
            accepted: None,
            created_ms: now,
            updated_ms: now,
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;

    let payload = session.state(None)?;
    let id = session.id.clone();
    let slot = Arc::new(SessionSlot {
        busy: AtomicBool::new(false),
        summary: StdMutex::new(session.summary()),
        session: Arc::new(Mutex::new(session)),
    });
    state.sessions.write().expect("session lock").insert(id.clone(), slot);
    tracing::info!(session = %id, "session created");
    Ok((StatusCode::CREATED, Json(payload)))
}

async fn list_sessions(State(state): State<Shared>) -> Json<Vec<SessionSummary>> {
    let slots: Vec<_> = state.sessions.read().expect("session lock").values().cloned().collect();
    let mut out: Vec<SessionSummary> = slots.iter().map(|s| cached_summary(s)).collect();
    out.sort_by_key(|s| (s.created_ms, s.id.clone()));
    Json(out)
}

fn cached_summary(slot: &SessionSlot) -> SessionSummary {
    let mut s = slot.summary.lock().expect("summary lock").clone();
    if slot.busy.load(Ordering::Acquire) {
        s.status = SessionStatus::Stepping;
    }
    s
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<SessionSummary>> {
    let slot = state.slot(&id)?;
    Ok(Json(cached_summary(&slot)))
}

async fn delete_session(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    state
        .sessions
        .write()
        .expect("session lock")
        .remove(&id)
        .ok_or_else(|| ApiError::NotFound(format!("session {id:?}")))?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Default, Deserialize)]
pub struct IterationQuery {
    pub iteration: Option<usize>,
}

async fn get_state(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<IterationQuery>,
) -> ApiResult<Json<StatePayload>> {
    let slot = state.slot(&id)?;
    let session = slot.session.lock().await;
    Ok(Json(session.state(q.iteration)?))
}

async fn get_raw(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<IterationQuery>,
) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    let session = slot.session.lock().await;
    Ok(Json(session.raw(q.iteration)?).into_response())
}

/// Runs `f` on the session on a blocking thread, holding the session's lock
/// for the whole call so requests to one session apply strictly in order.
async fn mutate<R, F>(state: &AppState, id: &str, f: F) -> ApiResult<R>
where
    R: Send + 'static,
    F: FnOnce(&mut Session) -> ApiResult<R> + Send + 'static,
{
    let slot = state.slot(id)?;
    let mut guard = slot.session.clone().lock_owned().await;
    slot.busy.store(true, Ordering::Release);
    let joined = tokio::task::spawn_blocking(move || {
        let out = f(&mut guard);
        guard.touch();
        let summary = guard.summary();
        (out, summary)
    })
    .await;
    slot.busy.store(false, Ordering::Release);
    let (out, summary) = joined.map_err(|e| ApiError::Internal(e.to_string()))?;
    *slot.summary.lock().expect("summary lock") = summary;
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetTau {
    pub tau: Option<f64>,
    pub percentile: Option<f64>,
}

async fn set_tau(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<SetTau>,
) -> ApiResult<Json<SessionSummary>> {
    let summary = mutate(&state, &id, move |s| {
        s.ensure_open()?;
        let tau = resolve_tau(&s.models, req.tau, req.percentile, None)?;
        s.run.set_tau(tau)?;
        Ok(s.summary())
    })
    .await?;
    Ok(Json(summary))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    /// Number of iterations to advance; stops early on termination.
    pub n: Option<usize>,
}

async fn step(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Option<Json<StepRequest>>,
) -> ApiResult<Json<StatePayload>> {
    let n = body.and_then(|Json(b)| b.n).unwrap_or(1);
    if n == 0 {
        return Err(ApiError::BadRequest("n must be at least 1".into()));
    }
    let payload = mutate(&state, &id, move |s| {
        s.ensure_open()?;
        let main = s.models.clone();
        for _ in 0..n {
            if s.run.step(&main.main)?.is_some() {
                break;
            }
        }
        s.state(None)
    })
    .await?;
    Ok(Json(payload))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackRequest {
    pub iteration: usize,
}

async fn rollback(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<RollbackRequest>,
) -> ApiResult<Json<StatePayload>> {
    let payload = mutate(&state, &id, move |s| {
        s.ensure_open()?;
        s.run.rollback(req.iteration)?;
        s.state(None)
    })
    .await?;
    Ok(Json(payload))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptRequest {
    pub iteration: Option<usize>,
    pub tau: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AcceptResponse {
    pub session: SessionSummary,
    pub iteration: usize,
    pub tau: f64,
    pub area: usize,
    pub segmentation_png: String,
    pub export: String,
}

async fn accept(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Option<Json<AcceptRequest>>,
) -> ApiResult<Json<AcceptResponse>> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let export = format!("{API_PREFIX}/sessions/{id}/export");
    let resp = mutate(&state, &id, move |s| {
        s.ensure_open()?;
        let iteration = s.resolve_iteration(req.iteration)?;
        let tau = req.tau.unwrap_or(s.run.tau());
        let segmentation = s.run.segmentation_at(iteration, tau)?;
        let png = STANDARD.encode(encode_png(mask_image(&segmentation))?);
        let area = segmentation.area();
        s.accepted = Some(Accepted {
            iteration,
            tau,
            segmentation,
        });
        Ok(AcceptResponse {
            session: s.summary(),
            iteration,
            tau,
            area,
            segmentation_png: png,
            export,
        })
    })
    .await?;
    Ok(Json(resp))
}

#[derive(Debug, Default, Deserialize)]
pub struct ExportQuery {
    pub format: Option<String>,
}

async fn export(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let slot = state.slot(&id)?;
    let session = slot.session.lock().await;
    let accepted = session
        .accepted
        .as_ref()
        .ok_or_else(|| ApiError::Conflict("accept an iteration before exporting".into()))?;
    let format = q.format.as_deref().unwrap_or("png");
    let (bytes, content_type, name) = match format {
        "png" => (encode_png(mask_image(&accepted.segmentation))?, "image/png", "segmentation.png"),
        "nifti" => {
            let dir = tempfile::tempdir().map_err(|e| ApiError::Internal(e.to_string()))?;
            let path = dir.path().join("segmentation.nii.gz");
            save_mask_volume(&path, std::slice::from_ref(&accepted.segmentation), None)?;
            let bytes = std::fs::read(&path).map_err(|e| ApiError::Internal(e.to_string()))?;
            (bytes, "application/gzip", "segmentation.nii.gz")
        }
        other => return Err(ApiError::BadRequest(format!("unknown export format {other:?}; use png or nifti"))),
    };
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, content_type)
        .header(header::CONTENT_DISPOSITION, format!("attachment; filename=\"{name}\""))
        .body(Body::from(bytes))
        .map_err(|e| ApiError::Internal(e.to_string()))?)
}
