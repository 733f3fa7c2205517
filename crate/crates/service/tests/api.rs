use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use itermask::calibration::main_error_pool;
use itermask::data_io::{generate_phantom, PhantomSpec};
use itermask::reconstruction::{ModelKind, TrainConfig};
use itermask::Model32;
use itermask_service::{
    router, AcceptResponse, AppState, ModelBundle, ModelStore, RawState, ServiceConfig, SessionStatus, SessionSummary,
    StatePayload, API_VERSION_HEADER,
};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_bundle(calibrated: bool) -> ModelBundle {
    let cfg = TrainConfig {
        base_channels: 2,
        depth: 2,
        radius: 3.0,
        ..TrainConfig::default()
    };
    let main = Model32::untrained(ModelKind::Main, &cfg).unwrap();
    let init = Model32::untrained(ModelKind::Init, &cfg).unwrap();
    let calibration = calibrated.then(|| {
        let healthy: Vec<_> = (0..4)
            .map(|i| {
                generate_phantom::<f32>(&PhantomSpec {
                    height: 32,
                    width: 32,
                    lesion_radius: (2.0, 6.0),
                    seed: i,
                    ..PhantomSpec::default()
                })
                .unwrap()
                .slice
            })
            .collect();
        main_error_pool(&healthy, &main, &cfg.sampler, 1)
            .unwrap()
            .calibrate(80.0)
            .unwrap()
    });
    ModelBundle::new(main, init, calibration).unwrap()
}

fn app() -> Router {
    let models = ModelStore::new(None);
    models.insert("tiny", tiny_bundle(true));
    models.insert("raw", tiny_bundle(false));
    router(Arc::new(AppState::with_models(ServiceConfig::default(), models)))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    assert_eq!(resp.headers().get(API_VERSION_HEADER).unwrap(), "1");
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn ok<T: DeserializeOwned>(app: &Router, method: Method, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert!(status.is_success(), "{status}: {}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

fn phantom(seed: u64) -> Value {
    json!({"height": 32, "width": 32, "lesion": true, "lesion_radius": [3.0, 5.0], "seed": seed})
}

async fn create(app: &Router, extra: Value) -> StatePayload {
    let mut body = json!({"model": "tiny", "phantom": phantom(3), "termination_fraction": 0.0001});
    for (k, v) in extra.as_object().unwrap() {
        body[k] = v.clone();
    }
    ok(app, Method::POST, "/api/v1/sessions", Some(body)).await
}

fn error_code(bytes: &[u8]) -> String {
    let v: Value = serde_json::from_slice(bytes).unwrap();
    v["error"]["code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn create_yields_two_iterations_and_renderings() {
    let app = app();
    let s = create(&app, json!({})).await;
    assert_eq!(s.iteration, 2);
    assert_eq!(s.session.iterations, 2);
    assert_eq!(s.session.mask_areas.len(), 2);
    assert_eq!(s.session.mask_areas[0], s.session.brain_area);
    assert!(s.session.mask_areas[1] < s.session.brain_area);
    assert_eq!(s.session.status, SessionStatus::Idle);
    let pct = s.session.tau_percentile.unwrap();
    assert!((pct - 80.0).abs() < 1.0, "{pct}");
    for png in [&s.images.image, &s.images.mask, &s.images.error, &s.images.overlay] {
        let bytes = STANDARD.decode(png).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }

    let summary: SessionSummary = ok(&app, Method::GET, &format!("/api/v1/sessions/{}", s.session.id), None).await;
    assert_eq!(summary, s.session);
    let listed: Vec<SessionSummary> = ok(&app, Method::GET, "/api/v1/sessions", None).await;
    assert_eq!(listed.len(), 1);

    let raw: RawState = ok(&app, Method::GET, &format!("/api/v1/sessions/{}/raw?iteration=1", s.session.id), None).await;
    assert_eq!(raw.iteration, 1);
    assert_eq!(raw.mask.len(), 32 * 32);
    assert_eq!(raw.error_map.len(), 32 * 32);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let app = app();
    let (st, body) = call(
        &app,
        Method::POST,
        "/api/v1/sessions",
        Some(json!({"model": "nope", "phantom": phantom(1)})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");

    let junk = STANDARD.encode(b"definitely not an image");
    let (st, _) = call(
        &app,
        Method::POST,
        "/api/v1/sessions",
        Some(json!({"model": "tiny", "image_png": junk})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, _) = call(&app, Method::POST, "/api/v1/sessions", Some(json!({"model": "tiny"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    // An uncalibrated model needs an explicit threshold.
    let (st, _) = call(
        &app,
        Method::POST,
        "/api/v1/sessions",
        Some(json!({"model": "raw", "phantom": phantom(1)})),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(
        &app,
        Method::POST,
        "/api/v1/sessions",
        Some(json!({"model": "raw", "phantom": phantom(1), "tau": 0.5})),
    )
    .await;
    assert_eq!(st, StatusCode::CREATED);

    let (st, _) = call(&app, Method::GET, "/api/v1/sessions/missing", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let req = Request::get("/api/v1/health")
        .header(API_VERSION_HEADER, "2")
        .body(Body::empty())
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn png_upload_creates_a_session() {
    let app = app();
    let img = image::GrayImage::from_fn(24, 24, |x, y| {
        let (dx, dy) = (x as f64 - 11.5, y as f64 - 11.5);
        let inside = dx * dx + dy * dy < 100.0;
        image::Luma([if inside { 100 + ((x * 7 + y * 3) % 50) as u8 } else { 0 }])
    });
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .unwrap();
    let s: StatePayload = ok(
        &app,
        Method::POST,
        "/api/v1/sessions",
        Some(json!({"model": "tiny", "image_png": STANDARD.encode(&bytes), "percentile": 50.0})),
    )
    .await;
    assert_eq!((s.session.height, s.session.width), (24, 24));
    assert!(s.session.brain_area > 250 && s.session.brain_area < 350);
}

#[tokio::test]
async fn step_until_terminated_then_conflict() {
    let app = app();
    let s = create(&app, json!({"max_iterations": 4})).await;
    let id = s.session.id;
    let s: StatePayload = ok(&app, Method::POST, &format!("/api/v1/sessions/{id}/step"), Some(json!({"n": 50}))).await;
    assert!(s.session.termination.is_some());
    assert_eq!(s.session.status, SessionStatus::Terminated);
    assert!(s.session.iterations <= 5);
    let areas = &s.session.mask_areas;
    assert!(areas.windows(2).all(|w| w[1] <= w[0]), "{areas:?}");

    let (st, body) = call(&app, Method::POST, &format!("/api/v1/sessions/{id}/step"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(error_code(&body), "terminated");

    let (st, _) = call(
        &app,
        Method::GET,
        &format!("/api/v1/sessions/{id}/state?iteration=99"),
        None,
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn rollback_keeps_at_least_two_iterations() {
    let app = app();
    let id = create(&app, json!({})).await.session.id;
    let _: StatePayload = ok(&app, Method::POST, &format!("/api/v1/sessions/{id}/step"), Some(json!({"n": 2}))).await;
    let s: StatePayload = ok(
        &app,
        Method::POST,
        &format!("/api/v1/sessions/{id}/rollback"),
        Some(json!({"iteration": 1})),
    )
    .await;
    assert_eq!(s.session.iterations, 2);
    assert!(s.session.termination.is_none());
    let (st, _) = call(
        &app,
        Method::POST,
        &format!("/api/v1/sessions/{id}/rollback"),
        Some(json!({"iteration": 7})),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

fn quantile(raw: &RawState, q: f64) -> f64 {
    let mut v: Vec<f64> = raw
        .mask
        .iter()
        .zip(&raw.error_map)
        .filter(|(m, _)| **m == 1)
        .map(|(_, e)| *e as f64)
        .collect();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q) as usize]
}

fn count_at_least(raw: &RawState, tau: f64) -> usize {
    raw.mask
        .iter()
        .zip(&raw.error_map)
        .filter(|(m, e)| **m == 1 && **e as f64 >= tau)
        .count()
}

#[tokio::test]
async fn new_tau_after_rollback_changes_the_next_shrink() {
    let app = app();
    let id = create(&app, json!({})).await.session.id;
    let raw2: RawState = ok(&app, Method::GET, &format!("/api/v1/sessions/{id}/raw?iteration=2"), None).await;
    let (low, high) = (quantile(&raw2, 0.2), quantile(&raw2, 0.7));

    let _: SessionSummary = ok(&app, Method::PUT, &format!("/api/v1/sessions/{id}/tau"), Some(json!({"tau": low}))).await;
    let a: StatePayload = ok(&app, Method::POST, &format!("/api/v1/sessions/{id}/step"), None).await;
    assert_eq!(a.iteration, 3);
    assert_eq!(a.mask_area, count_at_least(&raw2, low));

    let _: StatePayload = ok(
        &app,
        Method::POST,
        &format!("/api/v1/sessions/{id}/rollback"),
        Some(json!({"iteration": 2})),
    )
    .await;
    let summary: SessionSummary =
        ok(&app, Method::PUT, &format!("/api/v1/sessions/{id}/tau"), Some(json!({"tau": high}))).await;
    assert_eq!(summary.iterations, 2);
    assert!((summary.tau - high).abs() < 1e-12);
    let b: StatePayload = ok(&app, Method::POST, &format!("/api/v1/sessions/{id}/step"), None).await;
    assert_eq!(b.iteration, 3);
    assert_eq!(b.mask_area, count_at_least(&raw2, high));
    assert!(b.mask_area < a.mask_area);

    // Iterations before the rollback point are untouched; only their
    // thresholded view follows the new tau.
    let again: RawState = ok(&app, Method::GET, &format!("/api/v1/sessions/{id}/raw?iteration=2"), None).await;
    assert_eq!(
        (&again.mask, &again.input, &again.reconstruction, &again.error_map),
        (&raw2.mask, &raw2.input, &raw2.reconstruction, &raw2.error_map)
    );
    let thresholded: Vec<u8> = raw2
        .mask
        .iter()
        .zip(&raw2.error_map)
        .map(|(m, e)| u8::from(*m == 1 && *e as f64 >= high))
        .collect();
    assert_eq!(again.segmentation, thresholded);

    let (st, _) = call(&app, Method::PUT, &format!("/api/v1/sessions/{id}/tau"), Some(json!({"tau": -1.0}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn replaying_a_session_is_deterministic() {
    let app = app();
    let mut traces = Vec::new();
    for _ in 0..2 {
        let id = create(&app, json!({"seed": 11})).await.session.id;
        let _: StatePayload = ok(&app, Method::POST, &format!("/api/v1/sessions/{id}/step"), Some(json!({"n": 3}))).await;
        let s: SessionSummary = ok(&app, Method::GET, &format!("/api/v1/sessions/{id}"), None).await;
        let mut raws = Vec::new();
        for t in 1..=s.iterations {
            let r: RawState = ok(&app, Method::GET, &format!("/api/v1/sessions/{id}/raw?iteration={t}"), None).await;
            raws.push(r);
        }
        traces.push(raws);
    }
    assert_eq!(traces[0], traces[1]);
}

#[tokio::test]
async fn accept_freezes_and_exports() {
    let app = app();
    let id = create(&app, json!({})).await.session.id;
    let (st, _) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}/export"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);

    let acc: AcceptResponse = ok(
        &app,
        Method::POST,
        &format!("/api/v1/sessions/{id}/accept"),
        Some(json!({"iteration": 2})),
    )
    .await;
    assert_eq!(acc.iteration, 2);
    assert_eq!(acc.session.status, SessionStatus::Accepted);
    let raw: RawState = ok(&app, Method::GET, &format!("/api/v1/sessions/{id}/raw?iteration=2"), None).await;
    assert_eq!(acc.area, raw.segmentation.iter().filter(|&&b| b == 1).count());

    let (st, _) = call(&app, Method::POST, &format!("/api/v1/sessions/{id}/step"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);

    let (st, png) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}/export?format=png"), None).await;
    assert_eq!(st, StatusCode::OK);
    let img = image::load_from_memory(&png).unwrap().into_luma8();
    assert_eq!(img.pixels().filter(|p| p.0[0] > 0).count(), acc.area);

    let (st, nii) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}/export?format=nifti"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(&nii[..2], &[0x1f, 0x8b]);

    let (st, _) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}/export?format=bmp"), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, _) = call(&app, Method::DELETE, &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
    let (st, _) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn models_are_loaded_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(true);
    let sub = dir.path().join("disk-model");
    std::fs::create_dir(&sub).unwrap();
    bundle.main.save(sub.join("main.ckpt")).unwrap();
    bundle.init.save(sub.join("init.ckpt")).unwrap();
    std::fs::write(
        sub.join("calibration.json"),
        serde_json::to_string(bundle.calibration.as_ref().unwrap()).unwrap(),
    )
    .unwrap();
    let config = ServiceConfig {
        model_dir: dir.path().to_path_buf(),
        ..ServiceConfig::default()
    };
    let app = router(Arc::new(AppState::new(config)));
    let ids: Vec<String> = ok(&app, Method::GET, "/api/v1/models", None).await;
    assert_eq!(ids, vec!["disk-model".to_string()]);
    let s: StatePayload = ok(
        &app,
        Method::POST,
        "/api/v1/sessions",
        Some(json!({"model": "disk-model", "phantom": phantom(5)})),
    )
    .await;
    assert_eq!(s.session.model, "disk-model");
    let (st, _) = call(
        &app,
        Method::POST,
        "/api/v1/sessions",
        Some(json!({"model": "../etc", "phantom": phantom(5)})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}
