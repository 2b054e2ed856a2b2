mod common;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;
use triage_cli::server::{router, AppState};
use triage_core::engine::{self, Recommender};

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn trained(dir: &std::path::Path) -> triage_core::config::EngineConfig {
    common::setup(dir);
    let cfg = common::config(dir);
    engine::stage_ingest(&cfg).unwrap();
    engine::stage_train(&cfg).unwrap();
    engine::stage_index(&cfg).unwrap();
    cfg
}

#[tokio::test]
async fn recommend_health_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let rec = Recommender::load(&cfg).unwrap();
    let app = router(AppState::with_recommender(cfg, Some(Arc::new(rec))));

    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ready"], json!(true));
    assert_eq!(v["labels"], json!(3));

    let body = json!({"title": "crash", "description": common::PARSER_QUERY, "k": 2});
    let (s, v) = call(&app, "POST", "/recommend", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let cands = v["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 2);
    assert_eq!(v["mode"], json!("developer"));
    for c in cands {
        for f in ["fs", "nps", "nis"] {
            assert!(c[f].as_f64().unwrap().is_finite());
        }
    }
    let fs: Vec<f64> = cands.iter().map(|c| c["fs"].as_f64().unwrap()).collect();
    assert!(fs[0] >= fs[1]);
    // same request, same answer
    let (_, again) = call(&app, "POST", "/recommend", Some(body)).await;
    assert_eq!(v, again);

    let (s, v) = call(&app, "POST", "/recommend", Some(json!({"title": "x", "description": "parser", "k": 99}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 3);

    let (s, v) = call(&app, "POST", "/recommend", Some(json!({"title": "", "description": "", "k": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
    let (s, _) = call(&app, "POST", "/recommend", Some(json!({"title": "a", "description": "b", "k": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call(&app, "POST", "/recommend", Some(json!({"title": 5}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn unavailable_until_reload() {
    let dir = tempfile::tempdir().unwrap();
    common::setup(dir.path());
    let cfg = common::config(dir.path());
    let app = router(AppState::new(cfg.clone()));

    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ready"], json!(false));
    let (s, _) = call(&app, "POST", "/recommend", Some(json!({"title": "a", "description": "parser", "k": 1}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, _) = call(&app, "POST", "/reload", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    let cfg2 = cfg.clone();
    tokio::task::spawn_blocking(move || {
        engine::stage_ingest(&cfg2).unwrap();
        engine::stage_train(&cfg2).unwrap();
        engine::stage_index(&cfg2).unwrap();
    })
    .await
    .unwrap();
    let (s, v) = call(&app, "POST", "/reload", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, v) = call(&app, "POST", "/recommend", Some(json!({"title": "a", "description": common::PARSER_QUERY, "k": 1}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["candidates"].as_array().unwrap().len(), 1);
}
