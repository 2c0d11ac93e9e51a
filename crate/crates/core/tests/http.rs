use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use candle_core::DType;
use tower::ServiceExt;

use stepdraw::encoder::Vocabulary;
use stepdraw::service::{router, SessionManager};
use stepdraw::{Model, ModelConfig, TemplateDetector};

fn app() -> axum::Router {
    let cfg = ModelConfig {
        image_size: 32,
        encoder_channels: vec![8, 8, 16],
        downsample: vec![true, true, true],
        decoder_channels: vec![16, 8, 8],
        ..ModelConfig::desk()
    };
    let vocab = Vocabulary::from_grammar(&cfg.catalog);
    let detector = TemplateDetector { catalog: cfg.catalog.clone() };
    let model = Model::new(cfg, vocab, 3, DType::F32).unwrap();
    let mgr = SessionManager::new(Arc::new(model), Arc::new(detector), serde_json::json!({"name": "test"}), None).unwrap();
    router(Arc::new(mgr))
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

fn step(id: &str, instruction: &str) -> Request<Body> {
    Request::post(format!("/sessions/{id}/steps"))
        .header("content-type", "application/json")
        .body(Body::from(serde_json::json!({ "instruction": instruction }).to_string()))
        .unwrap()
}

#[tokio::test]
async fn session_lifecycle_and_status_codes() {
    let app = app();
    let (s, health) = send(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!((s, health["status"].as_str()), (StatusCode::OK, Some("ok")));
    let (s, info) = send(&app, Request::get("/model").body(Body::empty()).unwrap()).await;
    assert_eq!((s, info["checkpoint"]["name"].as_str()), (StatusCode::OK, Some("test")));
    assert_eq!(info["config"]["image_size"], 32);

    let (s, view) = send(&app, Request::post("/sessions").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = view["id"].as_str().unwrap().to_string();
    assert_eq!(view["t"], 0);

    let (s, r) = send(&app, step(&id, "add a red circle in the center")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["t"], 1);
    let (s, _) = send(&app, step(&id, "")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = send(&app, step("nope", "add a red circle in the center")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, view) = send(&app, Request::get(format!("/sessions/{id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(view["transcript"].as_array().unwrap().len(), 1);

    let image_ref = r["image_ref"].as_str().unwrap();
    let resp = app.clone().oneshot(Request::get(format!("/images/{image_ref}")).body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");

    for _ in 0..2 {
        let (s, _) = send(&app, Request::delete(format!("/sessions/{id}")).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::NO_CONTENT);
    }
    let (s, _) = send(&app, Request::get(format!("/sessions/{id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
