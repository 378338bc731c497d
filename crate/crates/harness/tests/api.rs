use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use oncex::server::{router, AppState};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

fn app(store: &Path) -> Router {
    let f = fixtures();
    let state = AppState::load(&f.join("goldens"), &f.join("corpus"), store, Some(&f.join("ground_truth"))).unwrap();
    router(Arc::new(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn patients_are_ordered_by_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, rows) = call(&app, "GET", "/api/patients", None).await;
    assert_eq!(status, StatusCode::OK);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 10);
    let ds: Vec<u64> = rows.iter().map(|r| r["ds_score"].as_u64().unwrap()).collect();
    assert!(ds.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(rows[0]["patient_id"], "p08");
    for w in rows.windows(2) {
        if w[0]["ds_score"] == w[1]["ds_score"] {
            assert!(w[0]["patient_id"].as_str() < w[1]["patient_id"].as_str());
        }
    }
}

#[tokio::test]
async fn documents_carry_provenance_highlights() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, ents) = call(&app, "GET", "/api/patients/p01/entities", None).await;
    let inst = ents["entities"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|g| g["instances"].as_array().unwrap().clone())
        .find(|i| !i["provenance"].as_array().unwrap().is_empty())
        .expect("some instance has provenance");
    let prov = &inst["provenance"][0];
    let doc = prov["document_id"].as_str().unwrap();
    let id = inst["instance_id"].as_str().unwrap();
    let (status, body) = call(&app, "GET", &format!("/api/patients/p01/documents/{doc}?instance_id={id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let hl = body["highlights"].as_array().unwrap();
    assert!(!hl.is_empty());
    assert!(hl.iter().all(|h| h["instance_id"] == id));
    let text: Vec<char> = body["text"].as_str().unwrap().chars().collect();
    let (s, e) = (hl[0]["char_start"].as_u64().unwrap() as usize, hl[0]["char_end"].as_u64().unwrap() as usize);
    assert!(s < e && e <= text.len());

    let (status, _) = call(&app, "GET", "/api/patients/p01/documents/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn decisions_update_dashboard_and_completion() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, ents) = call(&app, "GET", "/api/patients/p02/entities", None).await;
    let group = ents["entities"].as_array().unwrap().iter().find(|g| g["count"].as_u64().unwrap() > 0).unwrap();
    let id = group["instances"][0]["instance_id"].as_str().unwrap().to_string();
    assert!(group["schema"]["attributes"].is_array());

    let (_, before) = call(&app, "GET", "/api/dashboard", None).await;
    assert_eq!(before["counts"]["n_correct"], 0);
    let d = json!({"patient_id": "p02", "instance_id": id, "action": "Approve", "reviewer": "r1"});
    let (status, resp) = call(&app, "POST", "/api/decisions", Some(d)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp["seq"], 1);
    assert_eq!(resp["dashboard"]["counts"]["n_correct"], 1);
    assert_eq!(resp["dashboard"]["approved_rate"], 1.0);
    let (_, after) = call(&app, "GET", "/api/dashboard", None).await;
    assert_eq!(after["counts"]["n_correct"], 1);

    let bad = json!({"patient_id": "p02", "instance_id": id, "action": "Edit", "reviewer": "r1"});
    assert_eq!(call(&app, "POST", "/api/decisions", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let unknown = json!({"patient_id": "p02", "instance_id": "zzz", "action": "Approve", "reviewer": "r1"});
    assert_eq!(call(&app, "POST", "/api/decisions", Some(unknown)).await.0, StatusCode::NOT_FOUND);

    let (_, c) = call(&app, "GET", "/api/patients/p02/complete", None).await;
    assert_eq!(c["complete"], false);
    assert_eq!(c["decided"], 1);
    let (status, c) = call(&app, "POST", "/api/patients/p02/complete", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(c["complete"], true);
    let (_, dash) = call(&app, "GET", "/api/dashboard", None).await;
    assert_eq!(dash["patients_complete"], 1);

    // the log outlives the server
    let (_, again) = call(&self::app(dir.path()), "GET", "/api/dashboard", None).await;
    assert_eq!(again["counts"]["n_correct"], 1);
    assert_eq!(again["patients_complete"], 1);
}
