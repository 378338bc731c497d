//! HTTP API for the adjudication workflow.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use oncex_core::corpus::{ingest_corpus, list_patients, PatientCorpus, DEFAULT_MAX_CHARS};
use oncex_core::evaluation::{disagreement_score, MatchPolicy};
use oncex_core::schema::{EntityInstance, SchemaRegistry};

use crate::eval::load_records;
use crate::store::{Action, Decision, ReviewStore, StoreError};
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub output_dir: PathBuf,
    pub corpus_root: PathBuf,
    pub store_dir: PathBuf,
    /// Ground truth for disagreement ordering; without it every score is
    /// null and patients are listed by id.
    pub ground_truth: Option<PathBuf>,
    pub bind: SocketAddr,
}

pub struct AppState {
    store: RwLock<ReviewStore>,
    corpora: BTreeMap<String, PatientCorpus>,
    ds: BTreeMap<String, u64>,
}

impl AppState {
    pub fn load(
        output_dir: &Path,
        corpus_root: &Path,
        store_dir: &Path,
        ground_truth: Option<&Path>,
    ) -> Result<Self, HarnessError> {
        let registry = SchemaRegistry::bundled();
        let records = load_records(output_dir, &registry)?;
        let mut corpora = BTreeMap::new();
        if corpus_root.is_dir() {
            for pid in list_patients(corpus_root).map_err(|e| HarnessError::Run(e.to_string()))? {
                if records.contains_key(&pid) {
                    let c = ingest_corpus(corpus_root, &pid, DEFAULT_MAX_CHARS).map_err(|e| HarnessError::Run(e.to_string()))?;
                    corpora.insert(pid, c);
                }
            }
        } else {
            return Err(HarnessError::MissingInput(corpus_root.to_path_buf()));
        }
        let mut ds = BTreeMap::new();
        if let Some(gt_dir) = ground_truth {
            let gt = load_records(gt_dir, &registry)?;
            for (pid, pred) in &records {
                let empty = oncex_core::schema::PatientRecord::new(pid.clone());
                let g = gt.get(pid).unwrap_or(&empty);
                let score = disagreement_score(&registry, g, pred, &MatchPolicy::alignment()).map_err(|e| HarnessError::Run(e.to_string()))?;
                ds.insert(pid.clone(), score);
            }
        }
        let store = ReviewStore::open(store_dir, registry, records).map_err(|e| HarnessError::Run(e.to_string()))?;
        Ok(AppState {
            store: RwLock::new(store),
            corpora,
            ds,
        })
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownPatient(_) | StoreError::UnknownInstance { .. } => StatusCode::NOT_FOUND,
            StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::Io { .. } | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn not_found(what: String) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/patients", get(patients))
        .route("/api/patients/{id}/entities", get(entities))
        .route("/api/patients/{id}/documents/{doc_id}", get(document))
        .route("/api/patients/{id}/complete", get(get_complete).post(post_complete))
        .route("/api/decisions", post(post_decision))
        .route("/api/dashboard", get(dashboard))
        .with_state(state)
}

#[derive(Serialize)]
struct PatientRow {
    patient_id: String,
    ds_score: Option<u64>,
    entity_counts: BTreeMap<String, usize>,
    complete: bool,
}

async fn patients(State(s): State<Arc<AppState>>) -> ApiResult {
    let store = s.store.read().expect("store lock");
    let mut rows: Vec<PatientRow> = store
        .records()
        .iter()
        .map(|(pid, r)| {
            let mut entity_counts = BTreeMap::new();
            for i in r.instances.iter().chain(&store.added_instances(pid)) {
                *entity_counts.entry(i.entity_type.clone()).or_insert(0) += 1;
            }
            PatientRow {
                patient_id: pid.clone(),
                ds_score: s.ds.get(pid).copied(),
                entity_counts,
                complete: store.is_complete(pid),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.ds_score.cmp(&a.ds_score).then_with(|| a.patient_id.cmp(&b.patient_id)));
    Ok(Json(serde_json::to_value(rows).expect("rows serialize")))
}

#[derive(Serialize)]
struct InstanceView<'a> {
    #[serde(flatten)]
    instance: &'a EntityInstance,
    decision: Option<Action>,
    reviewer_added: bool,
}

async fn entities(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.read().expect("store lock");
    let record = store.records().get(&id).ok_or_else(|| not_found(format!("unknown patient `{id}`")))?;
    let decided: BTreeMap<&str, Action> = store
        .final_decisions(&id)
        .into_iter()
        .filter_map(|d| d.instance_id.as_deref().map(|i| (i, d.action)))
        .collect();
    let added = store.added_instances(&id);
    let registry = store.registry();
    let mut groups = Vec::new();
    for spec in registry.entities() {
        let mut instances: Vec<InstanceView> = record
            .instances
            .iter()
            .filter(|i| i.entity_type == spec.name)
            .map(|i| InstanceView {
                instance: i,
                decision: decided.get(i.instance_id.as_str()).copied(),
                reviewer_added: false,
            })
            .collect();
        instances.extend(added.iter().filter(|i| i.entity_type == spec.name).map(|i| InstanceView {
            instance: i,
            decision: Some(Action::Add),
            reviewer_added: true,
        }));
        let complete = instances.iter().all(|i| i.decision.is_some());
        groups.push(json!({
            "entity_type": spec.name,
            "schema": registry.entity_json(&spec.name),
            "count": instances.len(),
            "complete": complete,
            "instances": instances,
        }));
    }
    Ok(Json(json!({
        "patient_id": id,
        "complete": store.is_complete(&id),
        "entities": groups,
    })))
}

#[derive(Deserialize)]
struct DocQuery {
    instance_id: Option<String>,
}

async fn document(
    State(s): State<Arc<AppState>>,
    UrlPath((id, doc_id)): UrlPath<(String, String)>,
    Query(q): Query<DocQuery>,
) -> ApiResult {
    let store = s.store.read().expect("store lock");
    let record = store.records().get(&id).ok_or_else(|| not_found(format!("unknown patient `{id}`")))?;
    let doc = s
        .corpora
        .get(&id)
        .and_then(|c| c.document(&doc_id))
        .ok_or_else(|| not_found(format!("unknown document `{doc_id}` for patient `{id}`")))?;
    let mut highlights = Vec::new();
    for inst in record.instances.iter().chain(&store.added_instances(&id)) {
        if q.instance_id.as_deref().is_some_and(|want| want != inst.instance_id) {
            continue;
        }
        for p in inst.provenance.iter().filter(|p| p.document_id == doc_id) {
            highlights.push(json!({
                "instance_id": inst.instance_id,
                "char_start": p.char_start,
                "char_end": p.char_end,
            }));
        }
    }
    Ok(Json(json!({
        "patient_id": id,
        "document_id": doc.document_id,
        "metadata": doc.metadata,
        "text": doc.text,
        "highlights": highlights,
    })))
}

async fn post_decision(State(s): State<Arc<AppState>>, Json(d): Json<Decision>) -> ApiResult {
    let mut store = s.store.write().expect("store lock");
    let pid = d.patient_id.clone();
    let tallies = store.record(d)?;
    let seq = store.decisions(&pid).last().map(|d| d.seq);
    Ok(Json(json!({
        "seq": seq,
        "patient_tallies": tallies,
        "dashboard": store.dashboard(),
    })))
}

async fn dashboard(State(s): State<Arc<AppState>>) -> ApiResult {
    let store = s.store.read().expect("store lock");
    Ok(Json(serde_json::to_value(store.dashboard()).expect("dashboard serializes")))
}

fn completion_view(store: &ReviewStore, id: &str) -> Result<Value, ApiError> {
    let record = store.records().get(id).ok_or_else(|| not_found(format!("unknown patient `{id}`")))?;
    let decided = store.final_decisions(id).iter().filter(|d| d.instance_id.is_some()).count();
    Ok(json!({
        "patient_id": id,
        "complete": store.is_complete(id),
        "decided": decided,
        "total": record.instances.len(),
    }))
}

async fn get_complete(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let store = s.store.read().expect("store lock");
    completion_view(&store, &id).map(Json)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CompleteBody {
    #[serde(default = "yes")]
    complete: bool,
    #[serde(default)]
    reviewer: String,
}

fn yes() -> bool {
    true
}

async fn post_complete(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    let body: CompleteBody = if body.iter().all(u8::is_ascii_whitespace) {
        CompleteBody {
            complete: true,
            ..Default::default()
        }
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?
    };
    let mut store = s.store.write().expect("store lock");
    store.set_complete(&id, body.complete, &body.reviewer)?;
    completion_view(&store, &id).map(Json)
}

/// Binds and serves until interrupted.
pub async fn serve(opts: &ServeOptions) -> Result<(), HarnessError> {
    let state = AppState::load(&opts.output_dir, &opts.corpus_root, &opts.store_dir, opts.ground_truth.as_deref())?;
    let listener = tokio::net::TcpListener::bind(opts.bind)
        .await
        .map_err(|e| HarnessError::Run(format!("cannot bind {}: {e}", opts.bind)))?;
    log::info!("review service listening on {}", opts.bind);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| HarnessError::Run(e.to_string()))
}
