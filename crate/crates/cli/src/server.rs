//! HTTP API for the review UI.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use pvscan_core::autolabel::{ReviewError, ReviewStore, TriageConfig};
use pvscan_core::model::{GroundTruthLabel, LocationLabel, QuantityBucket};
use pvscan_core::ndjson::write_atomic;
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::commands::triage::effective_config;
use crate::config::Config;
use crate::workspace::DataDir;

pub const DEFAULT_REVIEWER: &str = "reviewer";

const PLACEHOLDER_INDEX: &str = "<!doctype html>
<html><head><meta charset=\"utf-8\"><title>pvscan review</title></head>
<body><h1>pvscan review service</h1>
<p>No UI bundle configured. Start with <code>--static-dir</code> to serve one.
The API lives under <code>/api</code>.</p></body></html>
";

pub struct AppState {
    data: DataDir,
    store: ReviewStore,
    triage: Mutex<TriageConfig>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn open(data: DataDir, config: &Config) -> anyhow::Result<Arc<Self>> {
        let triage = effective_config(&data, config)?;
        let store = ReviewStore::open(data.review_queue(), data.labels())?;
        Ok(Arc::new(Self {
            data,
            store,
            triage: Mutex::new(triage),
            static_dir: config.serve.static_dir.clone(),
        }))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/queue", get(queue))
        .route("/api/tiles/{id}/image", get(tile_image))
        .route("/api/tiles/{id}/prediction", get(tile_prediction))
        .route("/api/items/{id}/correction", post(correction))
        .route("/api/reports/latest", get(latest_report))
        .route("/api/triage/config", get(get_triage).put(put_triage));
    let app = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    };
    app.with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    log::error!("{e}");
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
struct QueueParams {
    order: Option<String>,
    limit: Option<usize>,
}

async fn queue(
    State(s): State<Arc<AppState>>,
    Query(p): Query<QueueParams>,
) -> ApiResult<Response> {
    if let Some(order) = &p.order {
        if order != "confidence_asc" {
            return Err(bad_request(format!(
                "unsupported order {order:?}; only confidence_asc"
            )));
        }
    }
    let all = s.store.pending(None);
    let total = all.len();
    let items: Vec<_> = all
        .into_iter()
        .take(p.limit.unwrap_or(usize::MAX))
        .collect();
    let mut headers = HeaderMap::new();
    headers.insert("x-total-count", HeaderValue::from(total));
    Ok((headers, Json(items)).into_response())
}

async fn tile_image(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let records = s.data.tile_records().map_err(internal)?;
    let rec = records
        .iter()
        .find(|t| t.tile_id == id)
        .ok_or_else(|| not_found(format!("unknown tile {id}")))?;
    let bytes = std::fs::read(s.data.tile_png(rec))
        .map_err(|_| not_found(format!("no image for tile {id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn tile_prediction(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let latest = s.data.latest_predictions().map_err(internal)?;
    let record = latest
        .get(&id)
        .ok_or_else(|| not_found(format!("no prediction for tile {id}")))?;
    Ok(Json(json!({
        "tile_id": record.tile_id,
        "status": record.outcome.status,
        "assessment": record.outcome.assessment,
        "diagnostic": record.outcome.diagnostic,
        "bundle_hash": record.bundle_hash,
        "created_at": record.created_at,
    }))
    .into_response())
}

/// Correction body. Vocabulary values must be canonical.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectionBody {
    #[serde(alias = "solar_panels_present")]
    present: bool,
    location: LocationLabel,
    quantity: QuantityBucket,
    reviewer: Option<String>,
}

async fn correction(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let body: CorrectionBody =
        serde_json::from_slice(&body).map_err(|e| bad_request(e.to_string()))?;
    let reviewer = body
        .reviewer
        .unwrap_or_else(|| DEFAULT_REVIEWER.to_string());
    let label = GroundTruthLabel {
        tile_id: id.clone(),
        present: body.present,
        location: body.location,
        quantity: body.quantity,
        annotator: reviewer.clone(),
        annotated_at: Utc::now(),
    };
    match s.store.apply_correction(&id, label, &reviewer) {
        Ok(item) => Ok(Json(item).into_response()),
        Err(e @ ReviewError::Invalid(_)) => Err(bad_request(e.to_string())),
        Err(e @ ReviewError::NotFound(_)) => Err(not_found(e.to_string())),
        Err(e @ ReviewError::AlreadyResolved(_)) => {
            Err(ApiError(StatusCode::CONFLICT, e.to_string()))
        }
        Err(e @ ReviewError::Store(_)) => Err(internal(e)),
    }
}

async fn latest_report(State(s): State<Arc<AppState>>) -> ApiResult<Response> {
    let path = s.data.latest_report();
    let text = std::fs::read_to_string(&path)
        .map_err(|_| not_found("no report yet; run `pvscan evaluate`"))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(internal)?;
    Ok(Json(value).into_response())
}

async fn get_triage(State(s): State<Arc<AppState>>) -> Json<TriageConfig> {
    Json(*s.triage.lock().unwrap_or_else(|e| e.into_inner()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TriageUpdate {
    confidence_threshold: Option<f64>,
    likelihood_margin: Option<f64>,
    decision_boundary: Option<f64>,
}

async fn put_triage(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<TriageConfig>> {
    let update: TriageUpdate =
        serde_json::from_slice(&body).map_err(|e| bad_request(e.to_string()))?;
    let mut guard = s.triage.lock().unwrap_or_else(|e| e.into_inner());
    let mut next = *guard;
    if let Some(v) = update.confidence_threshold {
        next.confidence_threshold = v;
    }
    if let Some(v) = update.likelihood_margin {
        next.likelihood_margin = v;
    }
    if let Some(v) = update.decision_boundary {
        next.decision_boundary = v;
    }
    next.validate().map_err(|e| bad_request(e.to_string()))?;
    let text = serde_json::to_string_pretty(&next).map_err(internal)?;
    write_atomic(&s.data.triage_config(), text.as_bytes()).map_err(internal)?;
    *guard = next;
    Ok(Json(next))
}
