//! HTTP API: `/v1/simulate`, `/v1/predict`, `/v1/topologies`, `/v1/model/info`.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mtdt_core::model::Mtdt;
use mtdt_core::service::{self, PredictRequest, RequestMode, TopologyRegistry};
use mtdt_core::Error;
use serde_json::json;

pub struct AppState {
    pub model: Option<Mtdt>,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub registry: TopologyRegistry,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/simulate", post(simulate))
        .route("/v1/predict", post(predict))
        .route("/v1/topologies", get(topologies))
        .route("/v1/model/info", get(model_info))
        .with_state(state)
}

fn error(status: StatusCode, body: serde_json::Value) -> Response {
    (status, Json(body)).into_response()
}

fn no_checkpoint() -> Response {
    error(StatusCode::CONFLICT, json!({ "error": "no checkpoint loaded" }))
}

fn from_core(e: Error) -> Response {
    match e {
        Error::Validation(fields) => error(StatusCode::BAD_REQUEST, json!({ "error": "validation failed", "errors": fields })),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": other.to_string() })),
    }
}

#[allow(clippy::result_large_err)]
fn parse(body: &[u8], state: &AppState) -> Result<PredictRequest, Response> {
    let req: PredictRequest = serde_json::from_slice(body)
        .map_err(|e| error(StatusCode::BAD_REQUEST, json!({ "error": "malformed JSON", "detail": e.to_string() })))?;
    req.validate(&state.registry).map_err(from_core)?;
    Ok(req)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> mtdt_core::Result<T> + Send + 'static) -> Result<T, Response> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(from_core),
        Err(e) => Err(error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() }))),
    }
}

async fn simulate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req = match parse(&body, &state) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let st = state.clone();
    match blocking(move || service::simulate(&req, &st.registry)).await {
        Ok(record) => Json(record).into_response(),
        Err(resp) => resp,
    }
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req = match parse(&body, &state) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if req.mode == RequestMode::Inference && state.model.is_none() {
        return no_checkpoint();
    }
    let st = state.clone();
    match blocking(move || service::predict(&req, st.model.as_ref(), &st.registry)).await {
        Ok(resp) => Json(resp).into_response(),
        Err(resp) => resp,
    }
}

async fn topologies(State(state): State<Arc<AppState>>) -> Response {
    Json(service::topology_summaries(&state.registry)).into_response()
}

async fn model_info(State(state): State<Arc<AppState>>) -> Response {
    match &state.model {
        Some(m) => Json(service::model_info(m, state.meta.clone())).into_response(),
        None => no_checkpoint(),
    }
}
