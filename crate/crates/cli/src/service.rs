//! Local HTTP render service.
//!
//! Requests render against an `Arc` snapshot of the loaded model, taken under
//! a short read lock; [`AppState::swap`] replaces the snapshot atomically, so
//! in-flight renders finish on the model they started with.

use std::sync::{Arc, RwLock};

use alignfield_core::hybrid::{format_anchors, parse_anchors, AnchorSet};
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::request::{anchors_from_specs, multipart_body, render, AnchorSpec, Model, RenderError, RenderRequest, MULTIPART_BOUNDARY};

pub struct AppState {
    model: RwLock<Arc<Model>>,
}

impl AppState {
    pub fn new(model: Model) -> Arc<Self> {
        Arc::new(AppState {
            model: RwLock::new(Arc::new(model)),
        })
    }

    pub fn snapshot(&self) -> Arc<Model> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn swap(&self, model: Model) {
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(model);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model/info", get(model_info))
        .route("/render", post(render_handler))
        .route("/anchors/validate", post(validate_anchors))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn error(status: StatusCode, field: Option<&str>, message: impl Into<String>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

fn rejection(r: JsonRejection) -> Response {
    // The body text carries serde's path, e.g. `camera.width: invalid type`.
    let status = match r {
        JsonRejection::JsonDataError(_) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::BAD_REQUEST,
    };
    error(status, None, r.body_text())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Response {
    Json(state.snapshot().info()).into_response()
}

async fn render_handler(State(state): State<Arc<AppState>>, body: Result<Json<RenderRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return rejection(r),
    };
    let model = state.snapshot();
    let result = tokio::task::spawn_blocking(move || render(&model, &req)).await;
    match result {
        Ok(Ok(maps)) if maps.len() == 1 => ([(header::CONTENT_TYPE, "image/png")], maps.into_iter().next().map(|m| m.png).unwrap_or_default()).into_response(),
        Ok(Ok(maps)) => (
            [(header::CONTENT_TYPE, format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}"))],
            multipart_body(&maps),
        )
            .into_response(),
        Ok(Err(RenderError::Request(e))) => error(StatusCode::UNPROCESSABLE_ENTITY, Some(&e.field), e.message),
        Ok(Err(RenderError::Render(e))) => error(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, None, format!("render task failed: {e}")),
    }
}

/// Either anchor-file text or a structured list.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorsRequest {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub anchors: Option<Vec<AnchorSpec>>,
    #[serde(default)]
    pub smoothing: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AnchorsResponse {
    pub anchors: Vec<AnchorSpec>,
    pub smoothing: f64,
    /// The same anchors in the anchor-file format.
    pub text: String,
}

async fn validate_anchors(State(state): State<Arc<AppState>>, body: Result<Json<AnchorsRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(r) => return rejection(r),
    };
    let n = state.snapshot().latent_dim();
    let parsed = match (&req.text, &req.anchors) {
        (Some(text), None) => match parse_anchors(text) {
            Ok(a) => a,
            Err(alignfield_core::Error::AnchorParse { line, message }) => {
                let body = json!({ "error": message, "field": "text", "line": line });
                return (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response();
            }
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, Some("text"), e.to_string()),
        },
        (None, Some(list)) => match anchors_from_specs(list, n, "anchors") {
            Ok(a) => a,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, Some(&e.field), e.message),
        },
        _ => return error(StatusCode::UNPROCESSABLE_ENTITY, None, "give exactly one of `text` or `anchors`"),
    };
    if let Some((k, a)) = parsed.iter().enumerate().find(|(_, a)| a.code.dim() != n) {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            Some(&format!("anchors[{k}].code")),
            format!("expected {n} components, found {}", a.code.dim()),
        );
    }
    let set = match AnchorSet::new(parsed, req.smoothing) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, Some("anchors"), e.to_string()),
    };
    Json(AnchorsResponse {
        anchors: set.anchors().iter().map(AnchorSpec::from_anchor).collect(),
        smoothing: set.smoothing,
        text: format_anchors(set.anchors()),
    })
    .into_response()
}
