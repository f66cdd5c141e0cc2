//! HTTP front of the annotation service. Every route lives under `/v1`.
//!
//! | method | path | body / result |
//! |---|---|---|
//! | POST | `/v1/sessions` | `{"images":[path...],"class":?}` → session |
//! | GET | `/v1/sessions/{id}` | session |
//! | GET | `/v1/sessions/{id}/next` | `{"image":entry or null,"remaining":n}` |
//! | POST | `/v1/sessions/{id}/images/{img}/prompts` | `{"instance":i,"x":x,"y":y}` → segmentation |
//! | DELETE | `/v1/sessions/{id}/images/{img}/prompts/last` | segmentation |
//! | POST | `/v1/sessions/{id}/images/{img}/commit` | record |
//! | GET | `/v1/sessions/{id}/images/{img}/mask.png` | PNG |
//! | GET | `/v1/sessions/{id}/export` | `{"manifest":path,"items":n}` |
//!
//! Errors are `{"error":message}` with 400, 404, 409, 503 (plus
//! `Retry-After` while an embedding is pending) or 500.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine;
use samic_core::PointPrompt;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::annotation::AnnotationService;
use crate::error::Error;
use crate::gateway::SegmentationResult;
use crate::io::mask_png;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Argument(_) | Error::Dataset(_) | Error::Core(_) => StatusCode::BAD_REQUEST,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::NotReady(_) | Error::BackendUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = Json(json!({"error": self.0.to_string()}));
        if matches!(self.0, Error::NotReady(_)) {
            (status, [(header::RETRY_AFTER, "1")], body).into_response()
        } else {
            (status, body).into_response()
        }
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Runs blocking service work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::Argument(format!("worker failed: {e}")))),
    }
}

#[derive(Debug, Deserialize)]
pub struct OpenRequest {
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub class: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct PromptRequest {
    #[serde(default)]
    pub instance: usize,
    pub x: f64,
    pub y: f64,
}

/// Live segmentation shown while annotating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationView {
    pub image: String,
    pub instances: Vec<Vec<[f64; 2]>>,
    /// `None` once the draft is empty.
    pub confidence: Option<f64>,
    pub area: usize,
    /// Base64 of the mask PNG.
    pub mask_png: Option<String>,
}

impl SegmentationView {
    fn new(image: &str, r: Option<&SegmentationResult>) -> crate::Result<Self> {
        Ok(match r {
            None => Self { image: image.into(), instances: vec![], confidence: None, area: 0, mask_png: None },
            Some(r) => Self {
                image: image.into(),
                instances: r.prompts.instances.iter().map(|g| g.iter().map(|p| [p.x, p.y]).collect()).collect(),
                confidence: Some(r.confidence),
                area: r.mask.area(),
                mask_png: Some(base64::engine::general_purpose::STANDARD.encode(mask_png(&r.mask)?)),
            },
        })
    }
}

async fn open_session(State(svc): State<Arc<AnnotationService>>, Json(req): Json<OpenRequest>) -> ApiResult<impl IntoResponse> {
    let info = blocking(move || svc.open_session(&req.images, req.class.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn session_info(State(svc): State<Arc<AnnotationService>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.session_info(&id)).await?))
}

async fn next_image(State(svc): State<Arc<AnnotationService>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let info = blocking(move || svc.session_info(&id)).await?;
    let remaining = info.queue.iter().filter(|q| !q.committed).count();
    let next = info.queue.into_iter().find(|q| !q.committed);
    Ok(Json(json!({"image": next, "remaining": remaining})))
}

async fn submit(
    State(svc): State<Arc<AnnotationService>>,
    Path((id, img)): Path<(String, String)>,
    Json(req): Json<PromptRequest>,
) -> ApiResult<impl IntoResponse> {
    let view = blocking(move || {
        let r = svc.submit_prompt(&id, &img, req.instance, PointPrompt::new(req.x, req.y))?;
        SegmentationView::new(&img, Some(&r))
    })
    .await?;
    Ok(Json(view))
}

async fn undo(State(svc): State<Arc<AnnotationService>>, Path((id, img)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    let view = blocking(move || {
        let r = svc.undo_last(&id, &img)?;
        SegmentationView::new(&img, r.as_ref())
    })
    .await?;
    Ok(Json(view))
}

async fn commit(State(svc): State<Arc<AnnotationService>>, Path((id, img)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    let rec = blocking(move || svc.commit(&id, &img)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn mask(State(svc): State<Arc<AnnotationService>>, Path((id, img)): Path<(String, String)>) -> ApiResult<impl IntoResponse> {
    let png = blocking(move || svc.mask_png(&id, &img)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

async fn export(State(svc): State<Arc<AnnotationService>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let (path, n) = blocking(move || {
        let out = svc.root().join("exports").join(&id);
        let path = svc.export_dataset(&id, &out)?;
        Ok((path, svc.records(&id)?.len()))
    })
    .await?;
    Ok(Json(json!({"manifest": path, "items": n})))
}

pub fn router(service: Arc<AnnotationService>) -> Router {
    Router::new()
        .route("/v1/sessions", post(open_session))
        .route("/v1/sessions/{id}", get(session_info))
        .route("/v1/sessions/{id}/next", get(next_image))
        .route("/v1/sessions/{id}/images/{img}/prompts", post(submit))
        .route("/v1/sessions/{id}/images/{img}/prompts/last", delete(undo))
        .route("/v1/sessions/{id}/images/{img}/commit", post(commit))
        .route("/v1/sessions/{id}/images/{img}/mask.png", get(mask))
        .route("/v1/sessions/{id}/export", get(export))
        .with_state(service)
}

/// Serves until `shutdown` resolves; in-flight requests are drained first.
pub async fn serve(
    service: Arc<AnnotationService>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}
