//! HTTP painting service.
//!
//! - `POST /paint`: multipart form with a `sketch` PNG, optional `scribbles`
//!   JSON and optional integer `seed`. Responds with a PNG; the crop box of the
//!   input that was painted is in the `X-Crop-Box` header as `x,y,size`.
//! - `GET /health`: `{"status": "ready", "model_id", "resolution"}`.
//! - `GET /model`: the loaded generator's configuration summary.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::Semaphore;
use toonpaint_core::hints::parse_scribbles;
use toonpaint_core::{CropBox, Error, Painter, RasterImage};

pub const CROP_HEADER: &str = "x-crop-box";
pub const MODEL_HEADER: &str = "x-model-id";
const MAX_BODY: usize = 32 * 1024 * 1024;

struct ServiceState {
    painter: Arc<Painter>,
    permits: Arc<Semaphore>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn format_crop(crop: &CropBox) -> String {
    format!("{},{},{}", crop.x, crop.y, crop.size)
}

pub fn parse_crop(s: &str) -> Option<CropBox> {
    let mut it = s.split(',').map(|p| p.trim().parse::<usize>());
    match (it.next(), it.next(), it.next(), it.next()) {
        (Some(Ok(x)), Some(Ok(y)), Some(Ok(size)), None) => Some(CropBox { x, y, size }),
        _ => None,
    }
}

/// Router over a shared, read-only painter with at most `workers` concurrent inferences.
pub fn router(painter: Arc<Painter>, workers: usize) -> Router {
    let state = Arc::new(ServiceState { painter, permits: Arc::new(Semaphore::new(workers.max(1))) });
    Router::new()
        .route("/paint", post(paint))
        .route("/health", get(health))
        .route("/model", get(model))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

pub async fn serve(painter: Arc<Painter>, addr: SocketAddr, workers: usize) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving model {} on http://{}", painter.summary().model_id, listener.local_addr()?);
    axum::serve(listener, router(painter, workers)).await?;
    Ok(())
}

async fn health(State(s): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ready",
        "model_id": s.painter.summary().model_id,
        "resolution": s.painter.resolution(),
    }))
}

async fn model(State(s): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(s.painter.summary()).unwrap_or_default())
}

async fn text_field(field: axum::extract::multipart::Field<'_>, name: &str) -> Result<String, ApiError> {
    field.text().await.map_err(|e| ApiError::bad_request(format!("field {name}: {e}")))
}

async fn paint(State(s): State<Arc<ServiceState>>, mut form: Multipart) -> Result<Response, ApiError> {
    let mut sketch: Option<Bytes> = None;
    let mut scribbles = Vec::new();
    let mut seed = None;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "sketch" => {
                sketch = Some(field.bytes().await.map_err(|e| ApiError::bad_request(format!("field sketch: {e}")))?)
            }
            "scribbles" => {
                let text = text_field(field, "scribbles").await?;
                if !text.trim().is_empty() {
                    scribbles = parse_scribbles(&text).map_err(|e| ApiError::bad_request(e.to_string()))?;
                }
            }
            "seed" => {
                let text = text_field(field, "seed").await?;
                let text = text.trim();
                if !text.is_empty() {
                    seed = Some(
                        text.parse::<u64>()
                            .map_err(|_| ApiError::bad_request(format!("seed {text:?} is not an unsigned integer")))?,
                    );
                }
            }
            other => return Err(ApiError::bad_request(format!("unexpected field {other:?}"))),
        }
    }
    let sketch = sketch.ok_or_else(|| ApiError::bad_request("missing sketch field"))?;
    let sketch = RasterImage::decode_png(&sketch)
        .map_err(|e| ApiError::bad_request(format!("sketch does not decode: {e}")))?;

    let _permit = s.permits.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let painter = s.painter.clone();
    let result = tokio::task::spawn_blocking(move || {
        let out = painter.paint(&sketch, &scribbles, seed)?;
        Ok::<_, Error>((out.image.encode_png()?, out.crop))
    })
    .await
    .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))?;
    let (png, crop) = result.map_err(|e| match e {
        Error::Param(_) | Error::Shape(_) => ApiError::bad_request(e.to_string()),
        other => ApiError::internal(other.to_string()),
    })?;

    let mut resp = (StatusCode::OK, png).into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(CROP_HEADER, HeaderValue::from_str(&format_crop(&crop)).expect("ascii"));
    if let Ok(v) = HeaderValue::from_str(&s.painter.summary().model_id) {
        headers.insert(MODEL_HEADER, v);
    }
    Ok(resp)
}
