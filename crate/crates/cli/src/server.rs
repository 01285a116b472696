//! JSON-over-HTTP inference service.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use ctask_core::heads::AnchorTable;
use ctask_core::network::ModelBundle;
use ctask_core::render::TASK_COLORS;
use ctask_core::Task;

use crate::predict::{self, PaletteSource, RequestError};

pub const BODY_LIMIT: usize = 16 << 20;
pub const IN_FLIGHT: usize = 8;

pub struct AppState {
    pub bundle: Arc<ModelBundle>,
    pub predictor: Option<Arc<ModelBundle>>,
    permits: Semaphore,
}

impl AppState {
    pub fn new(bundle: ModelBundle, predictor: Option<ModelBundle>) -> Self {
        Self {
            bundle: Arc::new(bundle),
            predictor: predictor.map(Arc::new),
            permits: Semaphore::new(IN_FLIGHT),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/tasks", get(tasks))
        .route("/v1/predict", post(predict_handler))
        .route("/v1/palette/predict", post(palette_handler))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<RequestError> for ApiError {
    fn from(e: RequestError) -> Self {
        let status = match &e {
            RequestError::Malformed(_) => StatusCode::BAD_REQUEST,
            RequestError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            RequestError::NoPredictor => StatusCode::CONFLICT,
            RequestError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            StatusCode::PAYLOAD_TOO_LARGE
        } else {
            StatusCode::BAD_REQUEST
        };
        ApiError(status, r.body_text())
    }
}

fn unbase64(what: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim())
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("{what}: invalid base64: {e}")))
}

#[derive(Serialize)]
pub struct LegendEntry {
    pub id: usize,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Serialize)]
pub struct TaskInfo {
    pub id: usize,
    pub name: &'static str,
    pub color: [u8; 3],
    pub legend: Vec<LegendEntry>,
}

pub fn task_infos(k: usize) -> Vec<TaskInfo> {
    Task::first(k)
        .iter()
        .map(|&t| {
            let legend = AnchorTable::for_task(t)
                .map(|a| {
                    (0..a.len())
                        .map(|i| LegendEntry {
                            id: i,
                            name: a.names[i].clone(),
                            color: a.rgb(i),
                        })
                        .collect()
                })
                .unwrap_or_default();
            TaskInfo {
                id: t.id().index(),
                name: t.name(),
                color: TASK_COLORS[t.id().index()],
                legend,
            }
        })
        .collect()
}

async fn tasks(State(s): State<Arc<AppState>>) -> Json<Vec<TaskInfo>> {
    Json(task_infos(s.bundle.config.k))
}

#[derive(Deserialize)]
pub struct PredictRequest {
    pub image: String,
    /// Base64 single-channel PNG, or `"auto"` for the palette predictor.
    pub palette: String,
}

#[derive(Serialize, Deserialize)]
pub struct PredictResponse {
    pub width: usize,
    pub height: usize,
    pub palette: String,
    pub composite: String,
    pub raw: String,
    pub overlays: BTreeMap<String, String>,
}

#[derive(Deserialize)]
pub struct PaletteRequest {
    pub image: String,
}

#[derive(Serialize, Deserialize)]
pub struct PaletteResponse {
    pub width: usize,
    pub height: usize,
    pub palette: String,
}

async fn blocking<T: Send + 'static>(s: &AppState, f: impl FnOnce() -> Result<T, RequestError> + Send + 'static) -> Result<T, ApiError> {
    let _permit = s
        .permits
        .acquire()
        .await
        .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "shutting down".into()))?;
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn predict_handler(State(s): State<Arc<AppState>>, body: Result<Json<PredictRequest>, JsonRejection>) -> Result<Json<PredictResponse>, ApiError> {
    let Json(req) = body?;
    let image = unbase64("image", &req.image)?;
    let auto = req.palette.trim().eq_ignore_ascii_case("auto");
    let palette = if auto { Vec::new() } else { unbase64("palette", &req.palette)? };
    let (bundle, predictor) = (s.bundle.clone(), s.predictor.clone());
    let p = blocking(&s, move || {
        let source = if auto { PaletteSource::Auto } else { PaletteSource::Png(&palette) };
        predict::run(&bundle, predictor.as_deref(), &image, source)
    })
    .await?;
    let palette = if auto {
        B64.encode(p.palette.to_png().map_err(RequestError::from)?)
    } else {
        req.palette
    };
    Ok(Json(PredictResponse {
        width: p.width,
        height: p.height,
        palette,
        composite: B64.encode(&p.composite_png),
        raw: B64.encode(&p.raw_cttn),
        overlays: p.overlays.into_iter().map(|(k, v)| (k.to_string(), B64.encode(v))).collect(),
    }))
}

async fn palette_handler(State(s): State<Arc<AppState>>, body: Result<Json<PaletteRequest>, JsonRejection>) -> Result<Json<PaletteResponse>, ApiError> {
    let Json(req) = body?;
    let image = unbase64("image", &req.image)?;
    let (bundle, predictor) = (s.bundle.clone(), s.predictor.clone());
    let p = blocking(&s, move || predict::predict_palette(predictor.as_deref(), &bundle, &image)).await?;
    Ok(Json(PaletteResponse {
        width: p.w,
        height: p.h,
        palette: B64.encode(p.to_png().map_err(RequestError::from)?),
    }))
}
