use std::collections::HashMap;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{GrayImage, Luma};
use serde::Deserialize;

use super::ReviewState;
use crate::error::Error;
use crate::inference::{heatmap_png_name, predict_heatmap, InferenceOptions, PreparedSlide};
use crate::model::SegModel;
use crate::pipeline::heatmap_dir;

/// Computes missing heatmaps on request.
pub struct LiveModel {
    pub model: SegModel<f32>,
    pub mag_divisor: usize,
    pub options: InferenceOptions,
}

pub struct ReviewService {
    state: RwLock<ReviewState>,
    /// Heatmaps are looked up under `<root>/<slide_id>/heatmaps/`.
    heatmap_root: PathBuf,
    live: Option<LiveModel>,
    live_cache: Mutex<HashMap<String, Vec<u8>>>,
}

impl ReviewService {
    pub fn new(state: ReviewState, heatmap_root: PathBuf, live: Option<LiveModel>) -> Self {
        Self { state: RwLock::new(state), heatmap_root, live, live_cache: Mutex::new(HashMap::new()) }
    }

    pub fn state(&self) -> std::sync::RwLockReadGuard<'_, ReviewState> {
        self.state.read().expect("review state lock")
    }

    fn heatmap_png(&self, section_id: &str) -> crate::Result<Vec<u8>> {
        let state = self.state();
        let (bundle, section) = state.bundle_of(section_id)?;
        let path = heatmap_dir(&self.heatmap_root, &bundle.slide_id).join(heatmap_png_name(section_id));
        if path.is_file() {
            return std::fs::read(&path).map_err(|e| Error::io(&path, e));
        }
        let Some(live) = &self.live else {
            return Err(Error::NotFound(format!("heatmap for {section_id}")));
        };
        if let Some(png) = self.live_cache.lock().expect("cache lock").get(section_id) {
            return Ok(png.clone());
        }
        let slide = PreparedSlide::new(bundle, live.mag_divisor)?;
        let (hm, _) = predict_heatmap(&live.model, &slide, section, &live.options)?;
        let img = GrayImage::from_fn(hm.width as u32, hm.height as u32, |x, y| {
            Luma([(hm.probs[y as usize * hm.width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let png = encode_png(image::DynamicImage::ImageLuma8(img))?;
        self.live_cache.lock().expect("cache lock").insert(section_id.to_string(), png.clone());
        Ok(png)
    }

    fn section_png(&self, section_id: &str) -> crate::Result<Vec<u8>> {
        let state = self.state();
        let (bundle, section) = state.bundle_of(section_id)?;
        let b = section.bbox;
        let crop = image::imageops::crop_imm(&bundle.image, b.x0 as u32, b.y0 as u32, b.width() as u32, b.height() as u32)
            .to_image();
        encode_png(image::DynamicImage::ImageRgb8(crop))
    }
}

fn encode_png(img: image::DynamicImage) -> crate::Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Checkpoint(format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            e if e.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

type Api<T> = Result<T, ApiError>;
type Shared = Arc<ReviewService>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn list_slides(State(svc): State<Shared>) -> Response {
    Json(svc.state().slides()).into_response()
}

async fn list_sections(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> Api<Response> {
    Ok(Json(svc.state().sections(&id)?).into_response())
}

async fn section_image(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> Api<Response> {
    Ok(png(svc.section_png(&id)?))
}

async fn section_heatmap(State(svc): State<Shared>, UrlPath(id): UrlPath<String>) -> Api<Response> {
    // live inference is CPU-bound
    let bytes = tokio::task::spawn_blocking(move || svc.heatmap_png(&id))
        .await
        .map_err(|e| Error::Checkpoint(format!("heatmap task: {e}")))??;
    Ok(png(bytes))
}

#[derive(Deserialize)]
struct LabelBody {
    label: String,
    #[serde(default)]
    reviewer: String,
}

async fn set_label(State(svc): State<Shared>, UrlPath(id): UrlPath<String>, Json(body): Json<LabelBody>) -> Api<Response> {
    let mut state = svc.state.write().expect("review state lock");
    Ok(Json(state.set_label(&id, &body.label, &body.reviewer)?).into_response())
}

async fn export(State(svc): State<Shared>) -> Response {
    let csv = svc.state().export_csv();
    Response::builder()
        .header(header::CONTENT_TYPE, "text/csv")
        .header(header::CONTENT_DISPOSITION, "attachment; filename=\"labels.csv\"")
        .body(Body::from(csv))
        .expect("static headers")
}

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/api/slides", get(list_slides))
        .route("/api/slides/{id}/sections", get(list_sections))
        .route("/api/sections/{id}/image.png", get(section_image))
        .route("/api/sections/{id}/heatmap.png", get(section_heatmap))
        .route("/api/sections/{id}/label", post(set_label))
        .route("/api/export.csv", get(export))
        .with_state(service)
}

/// Serves until the process is stopped; `on_bound` receives the bound address.
pub async fn serve(service: Arc<ReviewService>, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(format!("{addr}"), e))?;
    let local = listener.local_addr().map_err(|e| Error::io(format!("{addr}"), e))?;
    on_bound(local);
    axum::serve(listener, router(service)).await.map_err(|e| Error::io(format!("{local}"), e))
}
