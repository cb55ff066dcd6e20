//! HTTP/JSON facade for the annotation UI.
//!
//! Endpoints:
//! - `GET  /api/images`: images under the root, `{id, width, height}`
//! - `GET  /api/images/{id}`: raw image bytes
//! - `POST /api/preview`: pseudo mask of one cross as a base64 PNG
//! - `GET  /api/annotations/{id}`, `POST /api/annotations/{id}`: versioned
//!   annotation documents stored under `<root>/annotations/`
//!
//! The payloads are described in `api/openapi.yaml` and the annotation format
//! in `api/annotation.schema.json`.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::cors::CorsLayer;

use crossmask::dataset_io::{self, AnnotationDoc, AnnotationEntry, AnnotationError, CrossSegments};
use crossmask::multi_category::CategoryId;
use crossmask::pseudo_mask::{MaskOp, SigmaSpec};
use crossmask::size_branching::{relative_size, select_branch, ThresholdTable};

/// Subdirectory of the root that holds annotation documents.
pub const ANNOTATION_DIR: &str = "annotations";
/// Largest preview grid side accepted.
pub const MAX_PREVIEW_SIDE: u32 = 8192;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    Unprocessable { kind: String, message: String },
    #[error("base_version {given} does not match current version {current}")]
    VersionConflict { given: u64, current: u64 },
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_version: Option<u64>,
}

impl ServiceError {
    fn unprocessable(kind: &str, message: impl Into<String>) -> Self {
        ServiceError::Unprocessable {
            kind: kind.to_string(),
            message: message.into(),
        }
    }
}

impl From<AnnotationError> for ServiceError {
    fn from(e: AnnotationError) -> Self {
        match e {
            AnnotationError::Io(io) => ServiceError::Internal(io.to_string()),
            other => ServiceError::unprocessable(other.kind(), other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (status, error, current_version) = match self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound".to_string(), None),
            ServiceError::Unprocessable { kind, .. } => (StatusCode::UNPROCESSABLE_ENTITY, kind, None),
            ServiceError::VersionConflict { current, .. } => {
                (StatusCode::CONFLICT, "VersionConflict".to_string(), Some(current))
            }
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "InternalError".to_string(), None),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{message}");
        }
        (
            status,
            Json(ErrorBody {
                error,
                message,
                current_version,
            }),
        )
            .into_response()
    }
}

/// Shared state: the image root, optional per-category thresholds and the
/// lock that serialises annotation writes.
pub struct AppState {
    root: PathBuf,
    thresholds: Option<ThresholdTable>,
    write_lock: Mutex<()>,
}

impl AppState {
    pub fn new(root: impl Into<PathBuf>, thresholds: Option<ThresholdTable>) -> Arc<Self> {
        Arc::new(Self {
            root: root.into(),
            thresholds,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn annotation_dir(&self) -> PathBuf {
        self.root.join(ANNOTATION_DIR)
    }

    fn image_path(&self, id: &str) -> Result<PathBuf, ServiceError> {
        let rel = safe_relative(id)?;
        if rel.components().next() == Some(Component::Normal(ANNOTATION_DIR.as_ref())) {
            return Err(ServiceError::NotFound(format!("no image {id}")));
        }
        let path = self.root.join(rel);
        if path.is_file() && is_image(&path) {
            Ok(path)
        } else {
            Err(ServiceError::NotFound(format!("no image {id}")))
        }
    }

    fn annotation_paths(&self, id: &str) -> Result<(PathBuf, PathBuf), ServiceError> {
        let rel = safe_relative(id)?;
        let doc = self.annotation_dir().join(format!("{}.json", rel.display()));
        let version = self.annotation_dir().join(format!("{}.json.version", rel.display()));
        Ok((doc, version))
    }
}

/// Rejects absolute paths and `..` so ids cannot escape the root.
fn safe_relative(id: &str) -> Result<PathBuf, ServiceError> {
    let path = Path::new(id);
    let ok = !id.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(path.to_path_buf())
    } else {
        Err(ServiceError::NotFound(format!("invalid id {id:?}")))
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/images", get(list_images))
        .route("/api/images/{*id}", get(get_image))
        .route("/api/preview", post(preview))
        .route("/api/annotations/{*id}", get(get_annotation).post(save_annotation))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", state.root.display(), listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

// ── Images ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

/// Images below `root` (excluding the annotation directory), sorted by id.
/// Ids are `/`-separated relative paths.
pub fn scan_images(root: &Path) -> std::io::Result<Vec<ImageInfo>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                if dir == root && path.file_name() == Some(ANNOTATION_DIR.as_ref()) {
                    continue;
                }
                stack.push(path);
            } else if is_image(&path) {
                let Ok((width, height)) = image::image_dimensions(&path) else {
                    log::warn!("skipping unreadable image {}", path.display());
                    continue;
                };
                let rel = path.strip_prefix(root).expect("below root");
                let id = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push(ImageInfo { id, width, height });
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

async fn list_images(State(state): State<Arc<AppState>>) -> Result<Json<Vec<ImageInfo>>, ServiceError> {
    let root = state.root.clone();
    let images = tokio::task::spawn_blocking(move || scan_images(&root))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", state.root.display())))?;
    Ok(Json(images))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    let path = state.image_path(&id)?;
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(&path))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map_err(|e| ServiceError::Internal(format!("{id}: {e}")))?;
    let mime = image::ImageFormat::from_path(&id)
        .map(|f| f.to_mime_type())
        .unwrap_or("application/octet-stream");
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

// ── Preview ──────────────────────────────────────────────────────────────────

fn default_category() -> CategoryId {
    CategoryId::new(1).expect("non-zero")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreviewRequest {
    pub cross: CrossSegments,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction_deg: Option<f64>,
    /// Selects the thresholds used for `branch_index`.
    #[serde(default = "default_category")]
    pub category: CategoryId,
    pub sigma_ratio: SigmaSpec,
    pub op: MaskOp,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub shrink: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub mask_png_base64: String,
    pub area_px: usize,
    pub relative_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_index: Option<usize>,
}

/// Renders a preview exactly as the batch pipeline would for a one-entry
/// document, so the PNG bytes match `genmask` output.
pub fn render_preview(req: &PreviewRequest, thresholds: Option<&ThresholdTable>) -> Result<PreviewResponse, ServiceError> {
    if req.width == 0 || req.height == 0 || req.width > MAX_PREVIEW_SIDE || req.height > MAX_PREVIEW_SIDE {
        return Err(ServiceError::unprocessable(
            "SchemaError",
            format!("width and height must be in 1..={MAX_PREVIEW_SIDE}"),
        ));
    }
    if !(0.0..1.0).contains(&req.shrink) {
        return Err(ServiceError::unprocessable("InvalidRate", format!("shrink {} outside [0, 1)", req.shrink)));
    }
    let mut doc = AnnotationDoc::new("preview", req.width, req.height);
    doc.entries.push(AnnotationEntry {
        category: req.category,
        cross: req.cross,
        direction_deg: req.direction_deg,
    });
    let (_, mask) = doc
        .category_masks(req.sigma_ratio, req.op, req.shrink)?
        .pop()
        .expect("one entry gives one mask");
    let png = dataset_io::encode_mask_png(&mask).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let r = relative_size(&mask);
    Ok(PreviewResponse {
        mask_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        area_px: mask.count_positive(),
        relative_size: r,
        branch_index: thresholds.and_then(|t| t.get(req.category)).map(|t| select_branch(r, t)),
    })
}

async fn preview(
    State(state): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> Result<Json<PreviewResponse>, ServiceError> {
    let req: PreviewRequest =
        serde_json::from_slice(&body).map_err(|e| ServiceError::unprocessable("SchemaError", e.to_string()))?;
    let out = tokio::task::spawn_blocking(move || render_preview(&req, state.thresholds.as_ref()))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(out))
}

// ── Annotations ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAnnotation {
    pub doc: AnnotationDoc,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaveResponse {
    pub version: u64,
}

fn read_version(path: &Path) -> Result<u64, ServiceError> {
    match std::fs::read_to_string(path) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| ServiceError::Internal(format!("{}: corrupt version file", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(ServiceError::Internal(format!("{}: {e}", path.display()))),
    }
}

async fn get_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<StoredAnnotation>, ServiceError> {
    let (doc_path, version_path) = state.annotation_paths(&id)?;
    // Reads take the write lock too so a document is never paired with the
    // version of a different save.
    let _guard = state.write_lock.lock().await;
    if !doc_path.is_file() {
        return Err(ServiceError::NotFound(format!("no annotation for {id}")));
    }
    let doc = dataset_io::load_annotation(&doc_path)?;
    let version = read_version(&version_path)?;
    Ok(Json(StoredAnnotation { doc, version }))
}

async fn save_annotation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> Result<Json<SaveResponse>, ServiceError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct SaveRequest {
        doc: serde_json::Value,
        base_version: u64,
    }
    let req: SaveRequest =
        serde_json::from_slice(&body).map_err(|e| ServiceError::unprocessable("SchemaError", e.to_string()))?;
    let doc = AnnotationDoc::from_json(&req.doc.to_string())?;
    let (doc_path, version_path) = state.annotation_paths(&id)?;

    let _guard = state.write_lock.lock().await;
    let current = read_version(&version_path)?;
    if req.base_version != current {
        return Err(ServiceError::VersionConflict {
            given: req.base_version,
            current,
        });
    }
    let next = current + 1;
    tokio::task::spawn_blocking(move || -> Result<(), ServiceError> {
        if let Some(parent) = doc_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ServiceError::Internal(format!("{}: {e}", parent.display())))?;
        }
        dataset_io::save_annotation(&doc, &doc_path)?;
        dataset_io::atomic_write(&version_path, format!("{next}\n").as_bytes())
            .map_err(|e| ServiceError::Internal(e.to_string()))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(SaveResponse { version: next }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_cannot_escape_root() {
        assert!(safe_relative("a/b.png").is_ok());
        assert!(safe_relative("../etc/passwd").is_err());
        assert!(safe_relative("/etc/passwd").is_err());
        assert!(safe_relative("a/./b.png").is_ok());
        assert!(safe_relative("").is_err());
    }

    #[test]
    fn image_extensions() {
        assert!(is_image(Path::new("x.PNG")));
        assert!(is_image(Path::new("x.jpeg")));
        assert!(!is_image(Path::new("x.json")));
    }
}
