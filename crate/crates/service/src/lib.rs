//! HTTP service exposing reconstructed volumes to the free-view browser client.
//!
//! All routes live under `/api`:
//!
//! | route | response |
//! |---|---|
//! | `GET /api/volumes` | JSON list of loaded volumes |
//! | `GET /api/volumes/{id}/slice?plane=&index=&mode=` | PNG, validity mask in `X-CS-Mask` |
//! | `GET /api/volumes/{id}/freeview?dx=&dy=&dz=&plane=&index=` | PNG |
//! | `GET /api/volumes/{id}/voxel?x=&y=&z=` | JSON voxel model |
//!
//! `plane` is `axial` (constant z, default), `lateral` (constant y) or
//! `custom`. Custom planes take `origin`, `u` and `v` as comma separated
//! triples plus `width`, `height` and `pixel` (mm). Voxel coordinates are
//! lattice indices.
//!
//! Every response body carries a strong ETag (SHA-256 of the body) and
//! `Access-Control-Allow-Origin: *`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use serde::Serialize;
use sha2::{Digest, Sha256};
use sonocs::io::{self, IoError};
use sonocs::render::{self, ColorFrame, Image, RenderError, SliceMode, SlicePlane};
use sonocs::{Vec3, Volume, VolumeKind};

pub const MASK_HEADER: &str = "x-cs-mask";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Load { path: PathBuf, source: IoError },
    #[error("duplicate volume id '{0}'")]
    DuplicateId(String),
}

/// A volume held in memory for the lifetime of the service.
#[derive(Debug)]
pub struct LoadedVolume {
    pub id: String,
    pub volume: Volume,
    pub color_frame: ColorFrame,
}

impl LoadedVolume {
    pub fn new(id: impl Into<String>, volume: Volume) -> Self {
        let color_frame = ColorFrame::for_volume(&volume);
        Self {
            id: id.into(),
            volume,
            color_frame,
        }
    }
}

/// Immutable set of volumes keyed by id.
#[derive(Debug, Default)]
pub struct Catalog {
    volumes: BTreeMap<String, LoadedVolume>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, loaded: LoadedVolume) -> Result<(), ServiceError> {
        if self.volumes.contains_key(&loaded.id) {
            return Err(ServiceError::DuplicateId(loaded.id));
        }
        self.volumes.insert(loaded.id.clone(), loaded);
        Ok(())
    }

    /// Reads volume files; the id of each is its file stem.
    pub fn load<P: AsRef<Path>>(paths: &[P]) -> Result<Self, ServiceError> {
        let mut catalog = Self::new();
        for path in paths {
            let path = path.as_ref();
            let volume = io::read_volume(path).map_err(|source| ServiceError::Load {
                path: path.to_path_buf(),
                source,
            })?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            log::info!("loaded volume '{id}' ({})", volume.kind.name());
            catalog.insert(LoadedVolume::new(id, volume))?;
        }
        Ok(catalog)
    }

    pub fn get(&self, id: &str) -> Option<&LoadedVolume> {
        self.volumes.get(id)
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeInfo {
    pub id: String,
    pub kind: VolumeKind,
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
    pub grid: Option<String>,
}

/// Builds the router. `static_dir` is served at `/` when given.
pub fn router(catalog: Arc<Catalog>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/volumes", get(list_volumes))
        .route("/api/volumes/{id}/slice", get(slice))
        .route("/api/volumes/{id}/freeview", get(freeview))
        .route("/api/volumes/{id}/voxel", get(voxel))
        .with_state(catalog);
    let app = match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    };
    app.layer(middleware::from_fn(cors))
}

/// Binds and serves until ctrl-c.
pub async fn serve(catalog: Catalog, bind: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(catalog), static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn cors(req: Request, next: Next) -> Response {
    let mut res = next.run(req).await;
    res.headers_mut()
        .insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    res.headers_mut().insert(
        header::ACCESS_CONTROL_EXPOSE_HEADERS,
        HeaderValue::from_static("etag, x-cs-mask"),
    );
    res
}

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<RenderError> for ApiError {
    fn from(e: RenderError) -> Self {
        let status = match e {
            RenderError::DegenerateDirection | RenderError::InvalidPlane(_) => StatusCode::BAD_REQUEST,
            RenderError::ModeMismatch { .. } | RenderError::UnsupportedVolumeKind(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type Params = Query<HashMap<String, String>>;

fn lookup<'a>(catalog: &'a Catalog, id: &str) -> Result<&'a LoadedVolume, ApiError> {
    catalog
        .get(id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown volume '{id}'")))
}

fn param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
    q.get(key)
        .map(|s| s.trim().parse().map_err(|_| ApiError::bad(format!("malformed '{key}': '{s}'"))))
        .transpose()
}

fn required<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<T, ApiError> {
    param(q, key)?.ok_or_else(|| ApiError::bad(format!("missing '{key}'")))
}

fn triple(q: &HashMap<String, String>, key: &str) -> Result<Vec3, ApiError> {
    let raw: String = required(q, key)?;
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::bad(format!("malformed '{key}': '{raw}'")))?;
    match parts[..] {
        [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(ApiError::bad(format!("'{key}' needs three finite numbers"))),
    }
}

fn plane_from_query(volume: &Volume, q: &HashMap<String, String>) -> Result<SlicePlane, ApiError> {
    let kind = q.get("plane").map(String::as_str).unwrap_or("axial");
    let index = || param::<usize>(q, "index").map(|i| i.unwrap_or(0));
    let plane = match kind {
        "axial" => SlicePlane::axial(&volume.lattice, index()?)?,
        "lateral" => SlicePlane::lateral(&volume.lattice, index()?)?,
        "custom" => SlicePlane::new(
            triple(q, "origin")?,
            [triple(q, "u")?, triple(q, "v")?],
            required(q, "width")?,
            required(q, "height")?,
            required(q, "pixel")?,
        )?,
        other => return Err(ApiError::bad(format!("unknown plane '{other}'"))),
    };
    Ok(plane)
}

fn etag_of(body: &[u8]) -> String {
    format!("\"{:x}\"", Sha256::digest(body))
}

fn respond(headers: &HeaderMap, content_type: &'static str, body: Vec<u8>, extra: Option<(&'static str, String)>) -> Response {
    let etag = etag_of(&body);
    let matched = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let mut res = if matched {
        StatusCode::NOT_MODIFIED.into_response()
    } else {
        ([(header::CONTENT_TYPE, content_type)], body).into_response()
    };
    let h = res.headers_mut();
    h.insert(header::ETAG, HeaderValue::from_str(&etag).expect("hex etag"));
    if let Some((name, value)) = extra {
        if let Ok(v) = HeaderValue::from_str(&value) {
            h.insert(name, v);
        }
    }
    res
}

/// 8-bit PNG, grayscale or RGB depending on the image channels.
pub fn png_bytes(image: &Image, normalize: bool) -> Vec<u8> {
    let pixels = image.to_u8(normalize);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(if image.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(&pixels).expect("in-memory png data");
    }
    out
}

/// Row-major validity mask packed eight pixels per byte, least significant
/// bit first, base64 encoded.
pub fn encode_mask(mask: &[bool]) -> String {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        bytes[i / 8] |= 1 << (i % 8);
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_mask(encoded: &str, len: usize) -> Option<Vec<bool>> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(encoded).ok()?;
    if bytes.len() != len.div_ceil(8) {
        return None;
    }
    Some((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

async fn list_volumes(State(catalog): State<Arc<Catalog>>, headers: HeaderMap) -> Response {
    let list: Vec<VolumeInfo> = catalog
        .volumes
        .values()
        .map(|l| VolumeInfo {
            id: l.id.clone(),
            kind: l.volume.kind,
            dims: l.volume.lattice.dims,
            origin: l.volume.lattice.origin,
            spacing: l.volume.lattice.spacing,
            grid: l.volume.grid.as_ref().map(|g| g.spec().to_string()),
        })
        .collect();
    let body = serde_json::to_vec(&list).expect("serializable list");
    respond(&headers, "application/json", body, None)
}

async fn slice(
    State(catalog): State<Arc<Catalog>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Params,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let loaded = lookup(&catalog, &id)?;
    let volume = &loaded.volume;
    let mode = match q.get("mode") {
        Some(m) => m.parse::<SliceMode>().map_err(ApiError::bad)?,
        None => SliceMode::default_for(volume.kind),
    };
    let plane = plane_from_query(volume, &q)?;
    let image = render::extract_slice_with(volume, &plane, mode, &loaded.color_frame, Default::default())?;
    let mask = encode_mask(&image.mask);
    let body = png_bytes(&image, mode.normalized_for_display());
    Ok(respond(&headers, "image/png", body, Some((MASK_HEADER, mask))))
}

async fn freeview(
    State(catalog): State<Arc<Catalog>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Params,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let loaded = lookup(&catalog, &id)?;
    let volume = &loaded.volume;
    let d = Vec3::new(required(&q, "dx")?, required(&q, "dy")?, required(&q, "dz")?);
    if !d.iter().all(|v: &f64| v.is_finite()) {
        return Err(ApiError::bad("direction must be finite"));
    }
    if volume.kind.is_scalar() {
        return Err(RenderError::UnsupportedVolumeKind(volume.kind).into());
    }
    let plane = plane_from_query(volume, &q)?;
    let image = render::free_view_image(volume, &plane, &d)?;
    let mask = encode_mask(&image.mask);
    let body = png_bytes(&image, false);
    Ok(respond(&headers, "image/png", body, Some((MASK_HEADER, mask))))
}

#[derive(Debug, Serialize)]
struct CellValue {
    k: usize,
    direction: [f64; 3],
    value: f32,
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum VoxelModel {
    Scalar { value: Option<f64> },
    Tensor { coefficients: [f64; 6], valid: bool },
    Spherical { n_cells: usize, cells: Vec<CellValue> },
}

async fn voxel(
    State(catalog): State<Arc<Catalog>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Params,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let loaded = lookup(&catalog, &id)?;
    let volume = &loaded.volume;
    let ijk: [usize; 3] = [required(&q, "x")?, required(&q, "y")?, required(&q, "z")?];
    let dims = volume.lattice.dims;
    if ijk.iter().zip(dims).any(|(i, n)| *i >= n) {
        return Err(ApiError::bad(format!("voxel {ijk:?} outside lattice {dims:?}")));
    }
    let v = volume.lattice.index(ijk[0], ijk[1], ijk[2]);
    let model = match volume.kind {
        VolumeKind::ScalarMean | VolumeKind::ScalarMedian => VoxelModel::Scalar {
            value: volume.scalar(v).and_then(|s| s.get()),
        },
        VolumeKind::Tensor => {
            let t = volume.tensor(v).expect("tensor payload");
            VoxelModel::Tensor {
                coefficients: t.coeffs,
                valid: t.valid,
            }
        }
        VolumeKind::Spherical => {
            let grid = volume.grid.as_ref().expect("spherical grid");
            let cells = volume
                .cells(v)
                .unwrap_or_default()
                .iter()
                .enumerate()
                .filter(|(_, c)| !c.is_nan())
                .map(|(k, &value)| CellValue {
                    k,
                    direction: grid.points()[k].into(),
                    value,
                })
                .collect();
            VoxelModel::Spherical {
                n_cells: grid.n_cells(),
                cells,
            }
        }
    };
    let body = serde_json::to_vec(&serde_json::json!({
        "index": ijk,
        "center": <[f64; 3]>::from(volume.lattice.center_of(v)),
        "model": model,
    }))
    .expect("serializable voxel");
    Ok(respond(&headers, "application/json", body, None))
}
