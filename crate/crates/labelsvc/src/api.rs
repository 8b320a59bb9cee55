//! HTTP routes. Every body is UTF-8 JSON unless noted; errors are
//! `{"error": ...}` objects.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use terrain_core::patchex::{self, PatchRecord};
use terrain_core::retrieval::{self, RetrievalError};
use terrain_core::taxonomy::{self, GRAMMAR_JSON};
use tower_http::services::ServeDir;

use crate::labels::{LabelRecord, LabelSnapshot};
use crate::{App, VERSION};

pub const DEFAULT_GRID_K: usize = 15;
pub const DEFAULT_EVAL_K: usize = 10;
pub const DEFAULT_CLUSTER_SAMPLE: usize = 8;
pub const PATCH_RECT_HEADER: &str = "x-patch-rect";
pub const SOURCE_SIZE_HEADER: &str = "x-source-size";

type AppState = State<Arc<App>>;

pub fn router(app: Arc<App>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/classes", get(classes))
        .route("/api/clusters", get(clusters))
        .route("/api/grid", get(grid))
        .route("/api/patch/{id}/image", get(patch_image))
        .route("/api/patch/{id}/context", get(context))
        .route("/api/labels", get(get_labels).post(post_label))
        .route("/api/labels/export", get(export_labels))
        .route("/api/eval", get(eval))
        .route("/taxonomy-grammar.json", get(grammar));
    let api = match &app.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such route") }),
    };
    api.with_state(app)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": msg.into() }) }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }

    fn unknown_patch(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown patch {id}")).with("patch_id", json!(id))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn descriptor(app: &App, labels: &LabelSnapshot, r: &PatchRecord) -> Value {
    json!({
        "patch_id": r.patch_id,
        "image_id": r.image_id,
        "sol": r.sol,
        "site": r.site,
        "drive": r.drive,
        "eye": r.eye.to_string(),
        "x": r.x,
        "y": r.y,
        "side": r.side,
        "split": r.split.to_string(),
        "cluster": app.cluster_of(&r.patch_id),
        "image_url": format!("/api/patch/{}/image", r.patch_id),
        "label": labels.latest(&r.patch_id),
    })
}

async fn health(State(app): AppState) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": VERSION,
        "patches": app.index.len(),
        "labels": app.labels.snapshot().len(),
    }))
}

async fn classes(State(app): AppState) -> Json<Value> {
    let rows: Vec<Value> = app
        .registry
        .classes()
        .iter()
        .map(|c| json!({ "class_id": c.class_id, "code": c.code.to_string(), "description": c.description }))
        .collect();
    Json(json!({ "classes": rows }))
}

async fn grammar() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], GRAMMAR_JSON)
}

#[derive(Deserialize)]
struct ClusterParams {
    per_cluster: Option<usize>,
    seed: Option<u64>,
}

/// Cluster ids with a seeded sample of members to use as queries.
async fn clusters(State(app): AppState, Query(p): Query<ClusterParams>) -> Json<Value> {
    let per = p.per_cluster.unwrap_or(DEFAULT_CLUSTER_SAMPLE);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed.unwrap_or(0));
    let rows: Vec<Value> = app
        .clusters
        .iter()
        .map(|(c, members)| {
            let mut sample = members.clone();
            sample.shuffle(&mut rng);
            sample.truncate(per);
            let ids: Vec<&str> = sample.iter().map(|&i| app.index.ids()[i].as_str()).collect();
            json!({ "cluster": c, "size": members.len(), "sample": ids })
        })
        .collect();
    Json(json!({ "k": app.clusters.len(), "clusters": rows }))
}

#[derive(Deserialize)]
struct GridParams {
    patch: String,
    k: Option<usize>,
    exclude: Option<bool>,
}

/// Query descriptor and its neighbours in retrieval order.
async fn grid(State(app): AppState, Query(p): Query<GridParams>) -> ApiResult<Json<Value>> {
    let k = p.k.unwrap_or(DEFAULT_GRID_K);
    let exclude = p.exclude.unwrap_or(true);
    let record = app.record(&p.patch).ok_or_else(|| ApiError::unknown_patch(&p.patch))?;
    let query = app.index.query_for(&p.patch).map_err(|_| {
        ApiError::new(StatusCode::NOT_FOUND, format!("patch {} is not in the index", p.patch)).with("patch_id", json!(p.patch))
    })?;
    let result = retrieval::knn(&app.index, &query, k, exclude)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let labels = app.labels.snapshot();
    let neighbors: Vec<Value> = result
        .neighbors
        .iter()
        .enumerate()
        .map(|(rank, n)| {
            let r = app.record(&n.patch_id).expect("index ids are in the manifest");
            json!({
                "rank": rank + 1,
                "distance": n.distance,
                "same_site_drive": n.same_site_drive,
                "patch": descriptor(&app, &labels, r),
            })
        })
        .collect();
    Ok(Json(json!({
        "query": descriptor(&app, &labels, record),
        "k": k,
        "exclude_same_site_drive": exclude,
        "short": result.short,
        "neighbors": neighbors,
    })))
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("tif" | "tiff") => "image/tiff",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn read_or_gone(path: &std::path::Path, what: &str) -> ApiResult<Vec<u8>> {
    match tokio::fs::read(path).await {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::new(
            StatusCode::GONE,
            format!("{what} {} is no longer available", path.display()),
        )),
        Err(e) => Err(ApiError::internal(format!("{}: {e}", path.display()))),
    }
}

/// The pre-rendered patch PNG.
async fn patch_image(State(app): AppState, Path(id): Path<String>) -> ApiResult<Response> {
    app.record(&id).ok_or_else(|| ApiError::unknown_patch(&id))?;
    let bytes = read_or_gone(&patchex::patch_path(&app.dataset_dir, &id), "patch image").await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
struct ContextParams {
    format: Option<String>,
}

/// The source image, with the patch rectangle as `x,y,width,height` in a
/// header; `?format=json` returns the rectangle and image URL instead.
async fn context(State(app): AppState, Path(id): Path<String>, Query(p): Query<ContextParams>) -> ApiResult<Response> {
    let r = app.record(&id).ok_or_else(|| ApiError::unknown_patch(&id))?;
    let source = app
        .source(&r.image_id)
        .ok_or_else(|| ApiError::new(StatusCode::GONE, format!("no source recorded for image {}", r.image_id)))?;
    let rect = format!("{},{},{},{}", r.x, r.y, r.side, r.side);
    let size = format!("{},{}", source.width, source.height);
    let headers = [
        (HeaderName::from_static(PATCH_RECT_HEADER), HeaderValue::from_str(&rect).expect("ascii")),
        (HeaderName::from_static(SOURCE_SIZE_HEADER), HeaderValue::from_str(&size).expect("ascii")),
    ];
    match p.format.as_deref() {
        Some("json") => {
            if !source.path.is_file() {
                return Err(ApiError::new(
                    StatusCode::GONE,
                    format!("source image {} is no longer available", source.path.display()),
                ));
            }
            Ok(Json(json!({
                "patch_id": r.patch_id,
                "image_id": r.image_id,
                "eye": r.eye.to_string(),
                "image_url": format!("/api/patch/{}/context", r.patch_id),
                "rect": { "x": r.x, "y": r.y, "width": r.side, "height": r.side },
                "source": { "width": source.width, "height": source.height },
            }))
            .into_response())
        }
        None | Some("image") => {
            let bytes = read_or_gone(&source.path, "source image").await?;
            let mut resp = ([(header::CONTENT_TYPE, content_type(&source.path))], bytes).into_response();
            resp.headers_mut().extend(headers);
            Ok(resp)
        }
        Some(other) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown format {other:?}"))),
    }
}

#[derive(Deserialize)]
struct LabelRequest {
    patch_id: String,
    taxonomy_code: String,
    class_id: Option<u32>,
    free_text: Option<String>,
    annotator: Option<String>,
}

/// Validates, stores durably, then echoes the stored record with 201.
async fn post_label(State(app): AppState, body: Bytes) -> ApiResult<Response> {
    let req: LabelRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad label request: {e}")))?;
    app.record(&req.patch_id).ok_or_else(|| ApiError::unknown_patch(&req.patch_id))?;
    let code = taxonomy::parse(&req.taxonomy_code).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            .with("segment", json!(e.segment))
            .with("offset", json!(e.offset))
    })?;
    if let Some(c) = req.class_id {
        if app.registry.get(c).is_none() {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown class id {c}")));
        }
    }
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let record = LabelRecord {
        patch_id: req.patch_id,
        class_id: req.class_id,
        taxonomy_code: taxonomy::format(&code),
        free_text: req.free_text,
        annotator: req.annotator.unwrap_or_else(|| "anonymous".into()),
        timestamp,
    };
    let stored = record.clone();
    let writer = app.clone();
    tokio::task::spawn_blocking(move || writer.labels.append(stored))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

#[derive(Deserialize)]
struct LabelParams {
    patch: Option<String>,
}

/// Current record and history of one patch, or every current record.
async fn get_labels(State(app): AppState, Query(p): Query<LabelParams>) -> ApiResult<Json<Value>> {
    let labels = app.labels.snapshot();
    match p.patch {
        Some(id) => {
            app.record(&id).ok_or_else(|| ApiError::unknown_patch(&id))?;
            Ok(Json(json!({
                "patch_id": id,
                "current": labels.latest(&id),
                "history": labels.history(&id),
            })))
        }
        None => Ok(Json(json!({ "labels": labels.current() }))),
    }
}

async fn export_labels(State(app): AppState) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/tab-separated-values; charset=utf-8")],
        app.labels.snapshot().export_tsv(),
    )
}

#[derive(Deserialize)]
struct EvalParams {
    k: Option<usize>,
    exclude: Option<bool>,
    format: Option<String>,
}

/// Per-class Precision@K over labelled queries in the index. Neighbours
/// must be labelled too; otherwise 409 lists them.
async fn eval(State(app): AppState, Query(p): Query<EvalParams>) -> ApiResult<Response> {
    let k = p.k.unwrap_or(DEFAULT_EVAL_K);
    let exclude = p.exclude.unwrap_or(true);
    let rows = crate::labels::parse_export(&app.labels.snapshot().export_tsv()).map_err(ApiError::internal)?;
    let (mut queries, labels) = crate::labels::labeled_queries(&rows);
    queries.retain(|q| app.index.position(&q.patch_id).is_some());
    let worker = app.clone();
    let table = tokio::task::spawn_blocking(move || {
        retrieval::eval_all(&worker.index, &queries, &labels, k, exclude, Some(&worker.registry))
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| match e {
        RetrievalError::Unlabeled(ids) => {
            ApiError::new(StatusCode::CONFLICT, format!("{} neighbours are unlabeled", ids.len())).with("unlabeled", json!(ids))
        }
        RetrievalError::ZeroK => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
        e => ApiError::internal(e),
    })?;
    if p.format.as_deref() == Some("tsv") {
        return Ok(([(header::CONTENT_TYPE, "text/tab-separated-values; charset=utf-8")], table.to_tsv()).into_response());
    }
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|r| json!({ "class_id": r.class_id, "taxonomy": r.taxonomy, "precision": r.precision, "queries": r.queries }))
        .collect();
    Ok(Json(json!({ "k": k, "exclude_same_site_drive": exclude, "rows": rows, "average": table.average })).into_response())
}
