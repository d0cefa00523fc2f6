//! HTTP annotation service over [`SessionStore`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use slim_core::spread::{AttentionValue, LabelSource};

use crate::error::{Error, Result};
use crate::session::{Session, SessionError, SessionStore};
use crate::stages::load_representatives;
use crate::store::{Manifest, Store, StoreMeta};

pub struct AppState {
    store: Store,
    meta: StoreMeta,
    manifest: Manifest,
    sessions: SessionStore,
    ui_dir: Option<PathBuf>,
    /// Each session's lock serializes its submissions only.
    live: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    pub fn new(store: Store, ui_dir: Option<PathBuf>) -> Result<Self> {
        Ok(Self {
            meta: store.meta()?,
            manifest: store.manifest()?,
            sessions: SessionStore::new(store.sessions_dir()),
            store,
            ui_dir,
            live: Mutex::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> std::result::Result<Arc<tokio::sync::Mutex<Session>>, SessionError> {
        let mut live = self.live.lock().expect("session map lock poisoned");
        if let Some(s) = live.get(id) {
            return Ok(s.clone());
        }
        let s = Arc::new(tokio::sync::Mutex::new(self.sessions.open(id)?));
        live.insert(id.to_string(), s.clone());
        Ok(s)
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SessionError::UnknownId(_) | SessionError::NotQueued(_) | SessionError::Empty => StatusCode::BAD_REQUEST,
            SessionError::Duplicate(_) => StatusCode::CONFLICT,
            SessionError::Corrupt { .. } | SessionError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Missing { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    ids: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    id: String,
    value: AttentionValue,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Option<Json<CreateBody>>) -> ApiResult<Response> {
    let ids = match body.and_then(|b| b.0.ids) {
        Some(ids) => ids,
        None => load_representatives(&st.store)?.ids,
    };
    let s = st.sessions.create(ids, &st.manifest)?;
    let out = json!({ "session_id": s.id(), "total": s.queue().len() });
    st.live.lock().expect("session map lock poisoned").insert(s.id().to_string(), Arc::new(tokio::sync::Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn next_item(State(st): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.session(&sid)?;
    let s = s.lock().await;
    let Some(id) = s.next() else {
        return Ok(Json(json!({ "done": true })));
    };
    let rec = st.manifest.get(id).ok_or_else(|| SessionError::UnknownId(id.to_string()))?;
    let a = st.manifest.attribution(rec)?;
    let cols = if a.rank() >= 2 { a.dims()[a.rank() - 1] } else { a.len() };
    let grid: Vec<Vec<f64>> = a.to_f64().chunks(cols.max(1)).map(<[f64]>::to_vec).collect();
    Ok(Json(json!({
        "done": false,
        "id": id,
        "label_class_name": st.meta.class_name(rec.label),
        "image_ref": rec.image.as_ref().map(|_| format!("/images/{id}")),
        "attribution": grid,
    })))
}

async fn submit_label(
    State(st): State<Arc<AppState>>,
    Path(sid): Path<String>,
    Json(body): Json<LabelBody>,
) -> ApiResult<Json<Value>> {
    let s = st.session(&sid)?;
    let mut s = s.lock().await;
    s.submit(&body.id, body.value, LabelSource::Human)?;
    let status = s.status();
    Ok(Json(json!({ "ok": true, "labeled": status.labeled, "total": status.total, "state": status.state })))
}

async fn session_status(State(st): State<Arc<AppState>>, Path(sid): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.session(&sid)?;
    let s = s.lock().await;
    Ok(Json(serde_json::to_value(s.status()).expect("status serializes")))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: PathBuf) -> ApiResult<Response> {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response()),
        Err(_) => Err(ApiError(StatusCode::NOT_FOUND, "not found".into())),
    }
}

async fn image(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let rel = st.manifest.get(&id).and_then(|r| r.image.clone());
    match rel {
        Some(rel) => send_file(st.manifest.resolve(&rel)).await,
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("no image for `{id}`"))),
    }
}

async fn ui_file(st: &AppState, rel: &str) -> ApiResult<Response> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, "not found".into());
    let dir = st.ui_dir.as_ref().ok_or_else(not_found)?;
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = FsPath::new(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(not_found());
    }
    send_file(dir.join(rel)).await
}

async fn ui_index(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    ui_file(&st, "").await
}

async fn ui_asset(State(st): State<Arc<AppState>>, Path(rel): Path<String>) -> ApiResult<Response> {
    ui_file(&st, &rel).await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/status", get(session_status))
        .route("/images/{id}", get(image))
        .route("/ui/", get(ui_index))
        .route("/ui/{*path}", get(ui_asset))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot listen on {addr}: {e}")))?;
    let bound = listener.local_addr().map_err(|e| Error::Config(e.to_string()))?;
    log::info!("annotation service listening on http://{bound}");
    axum::serve(listener, router(state)).await.map_err(|e| Error::Config(format!("server failed: {e}")))
}
