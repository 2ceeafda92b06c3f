//! Reference RDMS server.
//!
//! A single demo account, immutable permId-addressed datasets stored as
//! content-addressed blobs, and stub DOI issuance. State lives in
//! `<dataDir>/store.json` plus `<dataDir>/blobs/<sha256>` and survives restarts.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use data_encoding::BASE64;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use tower::ServiceExt;
use tower_http::services::ServeFile;

use super::{validate_dataset_path, DatasetDescriptor, DatasetFile, DoiRecord, RdmsError, Result, SessionToken};
use crate::digest::sha256_hex;
use crate::tarutil::tar_of_files;

pub const DEMO_USER: &str = "rrp-demo";
pub const DEMO_PASSWORD: &str = "rrp-demo";
const DOI_PREFIX: &str = "10.5281/rrp-sim.";

#[derive(Debug, Clone)]
pub struct RdmsServerConfig {
    pub data_dir: PathBuf,
    pub bind: SocketAddr,
    pub token_ttl: Duration,
    /// Accepted `user -> password` pairs.
    pub users: BTreeMap<String, String>,
}

impl RdmsServerConfig {
    /// Loopback on an ephemeral port with 12 hour tokens.
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            token_ttl: Duration::from_secs(12 * 3600),
            users: BTreeMap::from([(DEMO_USER.to_owned(), DEMO_PASSWORD.to_owned())]),
        }
    }

    pub fn with_user(mut self, user: &str, password: &str) -> Self {
        self.users.insert(user.to_owned(), password.to_owned());
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Publication {
    seq: u64,
    object_ref: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Store {
    perm_seq: u64,
    datasets: BTreeMap<String, DatasetDescriptor>,
    /// Keyed by objectRef.
    publications: BTreeMap<String, Publication>,
}

struct ServerState {
    data_dir: PathBuf,
    base_url: String,
    token_ttl: Duration,
    store: RwLock<Store>,
    writer: tokio::sync::Mutex<()>,
    tokens: Mutex<HashMap<String, (String, DateTime<Utc>)>>,
    users: BTreeMap<String, String>,
}

impl ServerState {
    fn blob_path(&self, hash: &str) -> PathBuf {
        self.data_dir.join("blobs").join(hash)
    }

    fn doi_record(&self, p: &Publication) -> DoiRecord {
        DoiRecord {
            doi: format!("{DOI_PREFIX}{}", p.seq),
            object_ref: p.object_ref.clone(),
            resolved_url: format!("{}/published/{}", self.base_url, p.seq),
        }
    }

    fn persist(&self, store: &Store) -> std::io::Result<()> {
        let tmp = self.data_dir.join("store.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(store)?)?;
        std::fs::rename(tmp, self.data_dir.join("store.json"))
    }
}

/// A running reference server. Dropping the handle stops it.
pub struct RdmsServerHandle {
    addr: SocketAddr,
    state: Arc<ServerState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<()>>,
}

impl RdmsServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        self.state.base_url.clone()
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Test hook: flips the first byte of the stored blob behind one file.
    pub fn corrupt_file(&self, perm_id: &str, path: &str) -> Result<()> {
        let hash = {
            let store = self.state.store.read().unwrap();
            let d = store.datasets.get(perm_id).ok_or_else(|| RdmsError::DatasetNotFound(perm_id.to_owned()))?;
            d.files.iter().find(|f| f.path == path).ok_or_else(|| RdmsError::InvalidPath(path.to_owned()))?.content_hash.clone()
        };
        let blob = self.state.blob_path(&hash);
        let mut bytes = std::fs::read(&blob)?;
        match bytes.first_mut() {
            Some(b) => *b ^= 0xff,
            None => bytes.push(0),
        }
        std::fs::write(blob, bytes)?;
        Ok(())
    }

    /// Test hook: every issued token expires now.
    pub fn expire_tokens(&self) {
        for (_, exp) in self.state.tokens.lock().unwrap().values_mut() {
            *exp = Utc::now() - chrono::Duration::seconds(1);
        }
    }

    pub fn account_count(&self) -> usize {
        1
    }
}

impl Drop for RdmsServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn check_writable(dir: &Path) -> Result<()> {
    let unwritable = |e: std::io::Error| RdmsError::DataDirUnwritable(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir.join("blobs")).map_err(unwritable)?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(unwritable)?;
    std::fs::remove_file(probe).map_err(unwritable)
}

pub async fn serve_reference_rdms(config: RdmsServerConfig) -> Result<RdmsServerHandle> {
    check_writable(&config.data_dir)?;
    let store = match std::fs::read(config.data_dir.join("store.json")) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| RdmsError::Protocol(format!("store.json: {e}")))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Store::default(),
        Err(e) => return Err(e.into()),
    };
    let listener = tokio::net::TcpListener::bind(config.bind).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => RdmsError::PortInUse(config.bind.port()),
        _ => RdmsError::Io(e.to_string()),
    })?;
    let addr = listener.local_addr()?;
    let state = Arc::new(ServerState {
        data_dir: config.data_dir,
        base_url: format!("http://{addr}"),
        token_ttl: config.token_ttl,
        store: RwLock::new(store),
        writer: tokio::sync::Mutex::new(()),
        tokens: Mutex::default(),
        users: config.users,
    });
    let app = router(state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    tracing::info!(%addr, "reference RDMS listening");
    Ok(RdmsServerHandle { addr, state, shutdown: Some(tx), task: Some(task) })
}

fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/login", post(login))
        .route("/datasets", post(register).layer(DefaultBodyLimit::disable()))
        .route("/datasets/{perm_id}", get(resolve))
        .route("/datasets/{perm_id}/files/{*path}", get(read_file))
        .route("/publish", post(publish))
        .route("/publish/{object_ref}", get(publication))
        .route("/published/{seq}", get(published))
        .with_state(state)
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "message": self.2 }))).into_response()
    }
}

impl From<RdmsError> for ApiError {
    fn from(e: RdmsError) -> Self {
        let msg = e.to_string();
        match e {
            RdmsError::AuthFailed => ApiError(StatusCode::UNAUTHORIZED, "AuthFailed", msg),
            RdmsError::DatasetNotFound(_) => ApiError(StatusCode::NOT_FOUND, "DatasetNotFound", msg),
            RdmsError::ObjectNotFound(_) => ApiError(StatusCode::NOT_FOUND, "ObjectNotFound", msg),
            RdmsError::EmptyDataset => ApiError(StatusCode::BAD_REQUEST, "EmptyDataset", msg),
            RdmsError::InvalidPath(_) => ApiError(StatusCode::BAD_REQUEST, "InvalidPath", msg),
            RdmsError::Protocol(_) => ApiError(StatusCode::BAD_REQUEST, "Protocol", msg),
            _ => ApiError(StatusCode::INTERNAL_SERVER_ERROR, "Internal", msg),
        }
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn authenticate(state: &ServerState, headers: &HeaderMap) -> ApiResult<String> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or(RdmsError::AuthFailed)?;
    let tokens = state.tokens.lock().unwrap();
    match tokens.get(token) {
        Some((user, exp)) if *exp > Utc::now() => Ok(user.clone()),
        _ => Err(RdmsError::AuthFailed.into()),
    }
}

#[derive(Deserialize)]
struct LoginRequest {
    user: String,
    password: String,
}

async fn login(State(state): State<Arc<ServerState>>, Json(req): Json<LoginRequest>) -> ApiResult<Json<SessionToken>> {
    if state.users.get(&req.user) != Some(&req.password) {
        return Err(RdmsError::AuthFailed.into());
    }
    let token = uuid::Uuid::new_v4().simple().to_string();
    let ttl = chrono::Duration::from_std(state.token_ttl).unwrap_or(chrono::Duration::hours(12));
    let expires_at = Utc::now() + ttl;
    state.tokens.lock().unwrap().insert(token.clone(), (req.user.clone(), expires_at));
    Ok(Json(SessionToken { token, user_id: req.user, expires_at }))
}

async fn resolve(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    UrlPath(perm_id): UrlPath<String>,
) -> ApiResult<Json<DatasetDescriptor>> {
    authenticate(&state, &headers)?;
    let store = state.store.read().unwrap();
    let d = store.datasets.get(&perm_id).ok_or(RdmsError::DatasetNotFound(perm_id))?;
    Ok(Json(d.clone()))
}

async fn read_file(
    State(state): State<Arc<ServerState>>,
    UrlPath((perm_id, path)): UrlPath<(String, String)>,
    req: Request,
) -> ApiResult<Response> {
    authenticate(&state, req.headers())?;
    let hash = {
        let store = state.store.read().unwrap();
        let d = store.datasets.get(&perm_id).ok_or_else(|| RdmsError::DatasetNotFound(perm_id.clone()))?;
        let f = d.files.iter().find(|f| f.path == path).ok_or_else(|| {
            ApiError(StatusCode::NOT_FOUND, "FileNotFound", format!("{perm_id} has no file {path}"))
        })?;
        f.content_hash.clone()
    };
    let resp = ServeFile::new(state.blob_path(&hash)).oneshot(req).await.expect("infallible");
    Ok(resp.map(Body::new))
}

#[derive(Deserialize)]
struct UploadFile {
    path: String,
    /// Base64 file content.
    content: String,
}

#[derive(Deserialize)]
struct RegisterRequest {
    files: Vec<UploadFile>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

async fn register(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    Json(req): Json<RegisterRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    authenticate(&state, &headers)?;
    if req.files.is_empty() {
        return Err(RdmsError::EmptyDataset.into());
    }
    let mut decoded = BTreeMap::new();
    for f in req.files {
        validate_dataset_path(&f.path)?;
        let bytes = BASE64.decode(f.content.as_bytes()).map_err(|e| RdmsError::Protocol(format!("{}: {e}", f.path)))?;
        if decoded.insert(f.path.clone(), bytes).is_some() {
            return Err(RdmsError::Protocol(format!("duplicate path {}", f.path)).into());
        }
    }

    // One writer at a time keeps permId sequence numbers monotonic.
    let _guard = state.writer.lock().await;
    let mut files = Vec::with_capacity(decoded.len());
    for (path, bytes) in &decoded {
        let hash = sha256_hex(bytes);
        let blob = state.blob_path(&hash);
        if !blob.exists() {
            let tmp = blob.with_extension("tmp");
            std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, &blob)).map_err(RdmsError::from)?;
        }
        files.push(DatasetFile { path: path.clone(), byte_size: bytes.len() as u64, content_hash: hash });
    }
    let mut store = state.store.write().unwrap();
    store.perm_seq += 1;
    let perm_id = format!("{}-{}", Utc::now().format("%Y%m%d%H%M%S%3f"), store.perm_seq);
    let total_bytes = files.iter().map(|f| f.byte_size).sum();
    store.datasets.insert(
        perm_id.clone(),
        DatasetDescriptor { perm_id: perm_id.clone(), files, total_bytes, metadata: req.metadata },
    );
    state.persist(&store).map_err(RdmsError::from)?;
    Ok(Json(json!({ "permId": perm_id })))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct PublishRequest {
    object_ref: String,
}

async fn publish(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    Json(req): Json<PublishRequest>,
) -> ApiResult<Json<DoiRecord>> {
    authenticate(&state, &headers)?;
    let _guard = state.writer.lock().await;
    let mut store = state.store.write().unwrap();
    if let Some(p) = store.publications.get(&req.object_ref) {
        return Ok(Json(state.doi_record(p)));
    }
    if !store.datasets.contains_key(&req.object_ref) {
        return Err(RdmsError::ObjectNotFound(req.object_ref).into());
    }
    let p = Publication { seq: store.publications.len() as u64 + 1, object_ref: req.object_ref.clone() };
    store.publications.insert(req.object_ref, p.clone());
    state.persist(&store).map_err(RdmsError::from)?;
    Ok(Json(state.doi_record(&p)))
}

async fn publication(
    State(state): State<Arc<ServerState>>,
    headers: HeaderMap,
    UrlPath(object_ref): UrlPath<String>,
) -> ApiResult<Json<DoiRecord>> {
    authenticate(&state, &headers)?;
    let store = state.store.read().unwrap();
    let p = store.publications.get(&object_ref).ok_or(RdmsError::ObjectNotFound(object_ref))?;
    Ok(Json(state.doi_record(p)))
}

/// Public download of a published dataset as a tar of its files.
async fn published(State(state): State<Arc<ServerState>>, UrlPath(seq): UrlPath<u64>) -> ApiResult<Response> {
    let files = {
        let store = state.store.read().unwrap();
        let p = store
            .publications
            .values()
            .find(|p| p.seq == seq)
            .ok_or_else(|| RdmsError::ObjectNotFound(format!("publication {seq}")))?;
        store.datasets[&p.object_ref].files.clone()
    };
    let mut contents = Vec::with_capacity(files.len());
    for f in &files {
        contents.push((f.path.as_str(), std::fs::read(state.blob_path(&f.content_hash)).map_err(RdmsError::from)?));
    }
    let tar = tar_of_files(contents.iter().map(|(p, b)| (*p, b.as_slice()))).map_err(RdmsError::from)?;
    Ok(([(header::CONTENT_TYPE, "application/x-tar")], tar).into_response())
}
