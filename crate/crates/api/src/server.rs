use std::io::ErrorKind;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::middleware::from_fn_with_state;
use axum::response::{Html, IntoResponse};
use axum::routing::{any, get, post};
use axum::Router;
use rrp_core::orchestrator::Orchestrator;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tower_http::services::ServeDir;

use crate::auth::{require_auth, TokenStore};
use crate::error::ApiError;
use crate::handlers as h;
use crate::proxy::proxy;
use crate::tls::TlsFiles;

/// Loopback port the service binds when none is configured.
pub const DEFAULT_PORT: u16 = 7443;
pub const HEARTBEAT: Duration = Duration::from_secs(15);

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    /// Static web console served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Serve HTTPS with these files instead of plain HTTP.
    pub tls: Option<TlsFiles>,
    pub heartbeat: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { bind: (Ipv4Addr::LOCALHOST, DEFAULT_PORT).into(), ui_dir: None, tls: None, heartbeat: HEARTBEAT }
    }
}

impl ServeConfig {
    pub fn on_port(port: u16) -> Self {
        Self { bind: (Ipv4Addr::LOCALHOST, port).into(), ..Self::default() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("TLS setup failed: {0}")]
    Tls(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub struct AppState {
    pub orchestrator: Orchestrator,
    pub tokens: TokenStore,
    pub heartbeat: Duration,
    /// Cancelled on shutdown; ends open event streams so shutdown completes.
    pub shutdown: CancellationToken,
}

/// The full route table. Everything except login, health and the static
/// console requires a token.
pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let protected = Router::new()
        .route("/api/v1/projects", get(h::list_projects).post(h::create_project))
        .route("/api/v1/projects/{id}", get(h::get_project).delete(h::delete_project))
        .route("/api/v1/projects/{id}/start", post(h::start_project))
        .route("/api/v1/projects/{id}/stop", post(h::stop_project))
        .route("/api/v1/projects/{id}/resources", axum::routing::put(h::set_resources))
        .route("/api/v1/projects/{id}/results", get(h::list_results))
        .route("/api/v1/projects/{id}/results/{*path}", get(h::read_result))
        .route("/api/v1/projects/{id}/upload", post(h::upload_result))
        .route("/api/v1/projects/{id}/archive", post(h::archive_project))
        .route("/api/v1/projects/{id}/share", post(h::create_share))
        .route("/api/v1/projects/{id}/events", get(h::events))
        .route("/api/v1/projects/{id}/journal", get(h::journal))
        .route("/api/v1/projects/{id}/bundle", get(h::bundle))
        .route("/api/v1/projects/{id}/exec", post(h::exec))
        .route("/api/v1/projects/{id}/push", post(h::push_image))
        .route("/api/v1/shares/{share_id}", get(h::get_share))
        .route("/api/v1/shares/{share_id}/open", post(h::open_share))
        .route("/session/{*rest}", any(proxy))
        .route_layer(from_fn_with_state(state.clone(), require_auth));

    let public = Router::new()
        .route("/api/v1/login", post(h::login))
        .route("/api/v1/health", get(h::health));

    let app = protected.merge(public).with_state(state);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app.route("/", get(|| async { Html(PLACEHOLDER_PAGE) })).fallback(|| async {
            ApiError::new(axum::http::StatusCode::NOT_FOUND, "NotFound", "no such page").into_response()
        }),
    }
}

const PLACEHOLDER_PAGE: &str = "<!doctype html>\n<html><head><title>RRP</title></head><body>\
<h1>Reproducible Research Platform</h1>\
<p>No web console is installed. The REST API lives under <code>/api/v1/</code>; \
sign in with <code>POST /api/v1/login</code>.</p></body></html>\n";

/// A running service. Dropping the handle leaves the server running; call
/// [`ServiceHandle::shutdown`] to stop it.
pub struct ServiceHandle {
    addr: SocketAddr,
    https: bool,
    state: Arc<AppState>,
    task: JoinHandle<()>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("{}://{}", if self.https { "https" } else { "http" }, self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub async fn shutdown(self) {
        self.state.shutdown.cancel();
        let _ = self.task.await;
    }

    /// Runs until the server stops on its own.
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

/// Binds and serves the route table for `orchestrator`.
pub async fn serve(orchestrator: Orchestrator, config: ServeConfig) -> Result<ServiceHandle, ServeError> {
    let tls = match &config.tls {
        Some(files) => Some(crate::tls::acceptor(files).map_err(ServeError::Tls)?),
        None => None,
    };
    let listener = TcpListener::bind(config.bind).await.map_err(|e| match e.kind() {
        ErrorKind::AddrInUse => ServeError::PortInUse(config.bind.port()),
        _ => ServeError::Io(e),
    })?;
    let addr = listener.local_addr()?;
    let state = Arc::new(AppState {
        tokens: TokenStore::new(orchestrator.config().api_token_ttl),
        orchestrator,
        heartbeat: config.heartbeat,
        shutdown: CancellationToken::new(),
    });
    let app = router(state.clone(), config.ui_dir.clone());
    let https = tls.is_some();
    let stopped = state.shutdown.clone().cancelled_owned();
    let task = match tls {
        None => tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(stopped).await {
                tracing::error!("API server stopped: {e}");
            }
        }),
        Some(acceptor) => tokio::spawn(crate::tls::serve_tls(listener, acceptor, app, stopped)),
    };
    tracing::info!("API listening on {addr}");
    Ok(ServiceHandle { addr, https, state, task })
}
