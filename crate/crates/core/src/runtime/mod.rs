//! Container runtime adapter.
//!
//! [`RuntimeAdapter`] is the narrow surface the platform needs from a
//! container runtime. [`SimRuntime`] is a deterministic in-memory backend used
//! by tests and demos; [`DockerRuntime`] talks to a container daemon.

mod docker;
mod oci;
mod sim;

use std::path::{Component, Path, PathBuf};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{ImageRef, RecipeText};

pub use docker::DockerRuntime;
pub use oci::{read_image_layout, write_image_layout, ImageArchive};
pub use sim::{LedgerEntry, SimConfig, SimFs, SimProgram, SimRegistry, SimRuntime, SimSessionInfo};

pub const MIB: u64 = 1024 * 1024;
pub const GIB: u64 = 1024 * MIB;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("build failed: {message}")]
    BuildFailed { message: String, last_lines: Vec<String> },
    #[error("container daemon unavailable: {0}")]
    DaemonUnavailable(String),
    #[error("image not found: {0}")]
    ImageNotFound(String),
    #[error("resources denied: {0}")]
    ResourceDenied(String),
    #[error("session start failed: {0}")]
    StartFailed(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("corrupt image archive: {0}")]
    CorruptArchive(String),
    #[error("registry authentication failed")]
    AuthFailed,
    #[error("registry unreachable: {0}")]
    RegistryUnreachable(String),
    #[error("image import failed: {0}")]
    ImportFailed(String),
    #[error("read-only mount: {0}")]
    ReadOnly(String),
    #[error("path escapes its mount: {0}")]
    PathEscape(String),
    #[error("file not found in session: {0}")]
    FileNotFound(String),
    #[error("invalid resource limits: {0}")]
    InvalidLimits(String),
    #[error("session is not up: {0}")]
    NotUp(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for RuntimeError {
    fn from(e: std::io::Error) -> Self {
        RuntimeError::Io(e.to_string())
    }
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResourceLimits {
    pub cpu_cores: f64,
    pub memory_bytes: u64,
}

impl ResourceLimits {
    pub fn new(cpu_cores: f64, memory_bytes: u64) -> Result<Self> {
        let limits = Self { cpu_cores, memory_bytes };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cpu_cores.is_finite() && self.cpu_cores > 0.0) {
            return Err(RuntimeError::InvalidLimits(format!("cpu cores must be positive, got {}", self.cpu_cores)));
        }
        if self.memory_bytes < 64 * MIB {
            return Err(RuntimeError::InvalidLimits(format!(
                "memory must be at least 64 MiB, got {} bytes",
                self.memory_bytes
            )));
        }
        Ok(())
    }
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self { cpu_cores: 1.0, memory_bytes: 2 * GIB }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MountSpec {
    pub host_path: PathBuf,
    pub container_path: String,
    pub read_only: bool,
}

impl MountSpec {
    pub fn new(host_path: impl Into<PathBuf>, container_path: impl Into<String>, read_only: bool) -> Self {
        Self { host_path: host_path.into(), container_path: container_path.into(), read_only }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    Starting,
    Up,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionHandle {
    pub session_id: String,
    pub image_ref: ImageRef,
    pub internal_endpoint: String,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BuildResult {
    pub image_id: Option<String>,
    pub log_line_count: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PushReceipt {
    pub remote_reference: String,
    pub registry_url: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryCredentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecOutput {
    pub exit_code: i64,
    pub output: String,
}

/// Options for starting a session.
#[derive(Debug, Clone, Default)]
pub struct SessionRequest {
    pub mounts: Vec<MountSpec>,
    pub command: Option<Vec<String>>,
    pub env: Vec<(String, String)>,
}

/// A plain HTTP request forwarded to a session by the reverse proxy.
#[derive(Debug, Clone)]
pub struct ProxyRequest {
    pub method: String,
    /// Path and query as seen by the platform (including `/session/<id>/`).
    pub path_and_query: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ProxyResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

/// Consumer of build log lines, called in order.
pub type LogSink<'a> = &'a (dyn Fn(&str) + Send + Sync);

#[async_trait]
pub trait RuntimeAdapter: Send + Sync {
    fn backend_name(&self) -> &'static str;

    async fn build_image(
        &self,
        recipe: &RecipeText,
        context: &Path,
        image: &ImageRef,
        logs: LogSink<'_>,
    ) -> Result<BuildResult>;

    /// Image id when `image` is present on this backend.
    async fn image_id(&self, image: &ImageRef) -> Result<Option<String>>;

    async fn create_session(
        &self,
        image: &ImageRef,
        limits: ResourceLimits,
        request: SessionRequest,
    ) -> Result<SessionHandle>;

    async fn session(&self, session_id: &str) -> Result<SessionHandle>;

    /// Idempotent: stopping a stopped session is a no-op.
    async fn stop_session(&self, session_id: &str) -> Result<SessionHandle>;

    async fn destroy_session(&self, session_id: &str) -> Result<()>;

    async fn exec(&self, session_id: &str, argv: &[String]) -> Result<ExecOutput>;

    /// Writes a file inside the session; denied under read-only mounts.
    async fn write_file(&self, session_id: &str, container_path: &str, bytes: &[u8]) -> Result<()>;

    async fn read_file(&self, session_id: &str, container_path: &str) -> Result<Vec<u8>>;

    /// Writes an OCI image layout tarball of `image` to `out`.
    async fn export_image(&self, image: &ImageRef, out: &Path) -> Result<u64>;

    async fn import_image(&self, archive: &Path) -> Result<ImageRef>;

    async fn push_image(
        &self,
        image: &ImageRef,
        registry_url: &str,
        credentials: Option<&RegistryCredentials>,
    ) -> Result<PushReceipt>;

    async fn pull_image(&self, remote_reference: &str) -> Result<ImageRef>;

    async fn forward_http(&self, session_id: &str, request: ProxyRequest) -> Result<ProxyResponse>;
}

/// `registry_url` reduced to a host (and optional port) usable in references.
pub fn registry_host(registry_url: &str) -> String {
    let without_scheme = registry_url.split_once("://").map(|(_, r)| r).unwrap_or(registry_url);
    without_scheme.trim_end_matches('/').to_owned()
}

pub fn remote_reference(image: &ImageRef, registry_url: &str) -> String {
    format!("{}/{}", registry_host(registry_url), image)
}

/// Splits a remote reference back into a local image reference by dropping
/// the registry host.
pub fn local_ref_from_remote(remote: &str) -> Option<ImageRef> {
    let r = ImageRef::parse(remote)?;
    let repo = match r.repository.split_once('/') {
        Some((host, rest)) if host.contains('.') || host.contains(':') || host == "localhost" => rest.to_owned(),
        _ => r.repository.clone(),
    };
    Some(ImageRef { repository: repo, tag: r.tag })
}

/// Lexically normalizes an absolute container path. `..` may not climb above `/`.
pub fn normalize_container_path(path: &str) -> Result<String> {
    if !path.starts_with('/') {
        return Err(RuntimeError::PathEscape(path.to_owned()));
    }
    let mut parts: Vec<&str> = Vec::new();
    for comp in Path::new(path).components() {
        match comp {
            Component::RootDir | Component::CurDir => {}
            Component::ParentDir => {
                if parts.pop().is_none() {
                    return Err(RuntimeError::PathEscape(path.to_owned()));
                }
            }
            Component::Normal(s) => parts.push(s.to_str().ok_or_else(|| RuntimeError::PathEscape(path.to_owned()))?),
            Component::Prefix(_) => return Err(RuntimeError::PathEscape(path.to_owned())),
        }
    }
    Ok(format!("/{}", parts.join("/")))
}
