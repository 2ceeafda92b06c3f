//! Typed HTTP client for the service, used by the command-line tool.

use std::path::Path;

use futures::stream::BoxStream;
use futures::{stream, StreamExt};
use reqwest::{Method, RequestBuilder, Response};
use rrp_core::orchestrator::{LogEvent, ProjectRecord, ResultEntry, SessionInfo, ShareRecord};
use rrp_core::runtime::{ExecOutput, PushReceipt, ResourceLimits};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::io::AsyncWriteExt;

use crate::error::ErrorBody;
use crate::handlers::WARNING_HEADER;
use crate::sse::{SseFrame, SseParser};
use crate::types::*;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{message}", message = .body.message)]
    Api { status: u16, body: ErrorBody },
    #[error("cannot reach {url}: {reason}")]
    Unreachable { url: String, reason: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl ClientError {
    /// A 4xx answer: the request was wrong, not the system.
    pub fn is_user_error(&self) -> bool {
        matches!(self, ClientError::Api { status, .. } if (400..500).contains(status))
    }

    /// The service's error code, if it answered.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// A downloaded bundle or player script.
#[derive(Debug, Clone)]
pub struct Download {
    pub bytes: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ApiClient {
    base: String,
    http: reqwest::Client,
    token: Option<String>,
}

impl ApiClient {
    pub fn new(base_url: &str) -> Self {
        Self::build(base_url, false)
    }

    /// Accepts any server certificate, for self-signed local deployments.
    pub fn insecure(base_url: &str) -> Self {
        Self::build(base_url, true)
    }

    fn build(base_url: &str, insecure: bool) -> Self {
        let http = reqwest::Client::builder()
            .danger_accept_invalid_certs(insecure)
            .build()
            .expect("static client configuration");
        Self { base: base_url.trim_end_matches('/').to_owned(), http, token: None }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let req = self.http.request(method, format!("{}{path}", self.base));
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    async fn send(&self, req: RequestBuilder) -> Result<Response> {
        let resp = req.send().await.map_err(|e| ClientError::Unreachable { url: self.base.clone(), reason: e.to_string() })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody {
            error: format!("Http{status}"),
            message: if text.is_empty() { format!("HTTP {status}") } else { text },
            details: Default::default(),
        });
        Err(ClientError::Api { status, body })
    }

    async fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        let resp = self.send(req).await?;
        resp.json().await.map_err(|e| ClientError::Protocol(e.to_string()))
    }

    async fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let mut req = self.request(method, path);
        if let Some(b) = body {
            req = req.json(b);
        }
        self.json(req).await
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.call::<(), T>(Method::GET, path, None).await
    }

    async fn post<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.call::<(), T>(Method::POST, path, None).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/api/v1/health").await
    }

    /// Signs in and keeps the token for later calls.
    pub async fn login(&mut self, user: &str, password: &str) -> Result<ApiToken> {
        let req = LoginRequest { user: user.into(), password: password.into() };
        let token: ApiToken = self.call(Method::POST, "/api/v1/login", Some(&req)).await?;
        self.token = Some(token.token.clone());
        Ok(token)
    }

    pub async fn list_projects(&self) -> Result<Vec<ProjectRecord>> {
        self.get("/api/v1/projects").await
    }

    pub async fn create_project(&self, req: &CreateProjectRequest) -> Result<ProjectRecord> {
        self.call(Method::POST, "/api/v1/projects", Some(req)).await
    }

    pub async fn get_project(&self, id: &str) -> Result<ProjectRecord> {
        self.get(&format!("/api/v1/projects/{id}")).await
    }

    pub async fn delete_project(&self, id: &str) -> Result<ProjectRecord> {
        self.call::<(), _>(Method::DELETE, &format!("/api/v1/projects/{id}"), None).await
    }

    pub async fn start_project(&self, id: &str, req: Option<&StartRequest>) -> Result<SessionInfo> {
        self.call(Method::POST, &format!("/api/v1/projects/{id}/start"), req).await
    }

    pub async fn stop_project(&self, id: &str) -> Result<ProjectRecord> {
        self.post(&format!("/api/v1/projects/{id}/stop")).await
    }

    pub async fn set_resources(&self, id: &str, limits: &ResourceLimits) -> Result<ProjectRecord> {
        self.call(Method::PUT, &format!("/api/v1/projects/{id}/resources"), Some(limits)).await
    }

    pub async fn list_results(&self, id: &str) -> Result<Vec<ResultEntry>> {
        self.get(&format!("/api/v1/projects/{id}/results")).await
    }

    pub async fn read_result(&self, id: &str, path: &str) -> Result<Vec<u8>> {
        let resp = self.send(self.request(Method::GET, &format!("/api/v1/projects/{id}/results/{path}"))).await?;
        Ok(resp.bytes().await.map_err(|e| ClientError::Io(e.to_string()))?.to_vec())
    }

    pub async fn upload_result(&self, id: &str, req: &UploadRequest) -> Result<PermIdResponse> {
        self.call(Method::POST, &format!("/api/v1/projects/{id}/upload"), Some(req)).await
    }

    pub async fn archive_project(&self, id: &str) -> Result<PermIdResponse> {
        self.post(&format!("/api/v1/projects/{id}/archive")).await
    }

    pub async fn create_share(&self, id: &str) -> Result<ShareRecord> {
        self.post(&format!("/api/v1/projects/{id}/share")).await
    }

    pub async fn get_share(&self, share_id: &str) -> Result<ShareRecord> {
        self.get(&format!("/api/v1/shares/{share_id}")).await
    }

    pub async fn open_share(&self, share_id: &str) -> Result<ProjectRecord> {
        self.post(&format!("/api/v1/shares/{share_id}/open")).await
    }

    pub async fn journal(&self, id: &str) -> Result<Vec<LogEvent>> {
        self.get(&format!("/api/v1/projects/{id}/journal")).await
    }

    pub async fn exec(&self, id: &str, argv: &[String]) -> Result<ExecOutput> {
        self.call(Method::POST, &format!("/api/v1/projects/{id}/exec"), Some(&ExecRequest { argv: argv.to_vec() })).await
    }

    pub async fn push_image(&self, id: &str, req: &PushRequest) -> Result<PushReceipt> {
        self.call(Method::POST, &format!("/api/v1/projects/{id}/push"), Some(req)).await
    }

    /// Streams a player bundle (or with `script`, a player script) to `out`.
    pub async fn download_bundle(&self, id: &str, script: bool, out: &Path) -> Result<Download> {
        let mut req = self.request(Method::GET, &format!("/api/v1/projects/{id}/bundle"));
        if script {
            req = req.query(&[("kind", "script")]);
        }
        let resp = self.send(req).await?;
        let warnings = resp
            .headers()
            .get_all(WARNING_HEADER)
            .iter()
            .filter_map(|v| v.to_str().ok().map(str::to_owned))
            .collect();
        let io = |e: std::io::Error| ClientError::Io(format!("{}: {e}", out.display()));
        let partial = out.with_extension("download");
        let mut file = tokio::fs::File::create(&partial).await.map_err(io)?;
        let mut body = resp.bytes_stream();
        let mut bytes = 0u64;
        while let Some(chunk) = body.next().await {
            let chunk = chunk.map_err(|e| ClientError::Io(e.to_string()))?;
            bytes += chunk.len() as u64;
            file.write_all(&chunk).await.map_err(io)?;
        }
        file.flush().await.map_err(io)?;
        drop(file);
        tokio::fs::rename(&partial, out).await.map_err(io)?;
        Ok(Download { bytes, warnings })
    }

    /// Subscribes to a project's events after `last_seen_sequence`.
    pub async fn events(&self, id: &str, last_seen_sequence: u64) -> Result<BoxStream<'static, Result<SseFrame>>> {
        let req = self
            .request(Method::GET, &format!("/api/v1/projects/{id}/events"))
            .query(&[("lastSeenSequence", last_seen_sequence)]);
        let resp = self.send(req).await?;
        let frames = resp
            .bytes_stream()
            .scan(SseParser::default(), |parser, chunk| {
                let out: Vec<Result<SseFrame>> = match chunk {
                    Ok(bytes) => parser.push(&bytes).into_iter().map(Ok).collect(),
                    Err(e) => vec![Err(ClientError::Io(e.to_string()))],
                };
                futures::future::ready(Some(stream::iter(out)))
            })
            .flatten()
            .boxed();
        Ok(frames)
    }

    /// Raw request through the session proxy; returns status and body.
    pub async fn session_request(&self, method: Method, path: &str) -> Result<(u16, Vec<u8>)> {
        let resp = self
            .request(method, path)
            .send()
            .await
            .map_err(|e| ClientError::Unreachable { url: self.base.clone(), reason: e.to_string() })?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await.map_err(|e| ClientError::Io(e.to_string()))?.to_vec();
        Ok((status, body))
    }
}
