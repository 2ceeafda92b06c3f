use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::header::{CONTENT_DISPOSITION, CONTENT_LENGTH, CONTENT_TYPE, LOCATION, SET_COOKIE};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::{Extension, Json};
use futures::StreamExt;
use rrp_core::bundler::{export_player_bundle, export_player_script, BundleKind};
use rrp_core::orchestrator::Caller;
use rrp_core::project::ProjectSource;
use rrp_core::runtime::{RegistryCredentials, ResourceLimits};
use serde::Deserialize;
use tokio_util::io::ReaderStream;

use crate::auth::session_cookie;
use crate::error::ApiError;
use crate::server::AppState;
use crate::sse::frame_for;
use crate::types::*;

type S = State<Arc<AppState>>;
type Res<T> = Result<T, ApiError>;

pub const WARNING_HEADER: &str = "x-rrp-warning";

fn body<T>(json: Result<Json<T>, JsonRejection>) -> Res<T> {
    json.map(|Json(t)| t).map_err(|e| ApiError::bad_request(e.body_text()))
}

pub async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: rrp_core::GENERATOR.into() })
}

pub async fn login(State(s): S, req: Result<Json<LoginRequest>, JsonRejection>) -> Res<Response> {
    let req = body(req)?;
    let client = s.orchestrator.rdms_client(&s.orchestrator.config().rdms_url)?;
    let rdms_token = client.login(&req.user, &req.password).await?;
    let token = s.tokens.mint(rdms_token);
    let cookie = session_cookie(&token);
    Ok(([(SET_COOKIE, cookie)], Json(token)).into_response())
}

pub async fn list_projects(State(s): S, Extension(caller): Extension<Caller>) -> impl IntoResponse {
    Json(s.orchestrator.list_projects(&caller))
}

pub async fn create_project(
    State(s): S,
    Extension(caller): Extension<Caller>,
    req: Result<Json<CreateProjectRequest>, JsonRejection>,
) -> Res<Response> {
    let req = body(req)?;
    if req.repo_url.trim().is_empty() {
        return Err(ApiError::bad_request("repoUrl is required"));
    }
    let name = req.name.clone().filter(|n| !n.trim().is_empty()).unwrap_or_else(|| default_project_name(&req.repo_url));
    let source = ProjectSource { repo_url: req.repo_url, r#ref: req.r#ref, credentials: req.credentials };
    let record = s.orchestrator.create_project(&caller, source, &name).await?;
    let location = HeaderValue::from_str(&format!("/api/v1/projects/{}", record.project_id)).expect("ids are ASCII");
    Ok((StatusCode::ACCEPTED, [(LOCATION, location)], Json(record)).into_response())
}

pub async fn get_project(State(s): S, Extension(caller): Extension<Caller>, Path(id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.get_project(&caller, &id)?))
}

pub async fn delete_project(State(s): S, Extension(caller): Extension<Caller>, Path(id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.delete_project(&caller, &id).await?))
}

/// The body is optional; fields left out keep the project's allocation.
pub async fn start_project(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path(id): Path<String>,
    raw: Bytes,
) -> Res<impl IntoResponse> {
    let limits = if raw.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        let req: StartRequest = serde_json::from_slice(&raw).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let current = s.orchestrator.get_project(&caller, &id)?.resources;
        Some(ResourceLimits {
            cpu_cores: req.cpu_cores.unwrap_or(current.cpu_cores),
            memory_bytes: req.memory_bytes.unwrap_or(current.memory_bytes),
        })
    };
    Ok(Json(s.orchestrator.start_project(&caller, &id, limits).await?))
}

pub async fn stop_project(State(s): S, Extension(caller): Extension<Caller>, Path(id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.stop_project(&caller, &id).await?))
}

pub async fn set_resources(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path(id): Path<String>,
    req: Result<Json<ResourceLimits>, JsonRejection>,
) -> Res<impl IntoResponse> {
    let limits = body(req)?;
    Ok(Json(s.orchestrator.set_resources(&caller, &id, limits).await?))
}

pub async fn list_results(State(s): S, Extension(caller): Extension<Caller>, Path(id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.list_results(&caller, &id)?))
}

fn content_type_for(path: &str) -> &'static str {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase()).unwrap_or_default();
    match ext.as_str() {
        "csv" => "text/csv; charset=utf-8",
        "txt" | "log" | "md" => "text/plain; charset=utf-8",
        "json" => "application/json",
        "html" | "htm" => "text/html; charset=utf-8",
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "svg" => "image/svg+xml",
        "pdf" => "application/pdf",
        _ => "application/octet-stream",
    }
}

pub async fn read_result(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path((id, path)): Path<(String, String)>,
) -> Res<impl IntoResponse> {
    let bytes = s.orchestrator.read_result(&caller, &id, &path)?;
    Ok(([(CONTENT_TYPE, content_type_for(&path))], bytes))
}

pub async fn upload_result(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path(id): Path<String>,
    req: Result<Json<UploadRequest>, JsonRejection>,
) -> Res<impl IntoResponse> {
    let req = body(req)?;
    let perm_id = s.orchestrator.upload_result(&caller, &id, &req.path, req.metadata).await?;
    Ok(Json(PermIdResponse { perm_id }))
}

pub async fn archive_project(State(s): S, Extension(caller): Extension<Caller>, Path(id): Path<String>) -> Res<impl IntoResponse> {
    let perm_id = s.orchestrator.archive_project(&caller, &id).await?;
    Ok(Json(PermIdResponse { perm_id }))
}

pub async fn create_share(State(s): S, Extension(caller): Extension<Caller>, Path(id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.create_share(&caller, &id).await?))
}

pub async fn get_share(State(s): S, Path(share_id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.get_share(&share_id)?))
}

pub async fn open_share(State(s): S, Extension(caller): Extension<Caller>, Path(share_id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.open_share(&caller, &share_id).await?))
}

pub async fn journal(State(s): S, Extension(caller): Extension<Caller>, Path(id): Path<String>) -> Res<impl IntoResponse> {
    Ok(Json(s.orchestrator.journal(&caller, &id)?))
}

pub async fn exec(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path(id): Path<String>,
    req: Result<Json<ExecRequest>, JsonRejection>,
) -> Res<impl IntoResponse> {
    let req = body(req)?;
    if req.argv.is_empty() {
        return Err(ApiError::bad_request("argv must not be empty"));
    }
    Ok(Json(s.orchestrator.run_command(&caller, &id, &req.argv).await?))
}

pub async fn push_image(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path(id): Path<String>,
    req: Result<Json<PushRequest>, JsonRejection>,
) -> Res<impl IntoResponse> {
    let req = body(req)?;
    let creds = req.username.map(|username| RegistryCredentials { username, password: req.password.unwrap_or_default() });
    Ok(Json(s.orchestrator.push_image(&caller, &id, &req.registry_url, creds.as_ref()).await?))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EventsQuery {
    last_seen_sequence: Option<u64>,
}

/// Replays the journal after `lastSeenSequence` (or the `Last-Event-ID`
/// header), then streams live events.
pub async fn events(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Res<impl IntoResponse> {
    let from_header = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse::<u64>().ok());
    let last_seen = q.last_seen_sequence.or(from_header).unwrap_or(0);
    let items = s.orchestrator.project_events(&caller, &id, last_seen + 1)?;
    let stream = items
        .map(move |item| Ok::<_, Infallible>(Event::from(frame_for(&id, &item))))
        .take_until(s.shutdown.clone().cancelled_owned())
        .boxed();
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(s.heartbeat).text("heartbeat")))
}

#[derive(Debug, Deserialize)]
pub struct BundleQuery {
    kind: Option<String>,
}

fn file_stem(name: &str) -> String {
    let cleaned: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    if cleaned.is_empty() { "project".into() } else { cleaned }
}

/// Exports a player bundle (or, with `?kind=script`, a player script) and
/// streams the archive. Export warnings travel in `x-rrp-warning` headers.
pub async fn bundle(
    State(s): S,
    Extension(caller): Extension<Caller>,
    Path(id): Path<String>,
    Query(q): Query<BundleQuery>,
) -> Res<Response> {
    let kind = match q.kind.as_deref() {
        None | Some("bundle") => BundleKind::Bundle,
        Some("script") => BundleKind::Script,
        Some(other) => return Err(ApiError::bad_request(format!("unknown kind {other:?}; use bundle or script"))),
    };
    let scratch = s.orchestrator.scratch_dir()?;
    let out = scratch.join("export.tar.gz");
    let exported = match kind {
        BundleKind::Bundle => export_player_bundle(&s.orchestrator, &caller, &id, &out).await,
        BundleKind::Script => export_player_script(&s.orchestrator, &caller, &id, &out).await,
    };
    let opened = match exported {
        Ok(report) => tokio::fs::File::open(&out).await.map(|f| (report, f)).map_err(ApiError::from),
        Err(e) => Err(e.into()),
    };
    // The open file keeps the data reachable after the directory is gone.
    let _ = std::fs::remove_dir_all(&scratch);
    let (report, file) = opened?;

    let suffix = match kind {
        BundleKind::Bundle => "bundle",
        BundleKind::Script => "player",
    };
    let commit: String = report.manifest.commit_id.chars().take(12).collect();
    let filename = format!("{}-{commit}.{suffix}.tar.gz", file_stem(&report.manifest.project_name));
    let mut resp = Body::from_stream(ReaderStream::new(file)).into_response();
    let headers = resp.headers_mut();
    headers.insert(CONTENT_TYPE, HeaderValue::from_static("application/gzip"));
    headers.insert(CONTENT_LENGTH, HeaderValue::from(report.bytes));
    if let Ok(v) = HeaderValue::from_str(&format!("attachment; filename=\"{filename}\"")) {
        headers.insert(CONTENT_DISPOSITION, v);
    }
    for w in &report.warnings {
        if let Ok(v) = HeaderValue::from_str(w) {
            headers.append(WARNING_HEADER, v);
        }
    }
    Ok(resp)
}
