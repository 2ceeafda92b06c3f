//! `/session/<projectId>/...`: forwards to the project's live session.

use std::sync::Arc;

use axum::body::to_bytes;
use axum::extract::{Request, State};
use axum::http::header::LOCATION;
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Extension;
use rrp_core::orchestrator::Caller;
use rrp_core::runtime::ProxyRequest;

use crate::auth::{strip_query_token, TOKEN_COOKIE};
use crate::error::ApiError;
use crate::server::AppState;

const MAX_BODY: usize = 64 << 20;

/// Connection-level headers that must not be forwarded in either direction.
const HOP_BY_HOP: [&str; 8] =
    ["connection", "keep-alive", "proxy-authenticate", "proxy-authorization", "te", "trailer", "transfer-encoding", "upgrade"];

fn forwardable(name: &str) -> bool {
    !HOP_BY_HOP.contains(&name) && name != "host" && name != "content-length"
}

/// Request cookies minus the platform's own token.
fn foreign_cookies(value: &str) -> Option<String> {
    let kept: Vec<&str> =
        value.split(';').map(str::trim).filter(|c| !c.is_empty() && c.split('=').next() != Some(TOKEN_COOKIE)).collect();
    (!kept.is_empty()).then(|| kept.join("; "))
}

pub async fn proxy(State(s): State<Arc<AppState>>, Extension(caller): Extension<Caller>, req: Request) -> Result<Response, ApiError> {
    let path = req.uri().path().to_owned();
    let (project_id, session) = s.orchestrator.route(&path)?;
    // Visibility check: someone else's project looks like no project.
    s.orchestrator.get_project(&caller, &project_id)?;

    let prefix = format!("/session/{project_id}");
    if path == prefix {
        let mut resp = StatusCode::PERMANENT_REDIRECT.into_response();
        resp.headers_mut().insert(LOCATION, HeaderValue::from_str(&format!("{prefix}/")).expect("ids are ASCII"));
        return Ok(resp);
    }

    let query = req.uri().query().map(strip_query_token).filter(|q| !q.is_empty());
    let path_and_query = match query {
        Some(q) => format!("{path}?{q}"),
        None => path,
    };
    let method = req.method().to_string();
    let mut headers = Vec::new();
    for (name, value) in req.headers() {
        let name = name.as_str();
        let Ok(value) = value.to_str() else { continue };
        match name {
            "authorization" => {}
            "cookie" => headers.extend(foreign_cookies(value).map(|v| (name.to_owned(), v))),
            _ if forwardable(name) => headers.push((name.to_owned(), value.to_owned())),
            _ => {}
        }
    }
    let body = to_bytes(req.into_body(), MAX_BODY).await.map_err(|e| ApiError::bad_request(e.to_string()))?;

    let upstream = s
        .orchestrator
        .runtime()
        .forward_http(&session.session_id, ProxyRequest { method, path_and_query, headers, body: body.to_vec() })
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "SessionUnreachable", e.to_string()))?;

    let status = StatusCode::from_u16(upstream.status).unwrap_or(StatusCode::BAD_GATEWAY);
    let mut resp = (status, upstream.body).into_response();
    for (name, value) in upstream.headers {
        let lower = name.to_ascii_lowercase();
        if !forwardable(&lower) {
            continue;
        }
        if let (Ok(n), Ok(v)) = (HeaderName::from_bytes(lower.as_bytes()), HeaderValue::from_str(&value)) {
            resp.headers_mut().append(n, v);
        }
    }
    Ok(resp)
}
