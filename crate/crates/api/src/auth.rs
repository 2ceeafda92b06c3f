use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{Request, State};
use axum::http::header::{AUTHORIZATION, COOKIE, LOCATION, SET_COOKIE};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use chrono::Utc;
use rrp_core::orchestrator::Caller;
use rrp_core::rdms::SessionToken;

use crate::error::ApiError;
use crate::server::AppState;
use crate::types::ApiToken;

pub const TOKEN_COOKIE: &str = "rrp_token";
/// Query parameter accepted where headers cannot be set (EventSource, links).
pub const TOKEN_QUERY: &str = "rrp_token";

/// Live API tokens. Each maps to the RDMS session it was minted from.
pub struct TokenStore {
    ttl: Duration,
    tokens: RwLock<HashMap<String, (ApiToken, Caller)>>,
}

impl TokenStore {
    pub fn new(ttl: Duration) -> Self {
        Self { ttl, tokens: RwLock::default() }
    }

    /// Mints a token for a successful RDMS login. It expires with the RDMS
    /// session or after the configured lifetime, whichever comes first.
    pub fn mint(&self, rdms: SessionToken) -> ApiToken {
        let issued_at = Utc::now();
        let ttl = chrono::Duration::from_std(self.ttl).unwrap_or(chrono::Duration::hours(8));
        let expires_at = (issued_at + ttl).min(rdms.expires_at);
        let token = format!("rrp_{}{}", uuid::Uuid::new_v4().simple(), uuid::Uuid::new_v4().simple());
        let api = ApiToken { token: token.clone(), user_id: rdms.user_id.clone(), issued_at, expires_at };
        let mut tokens = self.tokens.write().unwrap();
        tokens.retain(|_, (t, _)| t.expires_at > issued_at);
        tokens.insert(token, (api.clone(), Caller::new(rdms)));
        api
    }

    pub fn resolve(&self, token: &str) -> Option<Caller> {
        let tokens = self.tokens.read().unwrap();
        let (api, caller) = tokens.get(token)?;
        (api.expires_at > Utc::now()).then(|| caller.clone())
    }

    pub fn revoke(&self, token: &str) {
        self.tokens.write().unwrap().remove(token);
    }

    /// Moves every token's expiry into the past.
    pub fn expire_all(&self) {
        let past = Utc::now() - chrono::Duration::seconds(1);
        for (api, _) in self.tokens.write().unwrap().values_mut() {
            api.expires_at = past;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Header,
    Cookie,
    Query,
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim().to_owned())
}

fn cookie(headers: &HeaderMap) -> Option<String> {
    headers
        .get_all(COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|pair| pair.trim().split_once('='))
        .find(|(k, _)| *k == TOKEN_COOKIE)
        .map(|(_, v)| v.to_owned())
}

pub(crate) fn query_token(query: Option<&str>) -> Option<String> {
    query?.split('&').filter_map(|p| p.split_once('=')).find(|(k, _)| *k == TOKEN_QUERY).map(|(_, v)| v.to_owned())
}

/// `query` without the token parameter.
pub(crate) fn strip_query_token(query: &str) -> String {
    query.split('&').filter(|p| !p.is_empty() && p.split('=').next() != Some(TOKEN_QUERY)).collect::<Vec<_>>().join("&")
}

fn find_token(req: &Request) -> Option<(String, Source)> {
    bearer(req.headers())
        .map(|t| (t, Source::Header))
        .or_else(|| cookie(req.headers()).map(|t| (t, Source::Cookie)))
        .or_else(|| query_token(req.uri().query()).map(|t| (t, Source::Query)))
}

pub fn session_cookie(token: &ApiToken) -> HeaderValue {
    let max_age = (token.expires_at - Utc::now()).num_seconds().max(0);
    HeaderValue::from_str(&format!("{TOKEN_COOKIE}={}; Path=/; HttpOnly; SameSite=Lax; Max-Age={max_age}", token.token))
        .expect("token is a plain ASCII string")
}

/// Resolves the caller and stores it as a request extension; 401 otherwise.
///
/// A browser following a `/session/...?rrp_token=` link is redirected to the
/// same URL without the token, which moves into a cookie.
pub async fn require_auth(State(state): State<Arc<AppState>>, mut req: Request, next: Next) -> Response {
    let Some((token, source)) = find_token(&req) else {
        return ApiError::unauthorized().into_response();
    };
    let Some(caller) = state.tokens.resolve(&token) else {
        return ApiError::unauthorized().into_response();
    };
    if source == Source::Query && req.uri().path().starts_with("/session/") {
        let rest = strip_query_token(req.uri().query().unwrap_or(""));
        let location = if rest.is_empty() { req.uri().path().to_owned() } else { format!("{}?{rest}", req.uri().path()) };
        let refreshed = state.tokens.tokens.read().unwrap().get(&token).map(|(t, _)| session_cookie(t));
        let mut resp = StatusCode::SEE_OTHER.into_response();
        if let (Ok(loc), Some(cookie)) = (HeaderValue::from_str(&location), refreshed) {
            resp.headers_mut().insert(LOCATION, loc);
            resp.headers_mut().insert(SET_COOKIE, cookie);
        }
        return resp;
    }
    req.extensions_mut().insert(caller);
    next.run(req).await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rdms_token(user: &str, minutes: i64) -> SessionToken {
        SessionToken { token: "t".into(), user_id: user.into(), expires_at: Utc::now() + chrono::Duration::minutes(minutes) }
    }

    #[test]
    fn tokens_resolve_until_expiry() {
        let store = TokenStore::new(Duration::from_secs(3600));
        let t = store.mint(rdms_token("alice", 120));
        assert_eq!(store.resolve(&t.token).unwrap().user_id, "alice");
        assert!(store.resolve("rrp_forged").is_none());
        store.expire_all();
        assert!(store.resolve(&t.token).is_none());
    }

    #[test]
    fn expiry_never_outlives_the_rdms_session() {
        let store = TokenStore::new(Duration::from_secs(8 * 3600));
        let t = store.mint(rdms_token("bob", 5));
        assert!(t.expires_at <= Utc::now() + chrono::Duration::minutes(5));
        let other = store.mint(rdms_token("bob", 600));
        assert_ne!(t.token, other.token);
        assert!(other.expires_at <= other.issued_at + chrono::Duration::hours(8));
    }

    #[test]
    fn token_sources() {
        let mut h = HeaderMap::new();
        h.insert(COOKIE, HeaderValue::from_static("a=1; rrp_token=xyz; b=2"));
        assert_eq!(cookie(&h).as_deref(), Some("xyz"));
        h.insert(AUTHORIZATION, HeaderValue::from_static("Bearer abc"));
        assert_eq!(bearer(&h).as_deref(), Some("abc"));
        assert_eq!(query_token(Some("x=1&rrp_token=q")).as_deref(), Some("q"));
        assert_eq!(strip_query_token("x=1&rrp_token=q&y=2"), "x=1&y=2");
        assert_eq!(strip_query_token("rrp_token=q"), "");
    }
}
