//! REST and server-sent-events front end of the research platform.
//!
//! Every endpoint under `/api/v1/` except login and health requires a bearer
//! token minted by `POST /api/v1/login` from RDMS credentials. The same token
//! is accepted from the `rrp_token` cookie or query parameter, which is how
//! browsers reach `/session/<projectId>/` and event streams.
//!
//! | Method | Path | Answer |
//! |---|---|---|
//! | POST | `/api/v1/login` | [`ApiToken`] |
//! | GET | `/api/v1/health` | [`types::Health`] |
//! | GET, POST | `/api/v1/projects` | project list; create (202) |
//! | GET, DELETE | `/api/v1/projects/{id}` | project record |
//! | POST | `/api/v1/projects/{id}/start`, `/stop` | session info; record |
//! | PUT | `/api/v1/projects/{id}/resources` | record |
//! | GET | `/api/v1/projects/{id}/results`, `/results/{path}` | listing; file |
//! | POST | `/api/v1/projects/{id}/upload`, `/archive` | `{permId}` |
//! | POST | `/api/v1/projects/{id}/share` | share record |
//! | GET | `/api/v1/shares/{shareId}` | share record |
//! | POST | `/api/v1/shares/{shareId}/open` | new project record |
//! | GET | `/api/v1/projects/{id}/events` | SSE, resumable |
//! | GET | `/api/v1/projects/{id}/journal` | all events |
//! | GET | `/api/v1/projects/{id}/bundle[?kind=script]` | archive download |
//! | POST | `/api/v1/projects/{id}/exec`, `/push` | command output; push receipt |
//! | any | `/session/{id}/...` | proxied to the running session |

pub mod auth;
pub mod client;
pub mod error;
pub mod handlers;
pub mod proxy;
pub mod server;
pub mod sse;
pub mod tls;
pub mod types;

pub use client::{ApiClient, ClientError};
pub use error::{ApiError, ErrorBody};
pub use server::{serve, ServeConfig, ServeError, ServiceHandle, DEFAULT_PORT};
pub use sse::SseFrame;
pub use tls::TlsFiles;
pub use types::ApiToken;
