//! Research data management system access.
//!
//! [`RdmsClient`] speaks the HTTP/JSON protocol of the reference server in
//! [`server`]. Datasets are immutable once registered and addressed by a
//! permanent identifier (permId). Mounting materializes a dataset into a
//! local read-only tree and verifies every file against its descriptor.

mod client;
pub mod server;
mod tree;

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::tree_digest;
use crate::project::DatasetBinding;

pub use client::RdmsClient;
pub use server::{serve_reference_rdms, RdmsServerConfig, RdmsServerHandle, DEMO_PASSWORD, DEMO_USER};
pub use tree::{make_tree_read_only, remove_tree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RdmsError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("RDMS unreachable: {0}")]
    ServerUnreachable(String),
    #[error("dataset {0} not found")]
    DatasetNotFound(String),
    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: String },
    #[error("mount target {0} is not writable")]
    TargetNotWritable(String),
    #[error("a dataset needs at least one file")]
    EmptyDataset,
    #[error("object {0} not found")]
    ObjectNotFound(String),
    #[error("invalid dataset path {0:?}")]
    InvalidPath(String),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("data directory {0} is not writable")]
    DataDirUnwritable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for RdmsError {
    fn from(e: std::io::Error) -> Self {
        RdmsError::Io(e.to_string())
    }
}

pub type Result<T, E = RdmsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionToken {
    pub token: String,
    pub user_id: String,
    pub expires_at: DateTime<Utc>,
}

impl SessionToken {
    pub fn is_expired(&self) -> bool {
        self.expires_at <= Utc::now()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetFile {
    pub path: String,
    pub byte_size: u64,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetDescriptor {
    pub perm_id: String,
    /// Sorted by path.
    pub files: Vec<DatasetFile>,
    pub total_bytes: u64,
    pub metadata: BTreeMap<String, String>,
}

impl DatasetDescriptor {
    /// Tree digest over the file list; identifies the dataset's content.
    pub fn content_hash(&self) -> String {
        tree_digest(self.files.iter().map(|f| (f.path.as_str(), f.content_hash.as_str())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MountReport {
    pub binding: DatasetBinding,
    pub local_path: PathBuf,
    pub files_materialized: usize,
    pub bytes: u64,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DoiRecord {
    pub doi: String,
    pub object_ref: String,
    pub resolved_url: String,
}

/// Checks a dataset-relative path: non-empty `/`-separated segments, none of
/// them `.` or `..`, no leading slash and no backslashes.
pub fn validate_dataset_path(path: &str) -> Result<()> {
    let ok = !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && !path.contains('\0')
        && path.split('/').all(|s| !s.is_empty() && s != "." && s != "..");
    if ok {
        Ok(())
    } else {
        Err(RdmsError::InvalidPath(path.to_owned()))
    }
}
