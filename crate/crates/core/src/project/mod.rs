//! Loading and parsing of project repositories.
//!
//! A project repository is defined by two folders: the environment
//! definition (searched in `.binder/`, then `binder/`, then the root) and the
//! dataset manifest at `.rrp/datasets.yaml`.

mod environment;
pub mod git;
mod layout;
mod manifest;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256_hex, Sha256Digest};

pub use environment::{parse_apt_list, parse_environment, EnvironmentSpec, SourceFile, RECOGNIZED_FILES, SEARCH_LOCATIONS};
pub use git::{is_clean, load_project_source};
pub use layout::{validate_layout, Finding, FindingCode, Severity, ValidationReport};
pub use manifest::{
    parse_datasets_manifest, serialize_datasets_manifest, validate_folder, DatasetBinding, ManifestDocument,
    LEGACY_MANIFEST_PATH, MANIFEST_PATH,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProjectError {
    #[error("clone failed: {0}")]
    CloneFailed(String),
    #[error("ref not found: {0}")]
    RefNotFound(String),
    #[error("destination is not empty: {0}")]
    DestinationNotEmpty(PathBuf),
    #[error("not a git repository: {0}")]
    NotARepository(PathBuf),
    #[error("git command failed: {0}")]
    Git(String),
    #[error("manifest syntax error: {0}")]
    ManifestSyntax(String),
    #[error("duplicate mount target folder {0:?}")]
    DuplicateMountTarget(String),
    #[error("invalid folder name {0:?}")]
    InvalidFolderName(String),
    #[error("no environment definition found")]
    NoEnvironmentFound,
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: String, reason: String },
}

impl ProjectError {
    /// Stable variant name for logs and failure messages.
    pub fn code(&self) -> &'static str {
        match self {
            ProjectError::CloneFailed(_) => "CloneFailed",
            ProjectError::RefNotFound(_) => "RefNotFound",
            ProjectError::DestinationNotEmpty(_) => "DestinationNotEmpty",
            ProjectError::NotARepository(_) => "NotARepository",
            ProjectError::Git(_) => "Git",
            ProjectError::ManifestSyntax(_) => "ManifestSyntax",
            ProjectError::DuplicateMountTarget(_) => "DuplicateMountTarget",
            ProjectError::InvalidFolderName(_) => "InvalidFolderName",
            ProjectError::NoEnvironmentFound => "NoEnvironmentFound",
            ProjectError::UnreadableFile { .. } => "UnreadableFile",
        }
    }
}

pub type Result<T, E = ProjectError> = std::result::Result<T, E>;

/// Where a project comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectSource {
    pub repo_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r#ref: Option<String>,
    /// Opaque secret for private repositories. Never serialized.
    #[serde(default, skip_serializing)]
    pub credentials: Option<String>,
}

impl ProjectSource {
    pub fn new(repo_url: impl Into<String>) -> Self {
        Self { repo_url: repo_url.into(), r#ref: None, credentials: None }
    }

    pub fn with_ref(mut self, r: impl Into<String>) -> Self {
        self.r#ref = Some(r.into());
        self
    }
}

/// A checked-out revision on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkingTree {
    pub root_path: PathBuf,
    pub commit_id: String,
    pub dirty: bool,
}

impl WorkingTree {
    /// Re-reads the commit and cleanliness of an existing checkout.
    pub fn open(root: &Path) -> Result<Self> {
        let commit_id = git::head_commit(root)?;
        let mut tree = Self { root_path: root.to_path_buf(), commit_id, dirty: false };
        tree.dirty = !is_clean(&tree)?;
        Ok(tree)
    }
}

/// Everything needed to plan and run a project at one commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectSpec {
    pub source: ProjectSource,
    pub tree: WorkingTree,
    pub environment: EnvironmentSpec,
    pub datasets: Vec<DatasetBinding>,
    pub spec_digest: Sha256Digest,
}

impl ProjectSpec {
    /// Parses the environment and the dataset manifest of a checked-out tree.
    /// A missing manifest yields no datasets.
    pub fn load(source: ProjectSource, tree: WorkingTree) -> Result<Self> {
        let environment = parse_environment(&tree)?;
        let datasets = match read_manifest(&tree.root_path)? {
            Some((_, bytes)) => parse_datasets_manifest(&bytes)?,
            None => Vec::new(),
        };
        let spec_digest = spec_digest(&environment, &tree.commit_id);
        Ok(Self { source, tree, environment, datasets, spec_digest })
    }
}

/// Reads `.rrp/datasets.yaml`, falling back to the legacy `.rrp/dataset.yaml`.
pub fn read_manifest(root: &Path) -> Result<Option<(&'static str, Vec<u8>)>> {
    for rel in [MANIFEST_PATH, LEGACY_MANIFEST_PATH] {
        let path = root.join(rel);
        if path.is_file() {
            let bytes = std::fs::read(&path).map_err(|e| ProjectError::UnreadableFile {
                path: rel.to_owned(),
                reason: e.to_string(),
            })?;
            return Ok(Some((rel, bytes)));
        }
    }
    Ok(None)
}

/// Content digest over the commit identity and every consumed environment
/// file: `commitId\n` followed by `path\nhash\n` per source file in path order.
pub fn spec_digest(environment: &EnvironmentSpec, commit_id: &str) -> Sha256Digest {
    let mut canonical = String::with_capacity(64 + environment.source_files.len() * 96);
    canonical.push_str(commit_id);
    canonical.push('\n');
    let mut files: Vec<&SourceFile> = environment.source_files.iter().collect();
    files.sort_by(|a, b| a.path.cmp(&b.path));
    for f in files {
        canonical.push_str(&f.path);
        canonical.push('\n');
        canonical.push_str(&f.content_hash);
        canonical.push('\n');
    }
    Sha256Digest::parse(&sha256_hex(canonical.as_bytes())).expect("sha256 hex")
}
