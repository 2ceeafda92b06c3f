//! Project lifecycle orchestration.
//!
//! The [`Orchestrator`] owns every [`ProjectRecord`], its workspace under
//! `<dataRoot>/projects/<projectId>/` and its event journal. Mutations of one
//! project are serialized through a per-project writer lock; readers take
//! snapshots and never wait on a writer. Journals fan out to subscribers over
//! bounded channels.

mod archive;
mod journal;
mod lifecycle;
mod registry;
mod results;
mod share;
mod state;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use futures::stream::BoxStream;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{watch, OwnedMutexGuard, Semaphore};

use crate::config::PlatformConfig;
use crate::planner::{ImageRef, PlanError};
use crate::project::{ProjectError, ProjectSource, ProjectSpec};
use crate::rdms::{RdmsClient, RdmsError, SessionToken};
use crate::runtime::{PushReceipt, RegistryCredentials, ResourceLimits, RuntimeAdapter, RuntimeError, SessionHandle};

pub use journal::{EventKind, JournalItem, LogEvent, LIVE_BUFFER};
pub use results::ResultEntry;
pub use state::{transition_allowed, ProjectStatus};

use journal::Journal;
use registry::{Registry, RegistryEntry, ShareEntry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("unknown project {0}")]
    UnknownProject(String),
    #[error("a project named {0:?} already exists")]
    NameTaken(String),
    #[error("cannot {operation} project {project_id} while it is {status}")]
    InvalidState { project_id: String, status: ProjectStatus, operation: &'static str },
    #[error("invalid resource request: {0}")]
    InvalidResources(String),
    #[error("session failed to start: {0}")]
    StartFailed(String),
    #[error("no result at {0:?}")]
    ResultNotFound(String),
    #[error("repository has uncommitted changes; commit them first")]
    RepositoryDirty,
    #[error("working copy has uncommitted changes; commit them first")]
    DirtyWorkspace,
    #[error("environment changed since the image was built ({0}); rebuild first")]
    RebuildRequired(String),
    #[error("unknown share {0}")]
    ShareNotFound(String),
    #[error("project {0} has no active session")]
    NoActiveSession(String),
    #[error("project {0} has no image")]
    NoImage(String),
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("RDMS error: {0}")]
    Rdms(#[from] RdmsError),
    #[error("runtime error: {0}")]
    Runtime(#[from] RuntimeError),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for OrchestratorError {
    fn from(e: std::io::Error) -> Self {
        OrchestratorError::Io(e.to_string())
    }
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

/// The authenticated user on whose behalf an operation runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub user_id: String,
    pub rdms_token: SessionToken,
}

impl Caller {
    pub fn new(token: SessionToken) -> Self {
        Self { user_id: token.user_id.clone(), rdms_token: token }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectRecord {
    pub project_id: String,
    pub name: String,
    pub owner: String,
    pub source: Option<ProjectSource>,
    pub spec: Option<ProjectSpec>,
    pub status: ProjectStatus,
    pub image_ref: Option<ImageRef>,
    pub session: Option<SessionHandle>,
    pub resources: ResourceLimits,
    pub workspace: PathBuf,
    pub failure: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Share this project was opened from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opened_from: Option<String>,
}

impl ProjectRecord {
    /// What a deleted project keeps: its id, owner (for journal access) and status.
    fn tombstone(&self) -> Self {
        Self {
            project_id: self.project_id.clone(),
            name: String::new(),
            owner: self.owner.clone(),
            source: None,
            spec: None,
            status: ProjectStatus::Deleted,
            image_ref: None,
            session: None,
            resources: self.resources,
            workspace: PathBuf::new(),
            failure: None,
            created_at: self.created_at,
            opened_from: None,
        }
    }

    pub fn commit_id(&self) -> Option<&str> {
        self.spec.as_ref().map(|s| s.tree.commit_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ShareRecord {
    pub share_id: String,
    pub source_project_id: String,
    pub commit_id: String,
    pub spec_digest: crate::digest::Sha256Digest,
    pub image_ref: ImageRef,
    pub created_at: DateTime<Utc>,
}

/// A started session as seen from outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionInfo {
    pub project_id: String,
    pub session_id: String,
    pub public_path: String,
    pub internal_endpoint: String,
    pub resources: ResourceLimits,
}

pub fn public_path(project_id: &str) -> String {
    format!("/session/{project_id}/")
}

struct Slot {
    id: String,
    writer: Arc<tokio::sync::Mutex<()>>,
    record: RwLock<ProjectRecord>,
    journal: Mutex<Journal>,
    status: watch::Sender<ProjectStatus>,
    /// Tree digest of the results when the current session started.
    results_at_start: Mutex<Option<String>>,
}

impl Slot {
    fn new(id: &str, record: ProjectRecord, journal_path: &Path) -> Result<Arc<Self>> {
        let journal = Journal::open(journal_path)?;
        let (status, _) = watch::channel(record.status);
        Ok(Arc::new(Slot {
            id: id.to_owned(),
            writer: Arc::default(),
            record: RwLock::new(record),
            journal: Mutex::new(journal),
            status,
            results_at_start: Mutex::default(),
        }))
    }

    fn snapshot(&self) -> ProjectRecord {
        self.record.read().unwrap().clone()
    }
}

pub(crate) struct Inner {
    config: PlatformConfig,
    runtime: Arc<dyn RuntimeAdapter>,
    projects: RwLock<BTreeMap<String, Arc<Slot>>>,
    shares: RwLock<BTreeMap<String, ShareEntry>>,
    pushes: RwLock<BTreeMap<String, PushReceipt>>,
    registry: Mutex<Registry>,
    builds: Semaphore,
    /// One client (and connection pool) per RDMS base URL.
    rdms_clients: Mutex<BTreeMap<String, RdmsClient>>,
}

/// Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Orchestrator {
    inner: Arc<Inner>,
}

/// Exclusive hold on a quiescent project for exporting it.
pub struct ExportGuard {
    pub record: ProjectRecord,
    pub spec: ProjectSpec,
    pub image_ref: ImageRef,
    _writer: OwnedMutexGuard<()>,
}

impl ExportGuard {
    pub fn project_dir(&self) -> PathBuf {
        self.record.workspace.join("project")
    }

    pub fn openbis_dir(&self) -> PathBuf {
        self.record.workspace.join("openbis")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.record.workspace.join("results")
    }
}

impl Orchestrator {
    /// Opens (or creates) the platform state under `config.data_root`.
    /// Projects interrupted mid-pipeline become Failed; running ones Stopped.
    pub async fn open(config: PlatformConfig, runtime: Arc<dyn RuntimeAdapter>) -> Result<Self> {
        std::fs::create_dir_all(config.data_root.join("projects"))?;
        std::fs::create_dir_all(config.data_root.join("shares"))?;
        let (registry, entries) = Registry::open(&config.data_root.join("registry.log"))?;

        let mut records: BTreeMap<String, ProjectRecord> = BTreeMap::new();
        let mut shares = BTreeMap::new();
        let mut pushes = BTreeMap::new();
        for entry in entries {
            match entry {
                RegistryEntry::Project { record } => {
                    records.insert(record.project_id.clone(), *record);
                }
                RegistryEntry::Share { entry } => {
                    shares.insert(entry.record.share_id.clone(), entry);
                }
                RegistryEntry::Push { image_ref, receipt } => {
                    pushes.insert(image_ref, receipt);
                }
            }
        }

        let builds = Semaphore::new(config.build_concurrency.max(1));
        let inner = Arc::new(Inner {
            config,
            runtime,
            projects: RwLock::default(),
            shares: RwLock::new(shares),
            pushes: RwLock::new(pushes),
            registry: Mutex::new(registry),
            builds,
            rdms_clients: Mutex::default(),
        });
        let orch = Orchestrator { inner };
        for (id, record) in records {
            let slot = orch.inner.install_slot(&id, record)?;
            orch.inner.recover(&slot).await?;
        }
        Ok(orch)
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.inner.config
    }

    pub fn runtime(&self) -> Arc<dyn RuntimeAdapter> {
        self.inner.runtime.clone()
    }

    fn slot(&self, caller: &Caller, id: &str) -> Result<Arc<Slot>> {
        let slot = self
            .inner
            .projects
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| OrchestratorError::UnknownProject(id.to_owned()))?;
        if slot.record.read().unwrap().owner != caller.user_id {
            return Err(OrchestratorError::UnknownProject(id.to_owned()));
        }
        Ok(slot)
    }

    pub fn get_project(&self, caller: &Caller, id: &str) -> Result<ProjectRecord> {
        Ok(self.slot(caller, id)?.snapshot())
    }

    /// The caller's projects, excluding deleted ones, oldest first.
    pub fn list_projects(&self, caller: &Caller) -> Vec<ProjectRecord> {
        let slots: Vec<Arc<Slot>> = self.inner.projects.read().unwrap().values().cloned().collect();
        let mut out: Vec<ProjectRecord> = slots
            .iter()
            .map(|s| s.snapshot())
            .filter(|r| r.owner == caller.user_id && r.status != ProjectStatus::Deleted)
            .collect();
        out.sort_by(|a, b| (a.created_at, &a.project_id).cmp(&(b.created_at, &b.project_id)));
        out
    }

    /// Waits until the project has left the create pipeline.
    pub async fn wait_settled(&self, caller: &Caller, id: &str) -> Result<ProjectRecord> {
        let slot = self.slot(caller, id)?;
        let mut rx = slot.status.subscribe();
        let _ = rx.wait_for(|s| !s.is_in_flight()).await;
        Ok(slot.snapshot())
    }

    /// Journal replay from `from_sequence` (inclusive) followed by live events.
    pub fn project_events(&self, caller: &Caller, id: &str, from_sequence: u64) -> Result<BoxStream<'static, JournalItem>> {
        let slot = self.slot(caller, id)?;
        let journal = slot.journal.lock().unwrap();
        Ok(journal.subscribe(from_sequence))
    }

    pub fn journal(&self, caller: &Caller, id: &str) -> Result<Vec<LogEvent>> {
        let slot = self.slot(caller, id)?;
        let journal = slot.journal.lock().unwrap();
        Ok(journal.events().to_vec())
    }

    /// Resolves `/session/<projectId>/...` to the project's live session.
    pub fn route(&self, public_path: &str) -> Result<(String, SessionHandle)> {
        let unknown = || OrchestratorError::UnknownProject(public_path.to_owned());
        let rest = public_path.strip_prefix("/session/").ok_or_else(unknown)?;
        let id = rest.split('/').next().filter(|s| !s.is_empty()).ok_or_else(unknown)?;
        let slot = self.inner.projects.read().unwrap().get(id).cloned().ok_or_else(unknown)?;
        let record = slot.snapshot();
        match (record.status, record.session) {
            (ProjectStatus::Running, Some(session)) => Ok((record.project_id, session)),
            _ => Err(OrchestratorError::NoActiveSession(id.to_owned())),
        }
    }

    /// Owner of a project, for routing decisions made before authorization.
    pub fn owner_of(&self, id: &str) -> Option<String> {
        self.inner.projects.read().unwrap().get(id).map(|s| s.record.read().unwrap().owner.clone())
    }

    /// Whether the project's working copy has no uncommitted changes.
    pub fn repository_clean(&self, caller: &Caller, id: &str) -> Result<bool> {
        let record = self.get_project(caller, id)?;
        if record.status == ProjectStatus::Deleted || record.spec.is_none() {
            return Ok(false);
        }
        let tree = crate::project::WorkingTree::open(&record.workspace.join("project"))?;
        Ok(!tree.dirty)
    }

    pub fn get_share(&self, share_id: &str) -> Result<ShareRecord> {
        self.inner
            .shares
            .read()
            .unwrap()
            .get(share_id)
            .map(|e| e.record.clone())
            .ok_or_else(|| OrchestratorError::ShareNotFound(share_id.to_owned()))
    }

    /// Pushes the project's image and records the receipt.
    pub async fn push_image(
        &self,
        caller: &Caller,
        id: &str,
        registry_url: &str,
        credentials: Option<&RegistryCredentials>,
    ) -> Result<PushReceipt> {
        let record = self.get_project(caller, id)?;
        let image = record.image_ref.ok_or_else(|| OrchestratorError::NoImage(id.to_owned()))?;
        let receipt = self.inner.runtime.push_image(&image, registry_url, credentials).await?;
        let entry = RegistryEntry::Push { image_ref: image.to_string(), receipt: receipt.clone() };
        self.inner.registry.lock().unwrap().append(&entry)?;
        self.inner.pushes.write().unwrap().insert(image.to_string(), receipt.clone());
        Ok(receipt)
    }

    /// Shared client for an RDMS base URL.
    pub fn rdms_client(&self, base_url: &str) -> Result<RdmsClient> {
        self.inner.rdms(base_url)
    }

    /// Fresh scratch directory under the data root.
    pub fn scratch_dir(&self) -> Result<PathBuf> {
        archive::tempfile_in(&self.inner.config.data_root)
    }

    /// Registry push recorded for an image, if any.
    pub fn published_image(&self, image: &ImageRef) -> Option<PushReceipt> {
        self.inner.pushes.read().unwrap().get(&image.to_string()).cloned()
    }

    /// Locks a Ready or Stopped project with a clean working copy for export.
    pub async fn begin_export(&self, caller: &Caller, id: &str) -> Result<ExportGuard> {
        let slot = self.slot(caller, id)?;
        let writer = slot.writer.clone().lock_owned().await;
        let record = slot.snapshot();
        if !matches!(record.status, ProjectStatus::Ready | ProjectStatus::Stopped) {
            return Err(OrchestratorError::InvalidState { project_id: id.to_owned(), status: record.status, operation: "export" });
        }
        let spec = self.inner.current_spec(&slot, OrchestratorError::RepositoryDirty)?;
        let record = slot.snapshot();
        let image_ref = record.image_ref.clone().ok_or_else(|| OrchestratorError::NoImage(id.to_owned()))?;
        Ok(ExportGuard { record, spec, image_ref, _writer: writer })
    }
}

impl Inner {
    fn workspace(&self, id: &str) -> PathBuf {
        self.config.data_root.join("projects").join(id)
    }

    fn install_slot(&self, id: &str, record: ProjectRecord) -> Result<Arc<Slot>> {
        let slot = Slot::new(id, record, &self.workspace(id).join("journal.log"))?;
        self.projects.write().unwrap().insert(id.to_owned(), slot.clone());
        Ok(slot)
    }

    pub(crate) fn rdms(&self, base_url: &str) -> Result<RdmsClient> {
        let mut clients = self.rdms_clients.lock().unwrap();
        if let Some(c) = clients.get(base_url) {
            return Ok(c.clone());
        }
        let client = RdmsClient::new(base_url)?;
        clients.insert(base_url.to_owned(), client.clone());
        Ok(client)
    }

    fn persist_record(&self, record: &ProjectRecord) -> Result<()> {
        self.registry.lock().unwrap().append(&RegistryEntry::Project { record: Box::new(record.clone()) })?;
        Ok(())
    }

    fn journal(&self, slot: &Slot, kind: EventKind, payload: impl Into<String>) -> Result<LogEvent> {
        Ok(slot.journal.lock().unwrap().append(kind, payload)?)
    }

    /// Applies `update` and moves to `to`. Callers hold the project writer
    /// or own the pipeline.
    fn transition(&self, slot: &Slot, to: ProjectStatus, update: impl FnOnce(&mut ProjectRecord)) -> Result<ProjectRecord> {
        let snapshot = {
            let mut rec = slot.record.write().unwrap();
            let from = rec.status;
            assert!(transition_allowed(from, to), "undeclared transition {from} -> {to} for {}", slot.id);
            update(&mut rec);
            rec.status = to;
            if to == ProjectStatus::Deleted {
                *rec = rec.tombstone();
            }
            rec.clone()
        };
        self.journal(slot, EventKind::Status, to.as_str())?;
        self.persist_record(&snapshot)?;
        slot.status.send_replace(to);
        Ok(snapshot)
    }

    fn fail(&self, slot: &Slot, message: String) -> Result<ProjectRecord> {
        tracing::warn!(project = %slot.id, "{message}");
        self.journal(slot, EventKind::Error, message.clone())?;
        self.transition(slot, ProjectStatus::Failed, |r| r.failure = Some(message))
    }

    async fn recover(&self, slot: &Slot) -> Result<()> {
        let record = slot.snapshot();
        if record.status.is_in_flight() {
            self.fail(slot, "interrupted by a platform restart".into())?;
        } else if record.status == ProjectStatus::Running {
            if let Some(session) = &record.session {
                let _ = self.runtime.destroy_session(&session.session_id).await;
            }
            self.transition(slot, ProjectStatus::Stopped, |r| r.session = None)?;
        }
        Ok(())
    }

    fn invalid(slot: &Slot, status: ProjectStatus, operation: &'static str) -> OrchestratorError {
        OrchestratorError::InvalidState { project_id: slot.id.clone(), status, operation }
    }
}
