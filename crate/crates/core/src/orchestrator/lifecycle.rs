//! Create pipeline, start, stop, delete and in-session commands.

use std::collections::BTreeSet;
use std::fmt::Debug;
use std::path::Path;
use std::sync::Arc;

use chrono::Utc;

use super::results::results_fingerprint;
use super::{
    public_path, Caller, EventKind, Inner, Orchestrator, OrchestratorError, ProjectRecord, ProjectStatus, Result,
    SessionInfo, Slot,
};
use crate::planner::{image_reference, plan_build, render_recipe, ImageRef};
use crate::project::{
    load_project_source, parse_datasets_manifest, read_manifest, validate_layout, DatasetBinding, ProjectSource,
    ProjectSpec, Severity, WorkingTree,
};
use crate::rdms::{remove_tree, SessionToken};
use crate::runtime::{ExecOutput, MountSpec, ResourceLimits, SessionRequest};

/// Leading identifier of a `Debug` rendering, i.e. the enum variant name.
pub(crate) fn variant_name(e: &impl Debug) -> String {
    let dbg = format!("{e:?}");
    dbg.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect()
}

pub(crate) fn failure_message(e: &(impl Debug + std::fmt::Display)) -> String {
    format!("{}: {e}", variant_name(e))
}

impl Orchestrator {
    /// Registers a project in `New` and advances it in the background.
    pub async fn create_project(&self, caller: &Caller, source: ProjectSource, name: &str) -> Result<ProjectRecord> {
        let name = name.trim();
        let record = self.inner.new_record(caller, name, Some(source.clone()), None)?;
        let slot = self.inner.slot_of(&record.project_id);
        let inner = self.inner.clone();
        let token = caller.rdms_token.clone();
        tokio::spawn(async move { inner.run_pipeline(slot, source, token).await });
        Ok(record)
    }

    pub async fn start_project(&self, caller: &Caller, id: &str, resources: Option<ResourceLimits>) -> Result<SessionInfo> {
        let slot = self.slot(caller, id)?;
        let _writer = slot.writer.lock().await;
        let record = slot.snapshot();
        if !matches!(record.status, ProjectStatus::Ready | ProjectStatus::Stopped) {
            return Err(Inner::invalid(&slot, record.status, "start"));
        }
        let limits = resources.unwrap_or(record.resources);
        limits.validate().map_err(|e| OrchestratorError::InvalidResources(e.to_string()))?;
        let image = record.image_ref.clone().ok_or_else(|| OrchestratorError::NoImage(id.to_owned()))?;

        // Manifest edits take effect here: mount whatever is not materialized yet.
        let project_dir = record.workspace.join("project");
        let bindings = match read_manifest(&project_dir)? {
            Some((_, bytes)) => parse_datasets_manifest(&bytes)?,
            None => Vec::new(),
        };
        for binding in &bindings {
            if !record.workspace.join("openbis").join(&binding.folder).is_dir() {
                self.inner.mount(&slot, &caller.rdms_token, binding, &record.workspace).await?;
            }
        }
        let results_dir = record.workspace.join("results");
        std::fs::create_dir_all(&results_dir)?;

        let mut mounts = vec![MountSpec::new(&project_dir, "/project", false)];
        for b in &bindings {
            mounts.push(MountSpec::new(record.workspace.join("openbis").join(&b.folder), format!("/openbis/{}", b.folder), true));
        }
        mounts.push(MountSpec::new(&results_dir, "/results", false));
        let request = SessionRequest {
            mounts,
            command: None,
            env: vec![("RRP_BASE_URL".into(), public_path(id))],
        };

        let session = match self.inner.runtime.create_session(&image, limits, request).await {
            Ok(s) => s,
            Err(e) => {
                self.inner.journal(&slot, EventKind::Error, failure_message(&e))?;
                return Err(OrchestratorError::StartFailed(e.to_string()));
            }
        };
        *slot.results_at_start.lock().unwrap() = Some(results_fingerprint(&results_dir));
        let info = SessionInfo {
            project_id: id.to_owned(),
            session_id: session.session_id.clone(),
            public_path: public_path(id),
            internal_endpoint: session.internal_endpoint.clone(),
            resources: limits,
        };
        self.inner.transition(&slot, ProjectStatus::Running, |r| {
            r.session = Some(session);
            r.resources = limits;
        })?;
        Ok(info)
    }

    pub async fn stop_project(&self, caller: &Caller, id: &str) -> Result<ProjectRecord> {
        let slot = self.slot(caller, id)?;
        let _writer = slot.writer.lock().await;
        let status = slot.snapshot().status;
        if status != ProjectStatus::Running {
            return Err(Inner::invalid(&slot, status, "stop"));
        }
        self.inner.stop_locked(&slot).await
    }

    /// Deletes the workspace but keeps the journal. A running session is stopped first.
    pub async fn delete_project(&self, caller: &Caller, id: &str) -> Result<ProjectRecord> {
        let slot = self.slot(caller, id)?;
        let _writer = slot.writer.lock().await;
        let record = slot.snapshot();
        match record.status {
            ProjectStatus::Running => {
                self.inner.stop_locked(&slot).await?;
            }
            ProjectStatus::Ready | ProjectStatus::Stopped | ProjectStatus::Failed => {}
            other => return Err(Inner::invalid(&slot, other, "delete")),
        }
        for sub in ["project", "openbis", "results"] {
            remove_tree(&record.workspace.join(sub))?;
        }
        self.inner.transition(&slot, ProjectStatus::Deleted, |_| {})
    }

    /// Changes the limits used by the next start.
    pub async fn set_resources(&self, caller: &Caller, id: &str, limits: ResourceLimits) -> Result<ProjectRecord> {
        limits.validate().map_err(|e| OrchestratorError::InvalidResources(e.to_string()))?;
        let slot = self.slot(caller, id)?;
        let _writer = slot.writer.lock().await;
        let status = slot.snapshot().status;
        if matches!(status, ProjectStatus::Running | ProjectStatus::Deleted) {
            return Err(Inner::invalid(&slot, status, "resize"));
        }
        let record = {
            let mut r = slot.record.write().unwrap();
            r.resources = limits;
            r.clone()
        };
        self.inner.persist_record(&record)?;
        Ok(record)
    }

    /// Runs `argv` inside the running session and journals it as RunLog events.
    pub async fn run_command(&self, caller: &Caller, id: &str, argv: &[String]) -> Result<ExecOutput> {
        let slot = self.slot(caller, id)?;
        let record = slot.snapshot();
        let session = match (record.status, &record.session) {
            (ProjectStatus::Running, Some(s)) => s.clone(),
            _ => return Err(Inner::invalid(&slot, record.status, "run a command in")),
        };
        self.inner.journal(&slot, EventKind::RunLog, format!("$ {}", argv.join(" ")))?;
        let out = match self.inner.runtime.exec(&session.session_id, argv).await {
            Ok(out) => out,
            Err(e) => {
                self.inner.journal(&slot, EventKind::Error, failure_message(&e))?;
                return Err(e.into());
            }
        };
        for line in out.output.lines() {
            self.inner.journal(&slot, EventKind::RunLog, line)?;
        }
        self.inner.journal(&slot, EventKind::RunLog, format!("exit {}", out.exit_code))?;
        Ok(out)
    }
}

impl Inner {
    pub(super) fn slot_of(&self, id: &str) -> Arc<Slot> {
        self.projects.read().unwrap().get(id).cloned().expect("slot exists")
    }

    /// Creates a `New` record with a unique (per owner) name.
    pub(super) fn new_record(
        &self,
        caller: &Caller,
        name: &str,
        source: Option<ProjectSource>,
        opened_from: Option<String>,
    ) -> Result<ProjectRecord> {
        let project_id = uuid::Uuid::new_v4().simple().to_string();
        let record = ProjectRecord {
            project_id: project_id.clone(),
            name: name.to_owned(),
            owner: caller.user_id.clone(),
            source,
            spec: None,
            status: ProjectStatus::New,
            image_ref: None,
            session: None,
            resources: self.config.default_resources,
            workspace: self.workspace(&project_id),
            failure: None,
            created_at: Utc::now(),
            opened_from,
        };
        // The name check and the insert happen under one write lock.
        let mut projects = self.projects.write().unwrap();
        let taken = projects.values().any(|s| {
            let r = s.record.read().unwrap();
            r.owner == record.owner && r.status != ProjectStatus::Deleted && r.name == record.name
        });
        if taken {
            return Err(OrchestratorError::NameTaken(name.to_owned()));
        }
        std::fs::create_dir_all(&record.workspace)?;
        let slot = Slot::new(&project_id, record.clone(), &record.workspace.join("journal.log"))?;
        projects.insert(project_id, slot);
        drop(projects);
        self.persist_record(&record)?;
        Ok(record)
    }

    /// Runs `step` with the writer held, so no user operation observes a half-applied phase.
    async fn locked<T>(&self, slot: &Slot, step: impl FnOnce() -> Result<T>) -> Result<T> {
        let _writer = slot.writer.lock().await;
        step()
    }

    pub(super) async fn fail_locked(&self, slot: &Slot, message: String) -> Result<ProjectRecord> {
        self.locked(slot, || self.fail(slot, message)).await
    }

    pub(super) async fn run_pipeline(self: Arc<Self>, slot: Arc<Slot>, source: ProjectSource, token: SessionToken) {
        if let Err(message) = self.pipeline(&slot, source, token).await {
            if let Err(e) = self.fail_locked(&slot, message).await {
                tracing::error!(project = %slot.id, "cannot record failure: {e}");
            }
        }
    }

    async fn pipeline(&self, slot: &Slot, source: ProjectSource, token: SessionToken) -> std::result::Result<(), String> {
        let record = slot.snapshot();
        let ws = record.workspace.clone();
        let internal = |e: OrchestratorError| failure_message(&e);

        self.locked(slot, || self.transition(slot, ProjectStatus::Cloning, |_| {})).await.map_err(internal)?;
        let dest = ws.join("project");
        let src = source.clone();
        let tree = tokio::task::spawn_blocking(move || load_project_source(&src, &dest))
            .await
            .map_err(|e| format!("Internal: {e}"))?
            .map_err(|e| failure_message(&e))?;

        self.locked(slot, || self.transition(slot, ProjectStatus::Planning, |_| {})).await.map_err(internal)?;
        let (spec, image, recipe) = self.plan(slot, source, tree, &record.name)?;

        let spec_for_record = spec.clone();
        self.locked(slot, || self.transition(slot, ProjectStatus::Building, |r| r.spec = Some(spec_for_record)))
            .await
            .map_err(internal)?;
        {
            let _permit = self.builds.acquire().await.map_err(|e| format!("Internal: {e}"))?;
            let existing = self.runtime.image_id(&image).await.map_err(|e| failure_message(&e))?;
            if let Some(id) = existing {
                self.journal(slot, EventKind::BuildLog, format!("image {image} already present ({id}); not rebuilding"))
                    .map_err(internal)?;
            } else {
                let sink = |line: &str| {
                    let _ = self.journal(slot, EventKind::BuildLog, line);
                };
                self.runtime
                    .build_image(&recipe, &spec.tree.root_path, &image, &sink)
                    .await
                    .map_err(|e| failure_message(&e))?;
            }
        }
        for binding in &spec.datasets {
            self.mount(slot, &token, binding, &ws).await.map_err(|e| match e {
                OrchestratorError::Rdms(e) => failure_message(&e),
                other => failure_message(&other),
            })?;
        }
        std::fs::create_dir_all(ws.join("openbis")).map_err(|e| format!("Io: {e}"))?;
        std::fs::create_dir_all(ws.join("results")).map_err(|e| format!("Io: {e}"))?;

        self.locked(slot, || self.transition(slot, ProjectStatus::Ready, |r| r.image_ref = Some(image)))
            .await
            .map_err(internal)?;
        Ok(())
    }

    /// Planning phase: layout findings, spec, plan, recipe and image reference.
    pub(super) fn plan(
        &self,
        slot: &Slot,
        source: ProjectSource,
        tree: WorkingTree,
        name: &str,
    ) -> std::result::Result<(ProjectSpec, ImageRef, crate::planner::RecipeText), String> {
        for finding in validate_layout(&tree).findings {
            let level = match finding.severity {
                Severity::Error => "error",
                Severity::Warning => "warning",
            };
            let _ = self.journal(slot, EventKind::BuildLog, format!("{level}: {:?}: {}", finding.code, finding.message));
        }
        let spec = ProjectSpec::load(source, tree).map_err(|e| failure_message(&e))?;
        let plan = plan_build(&spec.environment, &spec.spec_digest, &self.config.planner).map_err(|e| failure_message(&e))?;
        let recipe = render_recipe(&plan, &self.config.planner);
        let image = image_reference(name, &spec.spec_digest).map_err(|e| failure_message(&e))?;
        Ok((spec, image, recipe))
    }

    pub(super) async fn mount(&self, slot: &Slot, token: &SessionToken, binding: &DatasetBinding, ws: &Path) -> Result<()> {
        let client = self.rdms(&binding.server_url)?;
        let report = client.mount_dataset(token, binding, ws).await?;
        self.journal(
            slot,
            EventKind::BuildLog,
            format!(
                "mounted {} at openbis/{} ({} files, {} bytes, verified)",
                binding.perm_id, binding.folder, report.files_materialized, report.bytes
            ),
        )?;
        Ok(())
    }

    /// Stops and removes the session of a Running project. Caller holds the writer.
    pub(super) async fn stop_locked(&self, slot: &Slot) -> Result<ProjectRecord> {
        let record = slot.snapshot();
        if let Some(session) = &record.session {
            // The session may already be gone, e.g. after a daemon restart.
            let _ = self.runtime.stop_session(&session.session_id).await;
            let _ = self.runtime.destroy_session(&session.session_id).await;
        }
        let now = results_fingerprint(&record.workspace.join("results"));
        let before = slot.results_at_start.lock().unwrap().take();
        if before.as_deref() != Some(now.as_str()) {
            self.journal(slot, EventKind::ResultsChanged, now)?;
        }
        self.transition(slot, ProjectStatus::Stopped, |r| r.session = None)
    }

    /// Unique name among the owner's live projects, suffixing `-2`, `-3`, ... as needed.
    pub(super) fn free_name(&self, owner: &str, base: &str) -> String {
        let taken: BTreeSet<String> = self
            .projects
            .read()
            .unwrap()
            .values()
            .map(|s| s.record.read().unwrap().clone())
            .filter(|r| r.owner == owner && r.status != ProjectStatus::Deleted)
            .map(|r| r.name)
            .collect();
        if !taken.contains(base) {
            return base.to_owned();
        }
        (2..).map(|n| format!("{base}-{n}")).find(|n| !taken.contains(n)).expect("unbounded")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::RuntimeError;

    #[test]
    fn variant_names() {
        assert_eq!(variant_name(&RuntimeError::AuthFailed), "AuthFailed");
        assert_eq!(variant_name(&RuntimeError::ImageNotFound("x".into())), "ImageNotFound");
        assert_eq!(
            failure_message(&crate::project::ProjectError::ManifestSyntax("bad".into())),
            "ManifestSyntax: manifest syntax error: bad"
        );
    }
}
