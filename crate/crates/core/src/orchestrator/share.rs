//! Shares: immutable snapshots that other users open without a rebuild.

use chrono::Utc;
use data_encoding::BASE32_NOPAD;
use rand::RngCore;

use super::lifecycle::failure_message;
use super::registry::{RegistryEntry, ShareEntry};
use super::{Caller, EventKind, Inner, Orchestrator, OrchestratorError, ProjectRecord, ProjectStatus, Result, ShareRecord, Slot};
use crate::planner::plan_build;
use crate::project::{git, ProjectSource, ProjectSpec, WorkingTree};

/// 128 random bits as 26 base32 characters.
pub fn new_share_id() -> String {
    let mut bytes = [0u8; 16];
    rand::rng().fill_bytes(&mut bytes);
    BASE32_NOPAD.encode(&bytes)
}

impl Inner {
    /// Spec of the committed working copy. Fails with `dirty` when there are
    /// uncommitted changes. Commits that leave the build plan unchanged are
    /// adopted without a rebuild; any plan change requires one. Caller holds
    /// the writer.
    pub(super) fn current_spec(&self, slot: &Slot, dirty: OrchestratorError) -> Result<ProjectSpec> {
        let record = slot.snapshot();
        let built = record.spec.clone().ok_or_else(|| OrchestratorError::NoImage(slot.id.clone()))?;
        let tree = WorkingTree::open(&record.workspace.join("project"))?;
        if tree.dirty {
            return Err(dirty);
        }
        if tree.commit_id == built.tree.commit_id {
            return Ok(built);
        }
        let head = ProjectSpec::load(built.source.clone(), tree)?;
        let old_plan = plan_build(&built.environment, &built.spec_digest, &self.config.planner)?;
        let new_plan = plan_build(&head.environment, &head.spec_digest, &self.config.planner)?;
        let diff = crate::planner::plan_diff(&old_plan, &new_plan);
        if !diff.is_empty() {
            let steps: Vec<String> = diff.iter().map(|(k, c)| format!("{k:?} {c:?}").to_lowercase()).collect();
            return Err(OrchestratorError::RebuildRequired(steps.join(", ")));
        }
        self.journal(
            slot,
            EventKind::BuildLog,
            format!("adopted commit {} (build plan unchanged, image reused)", head.tree.commit_id),
        )?;
        let updated = {
            let mut r = slot.record.write().unwrap();
            r.spec = Some(head.clone());
            r.clone()
        };
        self.persist_record(&updated)?;
        Ok(head)
    }
}

impl Orchestrator {
    pub async fn create_share(&self, caller: &Caller, id: &str) -> Result<ShareRecord> {
        let slot = self.slot(caller, id)?;
        let _writer = slot.writer.lock().await;
        let record = slot.snapshot();
        if !matches!(record.status, ProjectStatus::Ready | ProjectStatus::Running | ProjectStatus::Stopped) {
            return Err(Inner::invalid(&slot, record.status, "share"));
        }
        let spec = self.inner.current_spec(&slot, OrchestratorError::RepositoryDirty)?;
        let image_ref = record.image_ref.clone().ok_or_else(|| OrchestratorError::NoImage(id.to_owned()))?;

        let share_id = new_share_id();
        let bundle_path = self.inner.config.data_root.join("shares").join(format!("{share_id}.bundle"));
        let (root, out) = (record.workspace.join("project"), bundle_path.clone());
        tokio::task::spawn_blocking(move || git::create_bundle(&root, &out))
            .await
            .map_err(|e| OrchestratorError::Io(e.to_string()))??;

        let share = ShareRecord {
            share_id: share_id.clone(),
            source_project_id: id.to_owned(),
            commit_id: spec.tree.commit_id.clone(),
            spec_digest: spec.spec_digest.clone(),
            image_ref,
            created_at: Utc::now(),
        };
        let entry = ShareEntry { record: share.clone(), project_name: record.name.clone(), bundle_path };
        self.inner.registry.lock().unwrap().append(&RegistryEntry::Share { entry: entry.clone() })?;
        self.inner.shares.write().unwrap().insert(share_id.clone(), entry);
        self.inner.journal(&slot, EventKind::Share, share_id)?;
        Ok(share)
    }

    /// Clones a share for `caller` at the recorded commit and reuses the
    /// recorded image. Never builds. Failures leave the new project Failed.
    pub async fn open_share(&self, caller: &Caller, share_id: &str) -> Result<ProjectRecord> {
        let entry = self
            .inner
            .shares
            .read()
            .unwrap()
            .get(share_id)
            .cloned()
            .ok_or_else(|| OrchestratorError::ShareNotFound(share_id.to_owned()))?;
        let share = entry.record.clone();
        let prefix = share_id[..6.min(share_id.len())].to_lowercase();
        let name = self.inner.free_name(&caller.user_id, &format!("{}-{prefix}", entry.project_name));
        let source = ProjectSource::new(entry.bundle_path.to_string_lossy()).with_ref(&share.commit_id);
        let record = self.inner.new_record(caller, &name, Some(source.clone()), Some(share_id.to_owned()))?;
        let slot = self.inner.slot_of(&record.project_id);
        let _writer = slot.writer.lock().await;

        match self.open_share_steps(caller, &slot, &share, source).await {
            Ok(record) => Ok(record),
            Err(message) => self.inner.fail(&slot, message),
        }
    }

    async fn open_share_steps(
        &self,
        caller: &Caller,
        slot: &Slot,
        share: &ShareRecord,
        source: ProjectSource,
    ) -> std::result::Result<ProjectRecord, String> {
        let inner = &self.inner;
        let internal = |e: OrchestratorError| failure_message(&e);
        let ws = slot.snapshot().workspace;

        inner.transition(slot, ProjectStatus::Cloning, |_| {}).map_err(internal)?;
        let (src, dest) = (source.clone(), ws.join("project"));
        let tree = tokio::task::spawn_blocking(move || crate::project::load_project_source(&src, &dest))
            .await
            .map_err(|e| format!("Internal: {e}"))?
            .map_err(|e| failure_message(&e))?;

        inner.transition(slot, ProjectStatus::Planning, |_| {}).map_err(internal)?;
        let spec = ProjectSpec::load(source, tree).map_err(|e| failure_message(&e))?;
        if spec.spec_digest != share.spec_digest {
            return Err(format!(
                "SpecMismatch: share recorded {} but the checkout yields {}",
                share.spec_digest.as_str(),
                spec.spec_digest.as_str()
            ));
        }

        let spec_for_record = spec.clone();
        inner.transition(slot, ProjectStatus::Building, |r| r.spec = Some(spec_for_record)).map_err(internal)?;
        match inner.runtime.image_id(&share.image_ref).await {
            Ok(Some(id)) => {
                let _ = inner.journal(slot, EventKind::BuildLog, format!("reusing shared image {} ({id})", share.image_ref));
            }
            Ok(None) => return Err(format!("ImageNotFound: shared image {} is no longer present", share.image_ref)),
            Err(e) => return Err(failure_message(&e)),
        }
        for binding in &spec.datasets {
            inner.mount(slot, &caller.rdms_token, binding, &ws).await.map_err(|e| match e {
                OrchestratorError::Rdms(e) => failure_message(&e),
                other => failure_message(&other),
            })?;
        }
        std::fs::create_dir_all(ws.join("openbis")).map_err(|e| format!("Io: {e}"))?;
        std::fs::create_dir_all(ws.join("results")).map_err(|e| format!("Io: {e}"))?;
        let image = share.image_ref.clone();
        inner.transition(slot, ProjectStatus::Ready, |r| r.image_ref = Some(image)).map_err(internal)
    }
}
