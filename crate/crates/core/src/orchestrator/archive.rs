//! Archival of a whole project into the RDMS.

use std::collections::BTreeMap;

use serde_json::json;

use super::results::scan_results;
use super::{Caller, EventKind, Inner, Orchestrator, OrchestratorError, ProjectStatus, Result};
use crate::project::{git, read_manifest};

impl Orchestrator {
    /// Registers one dataset holding `image.tar`, the committed code under
    /// `project/`, `datasets.yaml`, `results/` and `state.json`.
    pub async fn archive_project(&self, caller: &Caller, id: &str) -> Result<String> {
        let slot = self.slot(caller, id)?;
        let _writer = slot.writer.lock().await;
        let record = slot.snapshot();
        if !matches!(record.status, ProjectStatus::Ready | ProjectStatus::Stopped) {
            return Err(Inner::invalid(&slot, record.status, "archive"));
        }
        let spec = self.inner.current_spec(&slot, OrchestratorError::DirtyWorkspace)?;
        let image = record.image_ref.clone().ok_or_else(|| OrchestratorError::NoImage(id.to_owned()))?;
        let project_dir = record.workspace.join("project");

        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        let scratch = tempfile_in(&self.inner.config.data_root)?;
        let image_path = scratch.join("image.tar");
        self.inner.runtime.export_image(&image, &image_path).await?;
        files.push(("image.tar".into(), std::fs::read(&image_path)?));
        let _ = std::fs::remove_dir_all(&scratch);

        // The tree is clean, so the tracked files on disk are the commit.
        let tracked = git::tracked_files(&project_dir)?;
        for rel in &tracked {
            let path = project_dir.join(rel);
            if std::fs::symlink_metadata(&path).map(|m| m.is_file()).unwrap_or(false) {
                files.push((format!("project/{rel}"), std::fs::read(&path)?));
            }
        }
        if let Some((_, bytes)) = read_manifest(&project_dir)? {
            files.push(("datasets.yaml".into(), bytes));
        }
        let results = scan_results(&record.workspace.join("results"));
        for e in &results {
            files.push((format!("results/{}", e.relative_path), std::fs::read(record.workspace.join("results").join(&e.relative_path))?));
        }
        let state = json!({
            "projectId": record.project_id,
            "name": record.name,
            "owner": record.owner,
            "status": record.status,
            "commitId": spec.tree.commit_id,
            "specDigest": spec.spec_digest,
            "imageRef": image.to_string(),
            "datasets": spec.datasets,
            "resources": record.resources,
            "results": results,
            "generator": crate::GENERATOR,
        });
        files.push(("state.json".into(), serde_json::to_vec_pretty(&state).expect("json")));

        let metadata = BTreeMap::from([
            ("type".to_owned(), "rrp-archive".to_owned()),
            ("projectName".to_owned(), record.name.clone()),
            ("commitId".to_owned(), spec.tree.commit_id.clone()),
            ("specDigest".to_owned(), spec.spec_digest.as_str().to_owned()),
            ("imageRef".to_owned(), image.to_string()),
        ]);
        let client = self.inner.rdms(&self.inner.config.rdms_url)?;
        let perm_id = client.register_dataset(&caller.rdms_token, &files, &metadata).await?;
        self.inner.journal(&slot, EventKind::Archive, perm_id.clone())?;
        Ok(perm_id)
    }
}

/// Fresh scratch directory under `<dataRoot>/tmp/`.
pub(crate) fn tempfile_in(data_root: &std::path::Path) -> Result<std::path::PathBuf> {
    let dir = data_root.join("tmp").join(uuid::Uuid::new_v4().simple().to_string());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
