//! Harvested results: listing, reading and uploading to the RDMS.
//!
//! Everything here reads the workspace directly and never touches a session.
//! Paths are confined to `results/`: symlinks are neither listed nor followed.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Caller, EventKind, Orchestrator, OrchestratorError, ProjectStatus, Result};
use crate::digest::{sha256_file, tree_digest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResultEntry {
    /// `/`-separated path relative to `results/`.
    pub relative_path: String,
    pub byte_size: u64,
    pub modified_at: DateTime<Utc>,
    pub content_hash: String,
}

/// Regular files under `dir`, sorted by path. Symlinks, special files and
/// non-UTF-8 names are skipped; a `dir` that is itself a symlink yields nothing.
pub fn scan_results(dir: &Path) -> Vec<ResultEntry> {
    match std::fs::symlink_metadata(dir) {
        Ok(m) if m.is_dir() => {}
        _ => return Vec::new(),
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(false).min_depth(1).sort_by_file_name() {
        let Ok(entry) = entry else { continue };
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(rel) = entry.path().strip_prefix(dir) else { continue };
        let Some(parts) = rel.components().map(|c| c.as_os_str().to_str()).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let Ok(meta) = entry.metadata() else { continue };
        let Ok((content_hash, byte_size)) = sha256_file(entry.path()) else { continue };
        out.push(ResultEntry {
            relative_path: parts.join("/"),
            byte_size,
            modified_at: meta.modified().map(DateTime::<Utc>::from).unwrap_or_default(),
            content_hash,
        });
    }
    out.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
    out
}

/// Digest over paths and hashes of the results tree.
pub(crate) fn results_fingerprint(dir: &Path) -> String {
    let entries = scan_results(dir);
    tree_digest(entries.iter().map(|e| (e.relative_path.as_str(), e.content_hash.as_str())))
}

/// Resolves `relative` under `root` without leaving it: only normal
/// components, and no existing component may be a symlink.
pub fn confine(root: &Path, relative: &str) -> Option<PathBuf> {
    let rel = Path::new(relative);
    if relative.is_empty() || relative.contains('\0') {
        return None;
    }
    if std::fs::symlink_metadata(root).map(|m| !m.is_dir()).unwrap_or(true) {
        return None;
    }
    let mut path = root.to_path_buf();
    for comp in rel.components() {
        match comp {
            Component::Normal(part) => path.push(part),
            Component::CurDir => {}
            _ => return None,
        }
        match std::fs::symlink_metadata(&path) {
            Ok(m) if m.file_type().is_symlink() => return None,
            Ok(_) => {}
            Err(_) => return None,
        }
    }
    (path != root).then_some(path)
}

impl Orchestrator {
    pub fn list_results(&self, caller: &Caller, id: &str) -> Result<Vec<ResultEntry>> {
        let record = self.live_record(caller, id)?;
        Ok(scan_results(&record.workspace.join("results")))
    }

    pub fn read_result(&self, caller: &Caller, id: &str, relative_path: &str) -> Result<Vec<u8>> {
        let record = self.live_record(caller, id)?;
        let path = confine(&record.workspace.join("results"), relative_path)
            .filter(|p| p.is_file())
            .ok_or_else(|| OrchestratorError::ResultNotFound(relative_path.to_owned()))?;
        Ok(std::fs::read(path)?)
    }

    /// Registers a result file, or every file of a result directory, as a dataset.
    pub async fn upload_result(
        &self,
        caller: &Caller,
        id: &str,
        relative_path: &str,
        metadata: BTreeMap<String, String>,
    ) -> Result<String> {
        let record = self.live_record(caller, id)?;
        let results = record.workspace.join("results");
        let not_found = || OrchestratorError::ResultNotFound(relative_path.to_owned());
        let path = confine(&results, relative_path).ok_or_else(not_found)?;
        let meta = std::fs::symlink_metadata(&path)?;
        let files: Vec<(String, Vec<u8>)> = if meta.is_file() {
            let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(not_found)?.to_owned();
            vec![(name, std::fs::read(&path)?)]
        } else if meta.is_dir() {
            let mut files = Vec::new();
            for e in scan_results(&path) {
                let data = std::fs::read(path.join(&e.relative_path))?;
                files.push((e.relative_path, data));
            }
            files
        } else {
            return Err(not_found());
        };
        if files.is_empty() {
            return Err(not_found());
        }

        let mut metadata = metadata;
        metadata.entry("type".into()).or_insert_with(|| "rrp-result".into());
        metadata.insert("sourceProject".into(), record.name.clone());
        metadata.insert("resultPath".into(), relative_path.to_owned());
        let client = self.inner.rdms(&self.inner.config.rdms_url)?;
        let perm_id = client.register_dataset(&caller.rdms_token, &files, &metadata).await?;
        let slot = self.slot(caller, id)?;
        self.inner.journal(&slot, EventKind::Upload, format!("{relative_path} -> {perm_id}"))?;
        Ok(perm_id)
    }

    /// Snapshot of a project that has not been deleted.
    fn live_record(&self, caller: &Caller, id: &str) -> Result<super::ProjectRecord> {
        let record = self.get_project(caller, id)?;
        if record.status == ProjectStatus::Deleted {
            return Err(OrchestratorError::UnknownProject(id.to_owned()));
        }
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    #[test]
    fn listing_skips_symlinks_and_nests() {
        let dir = tempfile::tempdir().unwrap();
        let outside = tempfile::tempdir().unwrap();
        fs::write(outside.path().join("secret"), b"s").unwrap();
        let results = dir.path().join("results");
        fs::create_dir_all(results.join("figs")).unwrap();
        fs::write(results.join("out.csv"), b"a,b\n").unwrap();
        fs::write(results.join("figs/f1.png"), b"png").unwrap();
        std::os::unix::fs::symlink(outside.path(), results.join("escape")).unwrap();
        std::os::unix::fs::symlink(outside.path().join("secret"), results.join("link")).unwrap();
        let names: Vec<_> = scan_results(&results).into_iter().map(|e| e.relative_path).collect();
        assert_eq!(names, ["figs/f1.png", "out.csv"]);
    }

    #[test]
    fn symlinked_results_root_lists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let outside = tempfile::tempdir().unwrap();
        fs::write(outside.path().join("secret"), b"s").unwrap();
        std::os::unix::fs::symlink(outside.path(), dir.path().join("results")).unwrap();
        assert!(scan_results(&dir.path().join("results")).is_empty());
        assert!(confine(&dir.path().join("results"), "secret").is_none());
    }

    #[test]
    fn confinement_rules() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("results");
        fs::create_dir_all(root.join("sub")).unwrap();
        fs::write(root.join("sub/a"), b"a").unwrap();
        std::os::unix::fs::symlink("/etc", root.join("etc")).unwrap();
        assert_eq!(confine(&root, "sub/a"), Some(root.join("sub/a")));
        assert_eq!(confine(&root, "./sub/a"), Some(root.join("sub/a")));
        for bad in ["", "../x", "sub/../../x", "/etc/passwd", "etc/passwd", "missing", "."] {
            assert!(confine(&root, bad).is_none(), "{bad:?} accepted");
        }
    }

    fn adversarial_name() -> impl Strategy<Value = String> {
        prop_oneof![Just("..".to_owned()), Just(".".to_owned()), Just("".to_owned()), Just("link".to_owned()), "[a-c]{1,2}"]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn no_entry_or_resolution_escapes(
            tree in proptest::collection::vec((proptest::collection::vec("[a-c]{1,2}", 1..4), 0u8..3), 1..8),
            probes in proptest::collection::vec(proptest::collection::vec(adversarial_name(), 1..4), 1..8),
            absolute in any::<bool>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let outside = dir.path().join("outside");
            fs::create_dir_all(&outside).unwrap();
            fs::write(outside.join("secret"), b"s").unwrap();
            let root = dir.path().join("ws/results");
            fs::create_dir_all(&root).unwrap();
            std::os::unix::fs::symlink(&outside, root.join("link")).unwrap();
            for (parts, kind) in &tree {
                let path = root.join(parts.join("/"));
                if let Some(parent) = path.parent() {
                    let _ = fs::create_dir_all(parent);
                }
                let _ = match kind {
                    0 => fs::write(&path, b"x"),
                    1 => std::os::unix::fs::symlink(outside.join("secret"), &path),
                    _ => std::os::unix::fs::symlink("../../../outside", &path),
                };
            }
            let canonical_root = root.canonicalize().unwrap();
            for e in scan_results(&root) {
                prop_assert!(!e.relative_path.split('/').any(|c| c == ".." || c.is_empty()));
                let resolved = root.join(&e.relative_path).canonicalize().unwrap();
                prop_assert!(resolved.starts_with(&canonical_root), "{} escapes", e.relative_path);
            }
            for parts in &probes {
                let mut rel = parts.join("/");
                if absolute {
                    rel.insert(0, '/');
                }
                if let Some(p) = confine(&root, &rel) {
                    let resolved = p.canonicalize().unwrap();
                    prop_assert!(resolved.starts_with(&canonical_root), "{rel:?} resolved outside");
                }
            }
        }
    }
}
