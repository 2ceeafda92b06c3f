use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::Serialize;
use walkdir::WalkDir;

use super::container::{write_archive, Entry};
use super::scripts::{start_bat, start_sh};
use super::*;
use crate::orchestrator::{Caller, ExportGuard, Orchestrator};
use crate::project::git;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExportReport {
    pub path: PathBuf,
    pub bytes: u64,
    pub manifest: BundleManifest,
    pub warnings: Vec<String>,
}

fn export_failed(e: impl std::fmt::Display) -> BundleError {
    BundleError::ExportFailed(e.to_string())
}

/// Writes a self-contained player bundle for a Ready or Stopped project with
/// a clean working copy.
pub async fn export_player_bundle(orch: &Orchestrator, caller: &Caller, id: &str, out: &Path) -> Result<ExportReport> {
    let guard = orch.begin_export(caller, id).await?;
    let scratch = orch.scratch_dir()?;
    let result = write_bundle(orch, &guard, &scratch, out).await;
    let _ = std::fs::remove_dir_all(&scratch);
    result
}

async fn write_bundle(orch: &Orchestrator, guard: &ExportGuard, scratch: &Path, out: &Path) -> Result<ExportReport> {
    let image_path = scratch.join(IMAGE_TAR);
    orch.runtime().export_image(&guard.image_ref, &image_path).await.map_err(export_failed)?;

    let mut payload = vec![Entry::file(IMAGE_TAR, 0o644, image_path)];
    payload.extend(project_entries(&guard.project_dir())?);

    let mut datasets = Vec::new();
    let mut data_bytes = 0;
    for binding in &guard.spec.datasets {
        let dir = guard.openbis_dir().join(&binding.folder);
        if !dir.is_dir() {
            return Err(export_failed(format!("dataset {} is not mounted at openbis/{}", binding.perm_id, binding.folder)));
        }
        let mut hashes = Vec::new();
        let mut size = 0;
        for (rel, path) in files_under(&dir)? {
            let (hash, len) = crate::digest::sha256_file(&path)?;
            size += len;
            hashes.push((rel.clone(), hash));
            payload.push(Entry::file(format!("data/{}/{rel}", binding.folder), 0o444, path));
        }
        data_bytes += size;
        datasets.push(BundleDataset {
            perm_id: binding.perm_id.clone(),
            folder: binding.folder.clone(),
            byte_size: size,
            content_hash: tree_digest(hashes.iter().map(|(p, h)| (p.as_str(), h.as_str()))),
            source: DatasetSource::Embedded,
            url: None,
            doi: None,
        });
    }

    let manifest = manifest_for(orch, guard, BundleKind::Bundle, ImageSource::Embedded { embedded_path: IMAGE_TAR.into() }, datasets);
    let mut warnings = Vec::new();
    let limit = orch.config().bundle_warn_bytes;
    if data_bytes > limit {
        warnings.push(format!(
            "bundle embeds {data_bytes} bytes of data (above {limit}); consider publishing the datasets and exporting a player script"
        ));
    }
    let bytes = write_with_scripts(&manifest, payload, out)?;
    Ok(ExportReport { path: out.to_path_buf(), bytes, manifest, warnings })
}

/// Writes a player script: manifest, checksums and startup scripts. Every
/// dataset must be published and the image pushed.
pub async fn export_player_script(orch: &Orchestrator, caller: &Caller, id: &str, out: &Path) -> Result<ExportReport> {
    let guard = orch.begin_export(caller, id).await?;
    let receipt = orch
        .published_image(&guard.image_ref)
        .ok_or_else(|| BundleError::ImageNotPublished(guard.image_ref.to_string()))?;
    // The image carries the code it was built from; the script mounts no
    // project tree, so that code has to be the current commit.
    if guard.image_ref.tag != guard.spec.spec_digest.short(12) {
        return Err(export_failed(format!(
            "image {} was built from an earlier commit than {}; the script would run the older code",
            guard.image_ref, guard.spec.tree.commit_id
        )));
    }

    let mut datasets = Vec::new();
    let mut unpublished = Vec::new();
    for binding in &guard.spec.datasets {
        let client = orch.rdms_client(&binding.server_url)?;
        match client.publication(&caller.rdms_token, &binding.perm_id).await? {
            Some(doi) => {
                let descriptor = client.resolve_dataset(&caller.rdms_token, &binding.perm_id).await?;
                datasets.push(BundleDataset {
                    perm_id: binding.perm_id.clone(),
                    folder: binding.folder.clone(),
                    byte_size: descriptor.total_bytes,
                    content_hash: descriptor.content_hash(),
                    source: DatasetSource::Url,
                    url: Some(doi.resolved_url),
                    doi: Some(doi.doi),
                });
            }
            None => unpublished.push(binding.perm_id.clone()),
        }
    }
    if !unpublished.is_empty() {
        return Err(BundleError::UnpublishedDatasets(unpublished));
    }
    let image = ImageSource::Remote { remote_reference: receipt.remote_reference, registry_url: receipt.registry_url };
    let manifest = manifest_for(orch, &guard, BundleKind::Script, image, datasets);
    let bytes = write_with_scripts(&manifest, Vec::new(), out)?;
    Ok(ExportReport { path: out.to_path_buf(), bytes, manifest, warnings: Vec::new() })
}

fn manifest_for(
    orch: &Orchestrator,
    guard: &ExportGuard,
    kind: BundleKind,
    image: ImageSource,
    datasets: Vec<BundleDataset>,
) -> BundleManifest {
    BundleManifest {
        bundle_version: BUNDLE_VERSION,
        kind,
        project_name: guard.record.name.clone(),
        commit_id: guard.spec.tree.commit_id.clone(),
        spec_digest: guard.spec.spec_digest.clone(),
        image_ref: guard.image_ref.to_string(),
        image,
        datasets,
        session_port: orch.config().planner.session_port,
        created_at: Utc::now(),
        generator: crate::GENERATOR.to_owned(),
    }
}

/// Prepends manifest, checksum list and scripts to `payload`, writes the
/// archive next to `out` and moves it into place once it verifies.
fn write_with_scripts(manifest: &BundleManifest, payload: Vec<Entry>, out: &Path) -> Result<u64> {
    manifest.validate().map_err(export_failed)?;
    let manifest_json = serde_json::to_vec_pretty(manifest).map_err(export_failed)?;
    let mut rest = vec![
        Entry::bytes(START_SH, 0o755, start_sh(manifest).into_bytes()),
        Entry::bytes(START_BAT, 0o644, start_bat(manifest).into_bytes()),
    ];
    rest.extend(payload);

    let manifest_entry = Entry::bytes(MANIFEST, 0o644, manifest_json);
    let mut hashes = vec![(MANIFEST.to_owned(), manifest_entry.sha256()?.0)];
    for e in &rest {
        hashes.push((e.path.clone(), e.sha256()?.0));
    }
    let checksums = checksums_text(hashes.iter().map(|(p, h)| (p.as_str(), h.as_str())));

    let mut entries = vec![manifest_entry, Entry::bytes(CHECKSUMS, 0o644, checksums.into_bytes())];
    entries.extend(rest);

    let tmp = out.with_extension("partial");
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let written = write_archive(&tmp, &entries);
    let bytes = match written {
        Ok(n) => n,
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            return Err(export_failed(e));
        }
    };
    let report = verify_bundle(&tmp)?;
    if !report.ok {
        let _ = std::fs::remove_file(&tmp);
        return Err(export_failed(format!("fresh archive failed verification: {}", describe_failures(&report))));
    }
    std::fs::rename(&tmp, out)?;
    Ok(bytes)
}

/// Tracked regular files of the clean working copy. Symlinks are skipped.
fn project_entries(project_dir: &Path) -> Result<Vec<Entry>> {
    let tracked = git::tracked_files(project_dir).map_err(export_failed)?;
    let mut entries = Vec::new();
    for rel in tracked {
        let path = project_dir.join(&rel);
        let meta = std::fs::symlink_metadata(&path)?;
        if !meta.is_file() {
            continue;
        }
        let mode = if meta.permissions().mode() & 0o111 != 0 { 0o755 } else { 0o644 };
        entries.push(Entry::file(format!("project/{rel}"), mode, path));
    }
    Ok(entries)
}

/// Regular files under `dir` as `(relative path, absolute path)`, sorted.
fn files_under(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|e| BundleError::Io(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under its root");
        let rel = rel.to_str().ok_or_else(|| export_failed(format!("non-UTF-8 path {}", rel.display())))?;
        out.push((rel.replace(std::path::MAIN_SEPARATOR, "/"), entry.path().to_path_buf()));
    }
    out.sort();
    Ok(out)
}
