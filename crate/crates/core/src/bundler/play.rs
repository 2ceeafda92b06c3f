use std::path::{Path, PathBuf};

use async_trait::async_trait;
use serde::Serialize;

use super::container::{safe_join, scan_archive};
use super::*;
use crate::planner::ImageRef;
use crate::rdms::make_tree_read_only;
use crate::runtime::{MountSpec, ResourceLimits, RuntimeAdapter, SessionHandle, SessionRequest};

/// A bundle or script brought back to life.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Playback {
    pub session: SessionHandle,
    pub work_dir: PathBuf,
    pub manifest: BundleManifest,
    pub image: ImageRef,
    /// Where the session answers on this machine.
    pub local_url: String,
}

/// Downloads dataset archives for [`play_script`].
#[async_trait]
pub trait Fetcher: Send + Sync {
    async fn fetch(&self, url: &str) -> std::result::Result<Vec<u8>, String>;
}

#[derive(Debug, Clone, Default)]
pub struct HttpFetcher {
    client: reqwest::Client,
}

#[async_trait]
impl Fetcher for HttpFetcher {
    async fn fetch(&self, url: &str) -> std::result::Result<Vec<u8>, String> {
        let resp = self.client.get(url).send().await.map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("HTTP {}", resp.status()));
        }
        Ok(resp.bytes().await.map_err(|e| e.to_string())?.to_vec())
    }
}

/// Verifies, unpacks and starts a player bundle. Nothing is written before
/// verification passes.
pub async fn play_bundle(archive: &Path, runtime: &dyn RuntimeAdapter, work_dir: &Path) -> Result<Playback> {
    let (report, manifest) = verified(archive, BundleKind::Bundle)?;
    prepare_work_dir(work_dir)?;
    unpack(archive, work_dir, &report)?;

    let image = runtime
        .import_image(&work_dir.join(IMAGE_TAR))
        .await
        .map_err(|e| BundleError::ImportFailed(e.to_string()))?;
    if image.to_string() != manifest.image_ref {
        return Err(BundleError::ImportFailed(format!("archive holds {image}, manifest names {}", manifest.image_ref)));
    }
    start(runtime, work_dir, manifest, image, true).await
}

/// Verifies a player script, downloads and checks every dataset, pulls the
/// image and starts the session. Nothing starts unless all of that worked.
pub async fn play_script(archive: &Path, fetcher: &dyn Fetcher, runtime: &dyn RuntimeAdapter, work_dir: &Path) -> Result<Playback> {
    let (report, manifest) = verified(archive, BundleKind::Script)?;
    prepare_work_dir(work_dir)?;
    unpack(archive, work_dir, &report)?;

    for d in &manifest.datasets {
        let url = d.url.clone().unwrap_or_default();
        let bytes = fetcher.fetch(&url).await.map_err(|reason| BundleError::FetchFailed { url: url.clone(), reason })?;
        let dir = work_dir.join("data").join(&d.folder);
        let (digest, size) = unpack_dataset(&bytes, &dir).map_err(|reason| BundleError::FetchFailed { url: url.clone(), reason })?;
        if digest != d.content_hash || size != d.byte_size {
            return Err(BundleError::ChecksumMismatch {
                url,
                expected: format!("{} ({} bytes)", d.content_hash, d.byte_size),
                actual: format!("{digest} ({size} bytes)"),
            });
        }
    }

    let ImageSource::Remote { remote_reference, .. } = &manifest.image else {
        unreachable!("validated script manifest");
    };
    let image = runtime.pull_image(remote_reference).await.map_err(|e| BundleError::ImagePullFailed(e.to_string()))?;
    if image.to_string() != manifest.image_ref {
        return Err(BundleError::ImagePullFailed(format!("pulled {image}, manifest names {}", manifest.image_ref)));
    }
    start(runtime, work_dir, manifest, image, false).await
}

fn verified(archive: &Path, kind: BundleKind) -> Result<(VerificationReport, BundleManifest)> {
    let report = verify_bundle(archive)?;
    if !report.ok {
        return Err(BundleError::VerificationFailed(Box::new(report)));
    }
    let manifest = report.manifest.clone().ok_or_else(|| BundleError::CorruptArchive(format!("{MANIFEST} unreadable")))?;
    if manifest.kind != kind {
        return Err(BundleError::WrongKind { expected: kind, found: manifest.kind });
    }
    Ok((report, manifest))
}

fn prepare_work_dir(work_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(work_dir)?;
    if std::fs::read_dir(work_dir)?.next().is_some() {
        return Err(BundleError::WorkDirNotEmpty(work_dir.display().to_string()));
    }
    Ok(())
}

/// Extracts and re-checks against the hashes from verification, in case
/// the file changed in between.
fn unpack(archive: &Path, work_dir: &Path, report: &VerificationReport) -> Result<()> {
    let scan = scan_archive(archive, Some(work_dir), &|_| false)?;
    let mut failures = Vec::new();
    for b in &scan.broken {
        failures.push(VerificationFailure {
            path: format!("member #{}", b.index),
            expected_hash: String::new(),
            actual_hash: format!("undecodable: {}", b.reason),
        });
    }
    for (_, e) in &scan.entries {
        let expected = report.entries.get(&e.path).cloned().unwrap_or_default();
        if expected != e.sha256 {
            failures.push(VerificationFailure { path: e.path.clone(), expected_hash: expected, actual_hash: e.sha256.clone() });
        }
    }
    if failures.is_empty() && scan.entries.len() == report.entries.len() {
        return Ok(());
    }
    Err(BundleError::VerificationFailed(Box::new(VerificationReport {
        ok: false,
        failures,
        manifest: None,
        entries: BTreeMap::new(),
    })))
}

/// Unpacks a dataset tar of plain files into `dir`. Returns its tree digest
/// and total size.
fn unpack_dataset(bytes: &[u8], dir: &Path) -> std::result::Result<(String, u64), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mut archive = tar::Archive::new(bytes);
    let mut hashes = Vec::new();
    let mut size = 0;
    for entry in archive.entries().map_err(|e| format!("not a tar archive: {e}"))? {
        let mut entry = entry.map_err(|e| format!("not a tar archive: {e}"))?;
        let path = entry.path().map_err(|e| e.to_string())?.to_string_lossy().into_owned();
        match entry.header().entry_type() {
            tar::EntryType::Regular => {}
            tar::EntryType::Directory => continue,
            other => return Err(format!("unexpected entry type {other:?} at {path}")),
        }
        let dest = safe_join(dir, &path).ok_or_else(|| format!("unsafe path {path:?} in dataset archive"))?;
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        let mut data = Vec::new();
        std::io::Read::read_to_end(&mut entry, &mut data).map_err(|e| e.to_string())?;
        std::fs::write(&dest, &data).map_err(|e| e.to_string())?;
        size += data.len() as u64;
        hashes.push((path, sha256_hex(&data)));
    }
    Ok((tree_digest(hashes.iter().map(|(p, h)| (p.as_str(), h.as_str()))), size))
}

async fn start(
    runtime: &dyn RuntimeAdapter,
    work_dir: &Path,
    manifest: BundleManifest,
    image: ImageRef,
    mount_project: bool,
) -> Result<Playback> {
    let data = work_dir.join("data");
    std::fs::create_dir_all(&data)?;
    make_tree_read_only(&data)?;
    let results = work_dir.join("results");
    std::fs::create_dir_all(&results)?;

    let mut mounts = Vec::new();
    if mount_project {
        mounts.push(MountSpec::new(work_dir.join("project"), "/project", false));
    }
    for d in &manifest.datasets {
        mounts.push(MountSpec::new(data.join(&d.folder), format!("/openbis/{}", d.folder), true));
    }
    mounts.push(MountSpec::new(&results, "/results", false));
    let request = SessionRequest { mounts, command: None, env: vec![("RRP_BASE_URL".into(), "/".into())] };
    let session = runtime
        .create_session(&image, ResourceLimits::default(), request)
        .await
        .map_err(|e| BundleError::StartFailed(e.to_string()))?;
    let endpoint = &session.internal_endpoint;
    let local_url = if endpoint.contains("://") { format!("{}/", endpoint.trim_end_matches('/')) } else { format!("http://{endpoint}/") };
    Ok(Playback {
        local_url,
        session,
        work_dir: work_dir.to_path_buf(),
        manifest,
        image,
    })
}
