//! Player bundles and player scripts.
//!
//! A player bundle is a self-contained archive: manifest, checksums, startup
//! scripts, the OCI image, the committed code and every bound dataset. A
//! player script carries only the manifest, checksums and startup scripts and
//! fetches published data and a registry-hosted image at playback time.
//!
//! Both are gzip-compressed tars (see [`container`]) with `manifest.json`
//! first. `checksums.txt` lists `<sha256>  <path>` for every other entry in
//! archive order and ends with a line hashing the lines before it.

mod container;
mod export;
mod play;
mod scripts;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256_hex, tree_digest, Sha256Digest};
use crate::orchestrator::OrchestratorError;
use crate::rdms::RdmsError;

pub use export::{export_player_bundle, export_player_script, ExportReport};
pub use play::{play_bundle, play_script, Fetcher, HttpFetcher, Playback};

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const CHECKSUMS: &str = "checksums.txt";
pub const START_SH: &str = "start.sh";
pub const START_BAT: &str = "start.bat";
pub const IMAGE_TAR: &str = "image.tar";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("export failed: {0}")]
    ExportFailed(String),
    #[error("datasets not published: {}", .0.join(", "))]
    UnpublishedDatasets(Vec<String>),
    #[error("image {0} has not been pushed to a registry")]
    ImageNotPublished(String),
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("verification failed: {}", describe_failures(.0))]
    VerificationFailed(Box<VerificationReport>),
    #[error("expected a {expected:?} archive, found {found:?}")]
    WrongKind { expected: BundleKind, found: BundleKind },
    #[error("work directory {0} is not empty")]
    WorkDirNotEmpty(String),
    #[error("image import failed: {0}")]
    ImportFailed(String),
    #[error("image pull failed: {0}")]
    ImagePullFailed(String),
    #[error("session failed to start: {0}")]
    StartFailed(String),
    #[error("download failed for {url}: {reason}")]
    FetchFailed { url: String, reason: String },
    #[error("checksum mismatch for {url}: expected {expected}, got {actual}")]
    ChecksumMismatch { url: String, expected: String, actual: String },
    #[error("RDMS error: {0}")]
    Rdms(#[from] RdmsError),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for BundleError {
    fn from(e: std::io::Error) -> Self {
        BundleError::Io(e.to_string())
    }
}

fn describe_failures(r: &VerificationReport) -> String {
    r.failures.iter().map(|f| f.path.as_str()).collect::<Vec<_>>().join(", ")
}

pub type Result<T, E = BundleError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BundleKind {
    Bundle,
    Script,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, rename_all_fields = "camelCase")]
pub enum ImageSource {
    Embedded { embedded_path: String },
    Remote { remote_reference: String, registry_url: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Embedded,
    Url,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BundleDataset {
    pub perm_id: String,
    pub folder: String,
    pub byte_size: u64,
    /// Tree digest over the folder's files, as the RDMS reports it.
    pub content_hash: String,
    pub source: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doi: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BundleManifest {
    pub bundle_version: u32,
    pub kind: BundleKind,
    pub project_name: String,
    pub commit_id: String,
    pub spec_digest: Sha256Digest,
    pub image_ref: String,
    pub image: ImageSource,
    pub datasets: Vec<BundleDataset>,
    /// Port the session serves on inside the container.
    pub session_port: u16,
    pub created_at: DateTime<Utc>,
    pub generator: String,
}

impl BundleManifest {
    /// Checks the kind-dependent invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.bundle_version != BUNDLE_VERSION {
            return Err(format!("unsupported bundleVersion {}", self.bundle_version));
        }
        let mut folders = BTreeSet::new();
        for d in &self.datasets {
            if crate::project::validate_folder(&d.folder).is_err() {
                return Err(format!("invalid dataset folder {:?}", d.folder));
            }
            if !folders.insert(d.folder.as_str()) {
                return Err(format!("dataset folder {:?} appears twice", d.folder));
            }
        }
        match self.kind {
            BundleKind::Bundle => {
                if !matches!(&self.image, ImageSource::Embedded { embedded_path } if embedded_path == IMAGE_TAR) {
                    return Err("a bundle must embed image.tar".into());
                }
                if let Some(d) = self.datasets.iter().find(|d| d.source != DatasetSource::Embedded) {
                    return Err(format!("dataset {} is not embedded", d.perm_id));
                }
            }
            BundleKind::Script => {
                if !matches!(self.image, ImageSource::Remote { .. }) {
                    return Err("a player script needs a remote image reference".into());
                }
                if let Some(d) = self.datasets.iter().find(|d| d.source != DatasetSource::Url || d.url.is_none()) {
                    return Err(format!("dataset {} has no download URL", d.perm_id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerificationFailure {
    pub path: String,
    pub expected_hash: String,
    pub actual_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerificationReport {
    pub ok: bool,
    pub failures: Vec<VerificationFailure>,
    /// Set when the manifest decoded and parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<BundleManifest>,
    /// Verified entries by path, with their SHA-256.
    #[serde(skip)]
    pub entries: BTreeMap<String, String>,
}

/// `checksums.txt` for `(path, sha256)` pairs in archive order.
pub(crate) fn checksums_text<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut text = String::new();
    for (path, hash) in entries {
        text.push_str(&format!("{hash}  {path}\n"));
    }
    let own = sha256_hex(text.as_bytes());
    text.push_str(&format!("{own}  {CHECKSUMS}\n"));
    text
}

struct Checksums {
    /// Lines before the self line, in order.
    listed: Vec<(String, String)>,
    /// The self line is present and matches.
    intact: bool,
}

fn parse_checksums(bytes: &[u8]) -> Checksums {
    let text = String::from_utf8_lossy(bytes);
    let mut listed = Vec::new();
    let mut well_formed = text.ends_with('\n');
    for line in text.lines() {
        match line.split_once("  ") {
            Some((hash, path)) if Sha256Digest::parse(hash).is_some() && !path.is_empty() => {
                listed.push((path.to_owned(), hash.to_owned()));
            }
            _ => well_formed = false,
        }
    }
    let intact = match listed.pop() {
        Some((path, hash)) if path == CHECKSUMS && well_formed => {
            let body_len = text.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
            sha256_hex(&bytes[..body_len]) == hash
        }
        _ => false,
    };
    Checksums { listed, intact }
}

/// Reads only the first entry of an archive.
pub fn read_manifest(archive: &Path) -> Result<BundleManifest> {
    let first = container::first_entry(archive).map_err(|e| BundleError::CorruptArchive(e.to_string()))?;
    if first.path != MANIFEST {
        return Err(BundleError::CorruptArchive(format!("first entry is {}, not {MANIFEST}", first.path)));
    }
    serde_json::from_slice(&first.content.unwrap_or_default())
        .map_err(|e| BundleError::CorruptArchive(format!("{MANIFEST}: {e}")))
}

/// Re-hashes every entry against `checksums.txt` and the manifest's
/// dataset digests. Structural damage (no manifest or no checksum list) is
/// an error; content damage is reported per path.
pub fn verify_bundle(archive: &Path) -> Result<VerificationReport> {
    let scan = container::scan_archive(archive, None, &|p| p == MANIFEST || p == CHECKSUMS)?;
    if scan.entries.is_empty() {
        return Err(BundleError::CorruptArchive("no readable entries".into()));
    }
    let mut failures = Vec::new();
    let fail = |failures: &mut Vec<VerificationFailure>, path: &str, expected: &str, actual: &str| {
        failures.push(VerificationFailure { path: path.to_owned(), expected_hash: expected.to_owned(), actual_hash: actual.to_owned() })
    };

    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for (index, e) in &scan.entries {
        if !container::is_safe_path(&e.path) {
            return Err(BundleError::CorruptArchive(format!("unsafe entry path {:?}", e.path)));
        }
        if *index == 0 && e.path != MANIFEST {
            return Err(BundleError::CorruptArchive(format!("first entry is {}, not {MANIFEST}", e.path)));
        }
        if seen.insert(e.path.clone(), e.sha256.clone()).is_some() {
            fail(&mut failures, &e.path, "", "duplicate entry");
        }
    }
    let broken_at = |i: usize| scan.broken.iter().find(|b| b.index == i);

    let checksums_entry = scan.entries.iter().find(|(_, e)| e.path == CHECKSUMS);
    let checksums = match checksums_entry {
        Some((_, e)) => parse_checksums(e.content.as_deref().unwrap_or_default()),
        None if broken_at(1).is_some() => Checksums { listed: Vec::new(), intact: false },
        None => return Err(BundleError::CorruptArchive(format!("{CHECKSUMS} is missing"))),
    };
    if !checksums.intact {
        let actual = match checksums_entry {
            Some((_, e)) => e.sha256.clone(),
            None => format!("undecodable: {}", broken_at(1).map(|b| b.reason.as_str()).unwrap_or("")),
        };
        fail(&mut failures, CHECKSUMS, "self-consistent list", &actual);
    }
    let listed: BTreeMap<&str, &str> = checksums.listed.iter().map(|(p, h)| (p.as_str(), h.as_str())).collect();

    // Member i holds the i-th entry: the manifest, the checksum list, then
    // the rest in listed order.
    let mut order: Vec<&str> = vec![MANIFEST, CHECKSUMS];
    order.extend(checksums.listed.iter().map(|(p, _)| p.as_str()).filter(|p| *p != MANIFEST));
    let mut blamed = BTreeSet::new();
    for b in &scan.broken {
        let path = order.get(b.index).map(|p| p.to_string()).unwrap_or_else(|| format!("member #{}", b.index));
        if path == CHECKSUMS && !checksums.intact {
            continue;
        }
        let expected = listed.get(path.as_str()).copied().unwrap_or("");
        fail(&mut failures, &path, expected, &format!("undecodable: {}", b.reason));
        blamed.insert(path);
    }

    if checksums.intact {
        for (_, e) in &scan.entries {
            if e.path == CHECKSUMS {
                continue;
            }
            match listed.get(e.path.as_str()) {
                Some(h) if *h == e.sha256 => {}
                Some(h) => fail(&mut failures, &e.path, h, &e.sha256),
                None => fail(&mut failures, &e.path, "not listed", &e.sha256),
            }
        }
        for (path, hash) in &checksums.listed {
            if !seen.contains_key(path) && !blamed.contains(path) {
                fail(&mut failures, path, hash, "missing");
            }
        }
    }

    let manifest_entry = scan.entries.iter().find(|(_, e)| e.path == MANIFEST).map(|(_, e)| e);
    let manifest = match manifest_entry {
        Some(e) => match serde_json::from_slice::<BundleManifest>(e.content.as_deref().unwrap_or_default()) {
            Ok(m) => Some(m),
            Err(err) if listed.get(MANIFEST) == Some(&e.sha256.as_str()) => {
                return Err(BundleError::CorruptArchive(format!("{MANIFEST}: {err}")));
            }
            // Already reported as a mismatch.
            Err(_) => None,
        },
        None if broken_at(0).is_some() => None,
        None => return Err(BundleError::CorruptArchive(format!("{MANIFEST} is missing"))),
    };
    if let Some(m) = &manifest {
        if let Err(msg) = m.validate() {
            return Err(BundleError::CorruptArchive(format!("{MANIFEST}: {msg}")));
        }
        if m.kind == BundleKind::Bundle {
            for d in &m.datasets {
                let prefix = format!("data/{}/", d.folder);
                if blamed.iter().any(|p| p.starts_with(&prefix)) {
                    continue;
                }
                let files: Vec<(&str, &str)> = scan
                    .entries
                    .iter()
                    .filter_map(|(_, e)| e.path.strip_prefix(&prefix).map(|rel| (rel, e.sha256.as_str())))
                    .collect();
                let size: u64 = scan.entries.iter().filter(|(_, e)| e.path.starts_with(&prefix)).map(|(_, e)| e.size).sum();
                let digest = tree_digest(files);
                if digest != d.content_hash || size != d.byte_size {
                    fail(&mut failures, &format!("data/{}", d.folder), &d.content_hash, &format!("{digest} ({size} bytes)"));
                }
            }
            if !seen.contains_key(IMAGE_TAR) && !blamed.contains(IMAGE_TAR) && !listed.contains_key(IMAGE_TAR) {
                fail(&mut failures, IMAGE_TAR, "present", "missing");
            }
        }
    }

    Ok(VerificationReport { ok: failures.is_empty(), failures, manifest, entries: seen })
}
