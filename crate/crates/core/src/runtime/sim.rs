//! Deterministic in-memory runtime backend.
//!
//! Images are recipe text plus a snapshot of the build context placed at
//! `/project`; the image id is the SHA-256 of the recipe bytes. Sessions
//! never run processes: `exec` dispatches to registered [`SimProgram`]s,
//! which see the session's filesystem through [`SimFs`]. Mounts map onto
//! host directories exactly as a real container would see them, and
//! read-only mounts deny writes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use super::oci::{read_image_layout, write_image_layout, ImageArchive};
use super::{
    local_ref_from_remote, normalize_container_path, remote_reference, BuildResult, ExecOutput, LogSink, MountSpec,
    ProxyRequest, ProxyResponse, PushReceipt, RegistryCredentials, ResourceLimits, Result, RuntimeAdapter,
    RuntimeError, SessionHandle, SessionRequest, SessionStatus,
};
use crate::digest::sha256_hex;
use crate::planner::{ImageRef, RecipeText};

/// Fault injection and allocation settings.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Fail the build after emitting this many step log lines (1-based).
    pub fail_build_at_step: Option<usize>,
    /// Pause after each build step, to make builds observable in flight.
    pub step_delay: std::time::Duration,
    pub fail_import: bool,
    pub fail_start: bool,
    pub push_auth_fails: bool,
    pub registry_unreachable: bool,
    /// First loopback port handed to sessions; allocation is monotonic.
    pub port_base: u16,
    /// Largest allocation a single session may request.
    pub max_session: ResourceLimits,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            fail_build_at_step: None,
            step_delay: std::time::Duration::ZERO,
            fail_import: false,
            fail_start: false,
            push_auth_fails: false,
            registry_unreachable: false,
            port_base: 20000,
            max_session: ResourceLimits { cpu_cores: 64.0, memory_bytes: 256 * super::GIB },
        }
    }
}

/// What the sim did, in call order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
pub enum LedgerEntry {
    Build { image: String, image_id: String },
    BuildFailed { image: String },
    Export { image: String },
    Import { image: String, image_id: String },
    Push { image: String, registry_url: String, remote_reference: String },
    Pull { remote_reference: String },
    SessionCreated { session_id: String, image: String },
    SessionStopped { session_id: String },
    SessionDestroyed { session_id: String },
    Exec { session_id: String, command: String, exit_code: i64 },
}

/// Shared stand-in for a remote OCI registry. Attach one registry to several
/// sim runtimes to move images between them by push and pull.
#[derive(Debug, Clone, Default)]
pub struct SimRegistry {
    images: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
}

impl SimRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, remote: &str) -> bool {
        self.images.lock().unwrap().contains_key(remote)
    }

    pub fn references(&self) -> Vec<String> {
        self.images.lock().unwrap().keys().cloned().collect()
    }
}

/// A simulated command. Returns its output or an error message (exit code 1).
pub type SimProgram = Arc<dyn Fn(&mut SimFs<'_>) -> std::result::Result<String, String> + Send + Sync>;

#[derive(Debug, Clone)]
struct SimImage {
    image_id: String,
    recipe: String,
    files: Arc<BTreeMap<String, Vec<u8>>>,
}

#[derive(Debug)]
struct SimSession {
    handle: SessionHandle,
    limits: ResourceLimits,
    mounts: Vec<MountSpec>,
    env: Vec<(String, String)>,
    overlay: BTreeMap<String, Vec<u8>>,
    image_files: Arc<BTreeMap<String, Vec<u8>>>,
    trace: Vec<SessionStatus>,
}

/// Inspection view of a sim session.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSessionInfo {
    pub limits: ResourceLimits,
    pub mounts: Vec<MountSpec>,
    pub env: Vec<(String, String)>,
    pub status_trace: Vec<SessionStatus>,
}

#[derive(Debug, Default)]
struct SimState {
    images: BTreeMap<String, SimImage>,
    sessions: BTreeMap<String, SimSession>,
    next_session: u64,
    ledger: Vec<LedgerEntry>,
}

type BuildOutcome = Option<Result<BuildResult>>;

pub struct SimRuntime {
    config: RwLock<SimConfig>,
    state: Mutex<SimState>,
    inflight: Mutex<HashMap<String, watch::Receiver<BuildOutcome>>>,
    programs: RwLock<HashMap<String, SimProgram>>,
    registry: Option<SimRegistry>,
}

impl Default for SimRuntime {
    fn default() -> Self {
        Self::new(SimConfig::default())
    }
}

impl SimRuntime {
    pub fn new(config: SimConfig) -> Self {
        Self {
            config: RwLock::new(config),
            state: Mutex::default(),
            inflight: Mutex::default(),
            programs: RwLock::default(),
            registry: None,
        }
    }

    pub fn with_registry(mut self, registry: SimRegistry) -> Self {
        self.registry = Some(registry);
        self
    }

    /// Adjusts fault injection at any point.
    pub fn configure(&self, f: impl FnOnce(&mut SimConfig)) {
        f(&mut self.config.write().unwrap());
    }

    /// Registers a program under the exact command line that invokes it.
    pub fn register_program(&self, command: &str, program: SimProgram) {
        self.programs.write().unwrap().insert(command.to_owned(), program);
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.state.lock().unwrap().ledger.clone()
    }

    pub fn build_count(&self) -> usize {
        self.state.lock().unwrap().ledger.iter().filter(|e| matches!(e, LedgerEntry::Build { .. })).count()
    }

    pub fn push_count(&self) -> usize {
        self.state.lock().unwrap().ledger.iter().filter(|e| matches!(e, LedgerEntry::Push { .. })).count()
    }

    pub fn session_info(&self, session_id: &str) -> Option<SimSessionInfo> {
        let st = self.state.lock().unwrap();
        st.sessions.get(session_id).map(|s| SimSessionInfo {
            limits: s.limits,
            mounts: s.mounts.clone(),
            env: s.env.clone(),
            status_trace: s.trace.clone(),
        })
    }

    pub fn live_sessions(&self) -> Vec<String> {
        self.state.lock().unwrap().sessions.keys().cloned().collect()
    }

    fn snapshot_context(context: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
        if !context.is_dir() {
            return Err(RuntimeError::Io(format!("build context {} does not exist", context.display())));
        }
        let mut files = BTreeMap::new();
        let walker = walkdir::WalkDir::new(context)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || e.file_name() != ".git");
        for entry in walker {
            let entry = entry.map_err(|e| RuntimeError::Io(e.to_string()))?;
            if entry.file_type().is_file() {
                let rel = entry.path().strip_prefix(context).expect("walk stays under context");
                let rel = rel.to_string_lossy().replace('\\', "/");
                files.insert(format!("/project/{rel}"), std::fs::read(entry.path())?);
            }
        }
        Ok(files)
    }

    async fn run_build(&self, recipe: &RecipeText, context: &Path, image: &ImageRef, logs: LogSink<'_>) -> Result<BuildResult> {
        let key = image.to_string();
        let steps: Vec<String> = recipe
            .0
            .lines()
            .filter_map(|l| l.strip_prefix("# step: "))
            .map(str::to_owned)
            .collect();
        if recipe.spec_digest().is_none() || steps.is_empty() {
            self.state.lock().unwrap().ledger.push(LedgerEntry::BuildFailed { image: key });
            return Err(RuntimeError::BuildFailed { message: "malformed recipe".into(), last_lines: Vec::new() });
        }
        let (fail_at, delay) = {
            let cfg = self.config.read().unwrap();
            (cfg.fail_build_at_step, cfg.step_delay)
        };
        let total = steps.len();
        let mut emitted: Vec<String> = Vec::new();
        for (i, kind) in steps.iter().enumerate() {
            let line = format!("Step {}/{} : {}", i + 1, total, kind);
            logs(&line);
            emitted.push(line);
            if delay.is_zero() {
                tokio::task::yield_now().await;
            } else {
                tokio::time::sleep(delay).await;
            }
            if fail_at == Some(i + 1) {
                self.state.lock().unwrap().ledger.push(LedgerEntry::BuildFailed { image: key });
                let start = emitted.len().saturating_sub(50);
                return Err(RuntimeError::BuildFailed {
                    message: format!("step {} ({kind}) failed", i + 1),
                    last_lines: emitted[start..].to_vec(),
                });
            }
        }
        let files = Arc::new(Self::snapshot_context(context)?);
        let image_id = format!("sha256:{}", sha256_hex(recipe.as_bytes()));
        let mut st = self.state.lock().unwrap();
        st.images.insert(key.clone(), SimImage { image_id: image_id.clone(), recipe: recipe.0.clone(), files });
        st.ledger.push(LedgerEntry::Build { image: key, image_id: image_id.clone() });
        Ok(BuildResult { image_id: Some(image_id), log_line_count: total, success: true })
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut SimSession) -> Result<T>) -> Result<T> {
        let mut st = self.state.lock().unwrap();
        let s = st.sessions.get_mut(id).ok_or_else(|| RuntimeError::UnknownSession(id.to_owned()))?;
        f(s)
    }

    fn install_image(&self, archive: ImageArchive) -> ImageRef {
        let mut st = self.state.lock().unwrap();
        let key = archive.reference.to_string();
        st.images.insert(
            key.clone(),
            SimImage { image_id: archive.image_id.clone(), recipe: archive.recipe, files: Arc::new(archive.files) },
        );
        st.ledger.push(LedgerEntry::Import { image: key, image_id: archive.image_id });
        archive.reference
    }

    fn archive_of(&self, image: &ImageRef) -> Result<ImageArchive> {
        let st = self.state.lock().unwrap();
        let img = st.images.get(&image.to_string()).ok_or_else(|| RuntimeError::ImageNotFound(image.to_string()))?;
        Ok(ImageArchive {
            reference: image.clone(),
            image_id: img.image_id.clone(),
            recipe: img.recipe.clone(),
            files: (*img.files).clone(),
        })
    }
}

/// Filesystem view of one sim session.
pub struct SimFs<'a> {
    mounts: &'a [MountSpec],
    overlay: &'a mut BTreeMap<String, Vec<u8>>,
    image_files: &'a BTreeMap<String, Vec<u8>>,
}

enum Resolved<'m> {
    Mount { mount: &'m MountSpec, host: PathBuf },
    Container(String),
}

fn under(path: &str, prefix: &str) -> Option<String> {
    let prefix = prefix.trim_end_matches('/');
    if path == prefix {
        Some(String::new())
    } else {
        path.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')).map(str::to_owned)
    }
}

/// Rejects host paths that pass through a symlink below the mount root.
fn check_no_symlinks(root: &Path, rel: &str) -> Result<()> {
    let mut cur = root.to_path_buf();
    for part in rel.split('/').filter(|p| !p.is_empty()) {
        cur.push(part);
        match std::fs::symlink_metadata(&cur) {
            Ok(m) if m.file_type().is_symlink() => {
                return Err(RuntimeError::PathEscape(cur.display().to_string()));
            }
            Ok(_) => {}
            Err(_) => break,
        }
    }
    Ok(())
}

impl<'a> SimFs<'a> {
    fn resolve(&self, path: &str) -> Result<Resolved<'a>> {
        let path = normalize_container_path(path)?;
        let mounts: &'a [MountSpec] = self.mounts;
        let best = mounts
            .iter()
            .filter_map(|m| under(&path, &m.container_path).map(|rest| (m, rest)))
            .max_by_key(|(m, _)| m.container_path.len());
        match best {
            Some((mount, rest)) => {
                check_no_symlinks(&mount.host_path, &rest)?;
                let host = if rest.is_empty() { mount.host_path.clone() } else { mount.host_path.join(&rest) };
                Ok(Resolved::Mount { mount, host })
            }
            None => Ok(Resolved::Container(path)),
        }
    }

    pub fn read(&self, path: &str) -> Result<Vec<u8>> {
        match self.resolve(path)? {
            Resolved::Mount { host, .. } => std::fs::read(&host).map_err(|_| RuntimeError::FileNotFound(path.to_owned())),
            Resolved::Container(p) => self
                .overlay
                .get(&p)
                .or_else(|| self.image_files.get(&p))
                .cloned()
                .ok_or_else(|| RuntimeError::FileNotFound(path.to_owned())),
        }
    }

    pub fn exists(&self, path: &str) -> bool {
        self.read(path).is_ok()
    }

    pub fn write(&mut self, path: &str, bytes: &[u8]) -> Result<()> {
        match self.resolve(path)? {
            Resolved::Mount { mount, host } => {
                if mount.read_only {
                    return Err(RuntimeError::ReadOnly(path.to_owned()));
                }
                if host == mount.host_path {
                    return Err(RuntimeError::Io(format!("{path} is a directory")));
                }
                if let Some(parent) = host.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&host, bytes)?;
                Ok(())
            }
            Resolved::Container(p) => {
                self.overlay.insert(p, bytes.to_vec());
                Ok(())
            }
        }
    }

    /// All files under `prefix`, as sorted absolute container paths.
    pub fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let prefix = normalize_container_path(prefix)?;
        let mut out: BTreeMap<String, ()> = BTreeMap::new();
        let shadowed = |p: &str| self.mounts.iter().any(|m| under(p, &m.container_path).is_some());
        for p in self.image_files.keys().chain(self.overlay.keys()) {
            if under(p, &prefix).is_some() && !shadowed(p) {
                out.insert(p.clone(), ());
            }
        }
        for m in self.mounts {
            // Only mounts that intersect the prefix.
            if under(&m.container_path, &prefix).is_none() && under(&prefix, &m.container_path).is_none() {
                continue;
            }
            for entry in walkdir::WalkDir::new(&m.host_path).follow_links(false).into_iter().flatten() {
                if !entry.file_type().is_file() {
                    continue;
                }
                let rel = entry.path().strip_prefix(&m.host_path).expect("under mount");
                let p = format!("{}/{}", m.container_path.trim_end_matches('/'), rel.to_string_lossy());
                if under(&p, &prefix).is_some() {
                    out.insert(p, ());
                }
            }
        }
        Ok(out.into_keys().collect())
    }
}

fn require_up(s: &SimSession) -> Result<()> {
    if s.handle.status == SessionStatus::Up {
        Ok(())
    } else {
        Err(RuntimeError::NotUp(s.handle.session_id.clone()))
    }
}

#[async_trait]
impl RuntimeAdapter for SimRuntime {
    fn backend_name(&self) -> &'static str {
        "sim"
    }

    async fn build_image(&self, recipe: &RecipeText, context: &Path, image: &ImageRef, logs: LogSink<'_>) -> Result<BuildResult> {
        let key = image.to_string();
        // Concurrent builds of one reference coalesce onto the first caller.
        let (tx, mut rx) = {
            let mut inflight = self.inflight.lock().unwrap();
            match inflight.get(&key) {
                Some(rx) => (None, rx.clone()),
                None => {
                    let (tx, rx) = watch::channel(None);
                    inflight.insert(key.clone(), rx.clone());
                    (Some(tx), rx)
                }
            }
        };
        match tx {
            None => {
                let outcome = rx
                    .wait_for(Option::is_some)
                    .await
                    .map_err(|_| RuntimeError::BuildFailed { message: "coalesced build vanished".into(), last_lines: vec![] })?;
                outcome.clone().expect("checked is_some")
            }
            Some(tx) => {
                let result = self.run_build(recipe, context, image, logs).await;
                self.inflight.lock().unwrap().remove(&key);
                let _ = tx.send(Some(result.clone()));
                result
            }
        }
    }

    async fn image_id(&self, image: &ImageRef) -> Result<Option<String>> {
        Ok(self.state.lock().unwrap().images.get(&image.to_string()).map(|i| i.image_id.clone()))
    }

    async fn create_session(&self, image: &ImageRef, limits: ResourceLimits, request: SessionRequest) -> Result<SessionHandle> {
        limits.validate().map_err(|e| RuntimeError::ResourceDenied(e.to_string()))?;
        let cfg = self.config.read().unwrap().clone();
        if limits.cpu_cores > cfg.max_session.cpu_cores || limits.memory_bytes > cfg.max_session.memory_bytes {
            return Err(RuntimeError::ResourceDenied(format!(
                "requested {} cores / {} bytes exceeds capacity",
                limits.cpu_cores, limits.memory_bytes
            )));
        }
        let mut mounts = Vec::with_capacity(request.mounts.len());
        for m in request.mounts {
            if !m.host_path.is_dir() {
                return Err(RuntimeError::StartFailed(format!("host path {} does not exist", m.host_path.display())));
            }
            let container_path = normalize_container_path(&m.container_path)?;
            mounts.push(MountSpec { container_path, ..m });
        }
        let mut st = self.state.lock().unwrap();
        let img = st.images.get(&image.to_string()).ok_or_else(|| RuntimeError::ImageNotFound(image.to_string()))?;
        let image_files = img.files.clone();
        if cfg.fail_start {
            return Err(RuntimeError::StartFailed("injected start failure".into()));
        }
        st.next_session += 1;
        let n = st.next_session;
        let session_id = format!("sim-{n:06}");
        let port = u32::from(cfg.port_base) + (n as u32 - 1);
        let handle = SessionHandle {
            session_id: session_id.clone(),
            image_ref: image.clone(),
            internal_endpoint: format!("127.0.0.1:{port}"),
            status: SessionStatus::Up,
        };
        st.sessions.insert(
            session_id.clone(),
            SimSession {
                handle: handle.clone(),
                limits,
                mounts,
                env: request.env,
                overlay: BTreeMap::new(),
                image_files,
                trace: vec![SessionStatus::Starting, SessionStatus::Up],
            },
        );
        st.ledger.push(LedgerEntry::SessionCreated { session_id, image: image.to_string() });
        Ok(handle)
    }

    async fn session(&self, session_id: &str) -> Result<SessionHandle> {
        self.with_session(session_id, |s| Ok(s.handle.clone()))
    }

    async fn stop_session(&self, session_id: &str) -> Result<SessionHandle> {
        let mut st = self.state.lock().unwrap();
        let s = st.sessions.get_mut(session_id).ok_or_else(|| RuntimeError::UnknownSession(session_id.to_owned()))?;
        if s.handle.status == SessionStatus::Stopped {
            return Ok(s.handle.clone());
        }
        s.handle.status = SessionStatus::Stopped;
        s.trace.push(SessionStatus::Stopped);
        let handle = s.handle.clone();
        st.ledger.push(LedgerEntry::SessionStopped { session_id: session_id.to_owned() });
        Ok(handle)
    }

    async fn destroy_session(&self, session_id: &str) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        st.sessions.remove(session_id).ok_or_else(|| RuntimeError::UnknownSession(session_id.to_owned()))?;
        st.ledger.push(LedgerEntry::SessionDestroyed { session_id: session_id.to_owned() });
        Ok(())
    }

    async fn exec(&self, session_id: &str, argv: &[String]) -> Result<ExecOutput> {
        let command = argv.join(" ");
        let program = self.programs.read().unwrap().get(&command).cloned();
        let mut st = self.state.lock().unwrap();
        let s = st.sessions.get_mut(session_id).ok_or_else(|| RuntimeError::UnknownSession(session_id.to_owned()))?;
        require_up(s)?;
        let mut fs = SimFs { mounts: &s.mounts, overlay: &mut s.overlay, image_files: &s.image_files };
        let out = match program {
            None => ExecOutput { exit_code: 127, output: format!("{}: command not found", argv.first().map(String::as_str).unwrap_or("")) },
            Some(_) if argv.get(1).is_some_and(|p| p.starts_with('/') && !fs.exists(p)) => {
                ExecOutput { exit_code: 127, output: format!("{}: No such file or directory", argv[1]) }
            }
            Some(p) => match p(&mut fs) {
                Ok(output) => ExecOutput { exit_code: 0, output },
                Err(output) => ExecOutput { exit_code: 1, output },
            },
        };
        st.ledger.push(LedgerEntry::Exec { session_id: session_id.to_owned(), command, exit_code: out.exit_code });
        Ok(out)
    }

    async fn write_file(&self, session_id: &str, container_path: &str, bytes: &[u8]) -> Result<()> {
        self.with_session(session_id, |s| {
            require_up(s)?;
            SimFs { mounts: &s.mounts, overlay: &mut s.overlay, image_files: &s.image_files }.write(container_path, bytes)
        })
    }

    async fn read_file(&self, session_id: &str, container_path: &str) -> Result<Vec<u8>> {
        self.with_session(session_id, |s| {
            SimFs { mounts: &s.mounts, overlay: &mut s.overlay, image_files: &s.image_files }.read(container_path)
        })
    }

    async fn export_image(&self, image: &ImageRef, out: &Path) -> Result<u64> {
        let bytes = write_image_layout(&self.archive_of(image)?);
        std::fs::write(out, &bytes)?;
        self.state.lock().unwrap().ledger.push(LedgerEntry::Export { image: image.to_string() });
        Ok(bytes.len() as u64)
    }

    async fn import_image(&self, archive: &Path) -> Result<ImageRef> {
        if self.config.read().unwrap().fail_import {
            return Err(RuntimeError::ImportFailed("injected import failure".into()));
        }
        let bytes = std::fs::read(archive)?;
        let parsed = read_image_layout(&bytes)?;
        Ok(self.install_image(parsed))
    }

    async fn push_image(&self, image: &ImageRef, registry_url: &str, _credentials: Option<&RegistryCredentials>) -> Result<PushReceipt> {
        let archive = self.archive_of(image)?;
        {
            let cfg = self.config.read().unwrap();
            if cfg.registry_unreachable {
                return Err(RuntimeError::RegistryUnreachable(registry_url.to_owned()));
            }
            if cfg.push_auth_fails {
                return Err(RuntimeError::AuthFailed);
            }
        }
        let remote = remote_reference(image, registry_url);
        if let Some(reg) = &self.registry {
            reg.images.lock().unwrap().insert(remote.clone(), write_image_layout(&archive));
        }
        self.state.lock().unwrap().ledger.push(LedgerEntry::Push {
            image: image.to_string(),
            registry_url: registry_url.to_owned(),
            remote_reference: remote.clone(),
        });
        Ok(PushReceipt { remote_reference: remote, registry_url: registry_url.to_owned(), image_id: archive.image_id })
    }

    async fn pull_image(&self, remote: &str) -> Result<ImageRef> {
        if self.config.read().unwrap().registry_unreachable {
            return Err(RuntimeError::RegistryUnreachable(remote.to_owned()));
        }
        let bytes = self
            .registry
            .as_ref()
            .and_then(|r| r.images.lock().unwrap().get(remote).cloned())
            .ok_or_else(|| RuntimeError::ImageNotFound(remote.to_owned()))?;
        let mut parsed = read_image_layout(&bytes)?;
        if let Some(local) = local_ref_from_remote(remote) {
            parsed.reference = local;
        }
        self.state.lock().unwrap().ledger.push(LedgerEntry::Pull { remote_reference: remote.to_owned() });
        Ok(self.install_image(parsed))
    }

    async fn forward_http(&self, session_id: &str, request: ProxyRequest) -> Result<ProxyResponse> {
        let (image, endpoint) = self.with_session(session_id, |s| {
            require_up(s)?;
            Ok((s.handle.image_ref.to_string(), s.handle.internal_endpoint.clone()))
        })?;
        let body = format!(
            "<!doctype html>\n<html><head><title>rrp sim session</title></head><body>\
             <h1>Simulated session {session_id}</h1><p>image {image} at {endpoint}</p>\
             <p>{} {}</p></body></html>\n",
            request.method, request.path_and_query
        );
        Ok(ProxyResponse {
            status: 200,
            headers: vec![("content-type".into(), "text/html; charset=utf-8".into())],
            body: body.into_bytes(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::GIB;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn recipe(steps: usize) -> RecipeText {
        let mut s = format!("# rrp-spec-digest: {}\n", "a".repeat(64));
        for i in 0..steps {
            s.push_str(&format!("\n# step: Step{i}\nRUN true\n"));
        }
        RecipeText(s)
    }

    fn img() -> ImageRef {
        ImageRef { repository: "rrp/demo".into(), tag: "aaaaaaaaaaaa".into() }
    }

    fn context() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("analyze.sh"), "echo\n").unwrap();
        std::fs::create_dir(d.path().join(".git")).unwrap();
        std::fs::write(d.path().join(".git/HEAD"), "x").unwrap();
        d
    }

    fn noop(_: &str) {}

    #[tokio::test]
    async fn build_emits_one_line_per_step() {
        let sim = SimRuntime::default();
        let ctx = context();
        let lines = Mutex::new(Vec::new());
        let sink = |l: &str| lines.lock().unwrap().push(l.to_owned());
        let r = sim.build_image(&recipe(4), ctx.path(), &img(), &sink).await.unwrap();
        assert!(r.success);
        assert_eq!(r.log_line_count, 4);
        assert_eq!(r.image_id.as_deref().unwrap(), format!("sha256:{}", sha256_hex(recipe(4).as_bytes())));
        assert_eq!(lines.lock().unwrap().len(), 4);
        assert_eq!(sim.image_id(&img()).await.unwrap(), r.image_id);
    }

    #[tokio::test]
    async fn build_is_deterministic() {
        let sim = SimRuntime::default();
        let ctx = context();
        let a = sim.build_image(&recipe(3), ctx.path(), &img(), &noop).await.unwrap();
        let b = sim.build_image(&recipe(3), ctx.path(), &img(), &noop).await.unwrap();
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(sim.build_count(), 2);
    }

    #[tokio::test]
    async fn injected_build_failure() {
        let sim = SimRuntime::new(SimConfig { fail_build_at_step: Some(2), ..Default::default() });
        let ctx = context();
        let count = AtomicUsize::new(0);
        let sink = |_: &str| {
            count.fetch_add(1, Ordering::SeqCst);
        };
        let err = sim.build_image(&recipe(5), ctx.path(), &img(), &sink).await.unwrap_err();
        match err {
            RuntimeError::BuildFailed { last_lines, .. } => assert_eq!(last_lines.len(), 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(count.load(Ordering::SeqCst), 2);
        assert_eq!(sim.image_id(&img()).await.unwrap(), None);
    }

    #[tokio::test]
    async fn concurrent_builds_of_one_ref_coalesce() {
        let sim = Arc::new(SimRuntime::default());
        let ctx = context();
        let r = recipe(20);
        let image = img();
        let futs = (0..4).map(|_| sim.build_image(&r, ctx.path(), &image, &noop));
        let results = futures::future::join_all(futs).await;
        assert!(results.iter().all(|r| r.as_ref().unwrap().success));
        assert_eq!(sim.build_count(), 1);
    }

    async fn built() -> (SimRuntime, tempfile::TempDir) {
        let sim = SimRuntime::default();
        let ctx = context();
        sim.build_image(&recipe(2), ctx.path(), &img(), &noop).await.unwrap();
        (sim, ctx)
    }

    #[tokio::test]
    async fn sessions_record_limits_and_lifecycle() {
        let (sim, _ctx) = built().await;
        let limits = ResourceLimits::new(1.0, GIB).unwrap();
        let h = sim.create_session(&img(), limits, SessionRequest::default()).await.unwrap();
        assert_eq!(h.status, SessionStatus::Up);
        assert_eq!(sim.session_info(&h.session_id).unwrap().limits, limits);

        let stopped = sim.stop_session(&h.session_id).await.unwrap();
        assert_eq!(stopped.status, SessionStatus::Stopped);
        let again = sim.stop_session(&h.session_id).await.unwrap();
        assert_eq!(again.status, SessionStatus::Stopped);
        assert_eq!(
            sim.session_info(&h.session_id).unwrap().status_trace,
            vec![SessionStatus::Starting, SessionStatus::Up, SessionStatus::Stopped]
        );
        sim.destroy_session(&h.session_id).await.unwrap();
        assert!(matches!(sim.destroy_session(&h.session_id).await, Err(RuntimeError::UnknownSession(_))));
        assert!(matches!(sim.stop_session("nope").await, Err(RuntimeError::UnknownSession(_))));

        let h2 = sim.create_session(&img(), limits, SessionRequest::default()).await.unwrap();
        assert_ne!(h2.session_id, h.session_id, "ids are never reused");
        assert_ne!(h2.internal_endpoint, h.internal_endpoint);
    }

    #[tokio::test]
    async fn unknown_image_and_capacity() {
        let (sim, _ctx) = built().await;
        let other = ImageRef { repository: "rrp/other".into(), tag: "x".into() };
        assert!(matches!(
            sim.create_session(&other, ResourceLimits::default(), SessionRequest::default()).await,
            Err(RuntimeError::ImageNotFound(_))
        ));
        let huge = ResourceLimits { cpu_cores: 1000.0, memory_bytes: GIB };
        assert!(matches!(
            sim.create_session(&img(), huge, SessionRequest::default()).await,
            Err(RuntimeError::ResourceDenied(_))
        ));
        sim.configure(|c| c.fail_start = true);
        assert!(matches!(
            sim.create_session(&img(), ResourceLimits::default(), SessionRequest::default()).await,
            Err(RuntimeError::StartFailed(_))
        ));
    }

    #[tokio::test]
    async fn read_only_mounts_deny_writes() {
        let (sim, _ctx) = built().await;
        let data = tempfile::tempdir().unwrap();
        std::fs::write(data.path().join("a.bin"), [1, 2, 3]).unwrap();
        let results = tempfile::tempdir().unwrap();
        let req = SessionRequest {
            mounts: vec![
                MountSpec::new(data.path(), "/openbis/raw_data", true),
                MountSpec::new(results.path(), "/results", false),
            ],
            ..Default::default()
        };
        let h = sim.create_session(&img(), ResourceLimits::default(), req).await.unwrap();
        let id = &h.session_id;
        assert!(matches!(sim.write_file(id, "/openbis/raw_data/a.bin", b"x").await, Err(RuntimeError::ReadOnly(_))));
        assert!(matches!(sim.write_file(id, "/openbis/raw_data/new.bin", b"x").await, Err(RuntimeError::ReadOnly(_))));
        assert!(matches!(sim.write_file(id, "/results/../openbis/raw_data/a.bin", b"x").await, Err(RuntimeError::ReadOnly(_))));
        assert_eq!(std::fs::read(data.path().join("a.bin")).unwrap(), vec![1, 2, 3]);

        sim.write_file(id, "/results/sub/out.txt", b"ok").await.unwrap();
        assert_eq!(std::fs::read(results.path().join("sub/out.txt")).unwrap(), b"ok");
        assert_eq!(sim.read_file(id, "/openbis/raw_data/a.bin").await.unwrap(), vec![1, 2, 3]);
        assert_eq!(sim.read_file(id, "/project/analyze.sh").await.unwrap(), b"echo\n");
        assert!(sim.read_file(id, "/project/.git/HEAD").await.is_err(), ".git is not part of the image");

        sim.write_file(id, "/tmp/scratch", b"t").await.unwrap();
        assert_eq!(sim.read_file(id, "/tmp/scratch").await.unwrap(), b"t");
    }

    #[cfg(unix)]
    #[tokio::test]
    async fn symlinks_inside_mounts_cannot_redirect_writes() {
        let (sim, _ctx) = built().await;
        let results = tempfile::tempdir().unwrap();
        let outside = tempfile::tempdir().unwrap();
        std::os::unix::fs::symlink(outside.path(), results.path().join("link")).unwrap();
        let req = SessionRequest { mounts: vec![MountSpec::new(results.path(), "/results", false)], ..Default::default() };
        let h = sim.create_session(&img(), ResourceLimits::default(), req).await.unwrap();
        assert!(matches!(sim.write_file(&h.session_id, "/results/link/x", b"x").await, Err(RuntimeError::PathEscape(_))));
        assert!(!outside.path().join("x").exists());
    }

    #[tokio::test]
    async fn exec_dispatches_registered_programs() {
        let (sim, _ctx) = built().await;
        let results = tempfile::tempdir().unwrap();
        sim.register_program(
            "sh /project/analyze.sh",
            Arc::new(|fs: &mut SimFs<'_>| {
                let n = fs.list("/project").map_err(|e| e.to_string())?.len();
                fs.write("/results/n.txt", n.to_string().as_bytes()).map_err(|e| e.to_string())?;
                Ok("done".into())
            }),
        );
        sim.register_program("sh /project/missing.sh", Arc::new(|_: &mut SimFs<'_>| Ok(String::new())));
        let req = SessionRequest { mounts: vec![MountSpec::new(results.path(), "/results", false)], ..Default::default() };
        let h = sim.create_session(&img(), ResourceLimits::default(), req).await.unwrap();
        let argv = |s: &str| s.split(' ').map(str::to_owned).collect::<Vec<_>>();
        let out = sim.exec(&h.session_id, &argv("sh /project/analyze.sh")).await.unwrap();
        assert_eq!(out.exit_code, 0);
        assert_eq!(std::fs::read_to_string(results.path().join("n.txt")).unwrap(), "1");
        assert_eq!(sim.exec(&h.session_id, &argv("sh /project/missing.sh")).await.unwrap().exit_code, 127);
        assert_eq!(sim.exec(&h.session_id, &argv("python3 x.py")).await.unwrap().exit_code, 127);

        sim.stop_session(&h.session_id).await.unwrap();
        assert!(matches!(sim.exec(&h.session_id, &argv("sh /project/analyze.sh")).await, Err(RuntimeError::NotUp(_))));
    }

    #[tokio::test]
    async fn export_import_round_trip() {
        let (sim, _ctx) = built().await;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.tar");
        sim.export_image(&img(), &path).await.unwrap();

        let other = SimRuntime::default();
        let r = other.import_image(&path).await.unwrap();
        assert_eq!(r, img());
        assert_eq!(other.image_id(&r).await.unwrap(), sim.image_id(&img()).await.unwrap());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(other.import_image(&path).await, Err(RuntimeError::CorruptArchive(_))));

        let missing = ImageRef { repository: "rrp/none".into(), tag: "x".into() };
        assert!(matches!(sim.export_image(&missing, &path).await, Err(RuntimeError::ImageNotFound(_))));

        other.configure(|c| c.fail_import = true);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(other.import_image(&path).await, Err(RuntimeError::ImportFailed(_))));
    }

    #[tokio::test]
    async fn push_ledger_and_faults() {
        let registry = SimRegistry::new();
        let sim = SimRuntime::default().with_registry(registry.clone());
        let ctx = context();
        sim.build_image(&recipe(2), ctx.path(), &img(), &noop).await.unwrap();
        let a = sim.push_image(&img(), "https://registry.example.org", None).await.unwrap();
        let b = sim.push_image(&img(), "https://registry.example.org", None).await.unwrap();
        assert_eq!(a.remote_reference, b.remote_reference);
        assert_eq!(sim.push_count(), 2);
        assert!(registry.contains(&a.remote_reference));
        assert!(sim.ledger().iter().any(|e| matches!(e,
            LedgerEntry::Push { registry_url, .. } if registry_url == "https://registry.example.org")));

        let puller = SimRuntime::default().with_registry(registry);
        let pulled = puller.pull_image(&a.remote_reference).await.unwrap();
        assert_eq!(pulled, img());
        assert_eq!(puller.image_id(&pulled).await.unwrap(), Some(a.image_id.clone()));

        sim.configure(|c| c.push_auth_fails = true);
        assert_eq!(sim.push_image(&img(), "https://r", None).await.unwrap_err(), RuntimeError::AuthFailed);
    }

    #[tokio::test]
    async fn identical_call_sequences_give_identical_ledgers() {
        async fn run() -> (Vec<LedgerEntry>, Vec<SessionStatus>) {
            let sim = SimRuntime::default();
            let ctx = context();
            sim.build_image(&recipe(3), ctx.path(), &img(), &noop).await.unwrap();
            let h = sim.create_session(&img(), ResourceLimits::default(), SessionRequest::default()).await.unwrap();
            sim.stop_session(&h.session_id).await.unwrap();
            let trace = sim.session_info(&h.session_id).unwrap().status_trace;
            sim.destroy_session(&h.session_id).await.unwrap();
            (sim.ledger(), trace)
        }
        assert_eq!(run().await, run().await);
    }

    #[tokio::test]
    async fn canned_proxy_page() {
        let (sim, _ctx) = built().await;
        let h = sim.create_session(&img(), ResourceLimits::default(), SessionRequest::default()).await.unwrap();
        let resp = sim
            .forward_http(
                &h.session_id,
                ProxyRequest { method: "GET".into(), path_and_query: "/session/p/".into(), headers: vec![], body: vec![] },
            )
            .await
            .unwrap();
        assert_eq!(resp.status, 200);
        assert!(String::from_utf8(resp.body).unwrap().contains(&h.session_id));
    }
}
