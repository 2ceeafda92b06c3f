//! Randomized command sequences against the orchestrator.
//!
//! Drives a [`DemoPlatform`] on the simulated runtime with random
//! interleavings of lifecycle, share, archive and results commands, including
//! hostile result file names and symlinks written from inside sessions. After
//! every command the touched project is checked for:
//!
//! - status edges outside [`transition_allowed`] (read back from the journal),
//! - journal sequences that are not gapless from 1,
//! - record invariants (`Running` iff a session, an image once built),
//! - result entries or result reads that resolve outside `results/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use futures::FutureExt;
use futures::StreamExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::demo::{self, DemoError, DemoPlatform};
use crate::orchestrator::{
    transition_allowed, Caller, EventKind, JournalItem, OrchestratorError, ProjectRecord, ProjectStatus,
};
use crate::project::git;

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub sequences: usize,
    /// Commands per sequence are drawn from `1..=max_len`.
    pub max_len: usize,
    pub seed: u64,
    /// Upper bound on live projects; creates beyond it turn into deletes.
    pub max_live: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self { sequences: 10_000, max_len: 6, seed: 0x00F0_22ED, max_live: 5 }
    }
}

#[derive(Debug, Default, Clone)]
pub struct FuzzReport {
    pub sequences: usize,
    pub commands: usize,
    pub transitions_checked: usize,
    pub events_checked: usize,
    pub projects: usize,
    /// Per command: (succeeded, rejected).
    pub outcomes: BTreeMap<&'static str, (usize, usize)>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    Create,
    Start,
    Stop,
    Delete,
    Share,
    OpenShare,
    Archive,
    RunWorkload,
    HostileWrite,
    SessionWrite,
    ListResults,
    ReadResult,
    Upload,
    Edit,
    Commit,
    Route,
    Settle,
}

const WEIGHTS: &[(Command, u32)] = &[
    (Command::Create, 6),
    (Command::Start, 220),
    (Command::Stop, 180),
    (Command::Delete, 8),
    (Command::Share, 10),
    (Command::OpenShare, 3),
    (Command::Archive, 6),
    (Command::RunWorkload, 80),
    (Command::HostileWrite, 80),
    (Command::SessionWrite, 80),
    (Command::ListResults, 100),
    (Command::ReadResult, 80),
    (Command::Upload, 10),
    (Command::Edit, 10),
    (Command::Commit, 10),
    (Command::Route, 60),
    (Command::Settle, 30),
];

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Create => "create",
            Command::Start => "start",
            Command::Stop => "stop",
            Command::Delete => "delete",
            Command::Share => "share",
            Command::OpenShare => "open_share",
            Command::Archive => "archive",
            Command::RunWorkload => "run",
            Command::HostileWrite => "hostile_write",
            Command::SessionWrite => "session_write",
            Command::ListResults => "list_results",
            Command::ReadResult => "read_result",
            Command::Upload => "upload",
            Command::Edit => "edit",
            Command::Commit => "commit",
            Command::Route => "route",
            Command::Settle => "settle",
        }
    }
}

const HOSTILE_PATHS: &[&str] = &[
    "../../etc/passwd",
    "/etc/passwd",
    "..",
    ".",
    "",
    "out/../../project/analyze.sh",
    "link/secret",
    "link",
    "dirlink/passwd",
    "nested/../../x",
];
const SAFE_PATHS: &[&str] = &["out.csv", "a.txt", "nested/b.txt", "./a.txt"];

/// Per-project view reconstructed from the journal.
#[derive(Debug, Clone)]
struct Tracked {
    id: String,
    owner: usize,
    next_sequence: u64,
    status: ProjectStatus,
}

struct Fuzzer {
    platform: DemoPlatform,
    callers: Vec<Caller>,
    rng: ChaCha8Rng,
    projects: Vec<Tracked>,
    shares: Vec<String>,
    outside: PathBuf,
    report: FuzzReport,
    names: usize,
}

pub async fn run_state_machine_fuzz(root: &Path, cfg: &FuzzConfig) -> Result<FuzzReport, DemoError> {
    let platform = DemoPlatform::start(root).await?;
    let collaborator = platform.collaborator().await?;
    let outside = root.join("outside");
    std::fs::create_dir_all(&outside)?;
    std::fs::write(outside.join("secret"), b"outside the results tree\n")?;
    let callers = vec![platform.caller.clone(), collaborator];
    let mut f = Fuzzer {
        platform,
        callers,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        projects: Vec::new(),
        shares: Vec::new(),
        outside,
        report: FuzzReport::default(),
        names: 0,
    };
    let total: u32 = WEIGHTS.iter().map(|(_, w)| w).sum();
    for seq in 0..cfg.sequences {
        let len = f.rng.random_range(1..=cfg.max_len);
        for step in 0..len {
            let mut pick = f.rng.random_range(0..total);
            let mut cmd = Command::Create;
            for (c, w) in WEIGHTS {
                if pick < *w {
                    cmd = *c;
                    break;
                }
                pick -= w;
            }
            if f.projects.is_empty() {
                cmd = Command::Create;
            }
            let live = f.live_count();
            if cmd == Command::Create && live >= cfg.max_live {
                cmd = Command::Delete;
            }
            // Mostly aim at live projects; deleted ones still get the odd command.
            let live_idx: Vec<usize> =
                (0..f.projects.len()).filter(|i| f.projects[*i].status != ProjectStatus::Deleted).collect();
            let target = if !live_idx.is_empty() && f.rng.random_bool(0.9) {
                live_idx[f.rng.random_range(0..live_idx.len())]
            } else {
                f.rng.random_range(0..f.projects.len().max(1))
            };
            let ok = f.apply(cmd, target).await.map_err(|e| format!("sequence {seq} step {step} {}: {e}", cmd.name()))?;
            let entry = f.report.outcomes.entry(cmd.name()).or_default();
            if ok {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
            f.report.commands += 1;
            if let Some(t) = f.projects.get(target).cloned() {
                f.check_project(&t, &format!("sequence {seq} step {step} ({})", cmd.name()));
            }
        }
        f.report.sequences += 1;
    }

    // Let background pipelines finish, then audit every project end to end.
    for i in 0..f.projects.len() {
        let t = f.projects[i].clone();
        let caller = f.callers[t.owner].clone();
        let _ = f.platform.orchestrator.wait_settled(&caller, &t.id).await;
        f.check_project(&t, "final audit");
    }
    let running = f
        .projects
        .iter()
        .filter(|t| {
            let caller = &f.callers[t.owner];
            f.platform.orchestrator.get_project(caller, &t.id).map(|r| r.status == ProjectStatus::Running).unwrap_or(false)
        })
        .count();
    let live_sessions = f.platform.sim.as_ref().map(|s| s.live_sessions().len()).unwrap_or(running);
    if live_sessions != running {
        f.violations(format!("{live_sessions} live sessions for {running} running projects"));
    }
    f.report.projects = f.projects.len();
    Ok(f.report)
}

impl Fuzzer {
    fn violations(&mut self, msg: String) {
        if self.report.violations.len() < 100 {
            self.report.violations.push(msg);
        }
    }

    fn live_count(&self) -> usize {
        self.projects.iter().filter(|t| t.status != ProjectStatus::Deleted).count()
    }

    fn record(&self, t: &Tracked) -> Option<ProjectRecord> {
        self.platform.orchestrator.get_project(&self.callers[t.owner], &t.id).ok()
    }

    /// Runs one command; `Ok(true)` when the orchestrator accepted it.
    async fn apply(&mut self, cmd: Command, target: usize) -> Result<bool, DemoError> {
        let o = self.platform.orchestrator.clone();
        if cmd == Command::Create {
            let owner = self.rng.random_range(0..self.callers.len());
            self.names += 1;
            let caller = self.callers[owner].clone();
            let rec = o.create_project(&caller, self.platform.source(), &format!("p{}", self.names)).await?;
            // Usually let the pipeline finish; otherwise the following
            // commands race against it.
            if self.rng.random_bool(0.8) {
                o.wait_settled(&caller, &rec.project_id).await?;
            }
            self.projects.push(Tracked { id: rec.project_id, owner, next_sequence: 1, status: ProjectStatus::New });
            return Ok(true);
        }
        let t = self.projects[target].clone();
        let caller = self.callers[t.owner].clone();
        let id = t.id.as_str();
        let outcome: Result<(), OrchestratorError> = match cmd {
            Command::Create => unreachable!(),
            Command::Settle => o.wait_settled(&caller, id).await.map(drop),
            Command::Start => o.start_project(&caller, id, None).await.map(drop),
            Command::Stop => o.stop_project(&caller, id).await.map(drop),
            Command::Delete => o.delete_project(&caller, id).await.map(drop),
            Command::Share => match o.create_share(&caller, id).await {
                Ok(s) => {
                    self.shares.push(s.share_id);
                    Ok(())
                }
                Err(e) => Err(e),
            },
            Command::OpenShare => {
                if self.shares.is_empty() || self.live_count() >= 8 {
                    return Ok(false);
                }
                let share = self.shares[self.rng.random_range(0..self.shares.len())].clone();
                let owner = self.rng.random_range(0..self.callers.len());
                let rec = o.open_share(&self.callers[owner], &share).await?;
                let expected = o.get_share(&share)?;
                if rec.status == ProjectStatus::Ready
                    && (rec.commit_id() != Some(expected.commit_id.as_str())
                        || rec.image_ref.as_ref() != Some(&expected.image_ref)
                        || rec.spec.as_ref().map(|s| &s.spec_digest) != Some(&expected.spec_digest))
                {
                    self.violations(format!("open_share {share} diverged from its record"));
                }
                self.projects.push(Tracked { id: rec.project_id, owner, next_sequence: 1, status: ProjectStatus::New });
                Ok(())
            }
            Command::Archive => o.archive_project(&caller, id).await.map(drop),
            Command::RunWorkload => o.run_command(&caller, id, &demo::workload_command()).await.map(drop),
            Command::HostileWrite => {
                self.hostile_write(&t);
                Ok(())
            }
            Command::SessionWrite => {
                let Some(session) = self.record(&t).and_then(|r| r.session) else { return Ok(false) };
                let paths = ["/results/a.txt", "/results/nested/b.txt", "/results/../project/stray.txt", "/openbis/raw_data/x", "/results/sub/evil"];
                let path = paths[self.rng.random_range(0..paths.len())];
                let res = o.runtime().write_file(&session.session_id, path, b"written in session\n").await;
                if path.starts_with("/openbis") && res.is_ok() {
                    self.violations(format!("write to {path} succeeded on a read-only mount"));
                }
                return Ok(res.is_ok());
            }
            Command::ListResults => match o.list_results(&caller, id) {
                Ok(entries) => {
                    if let Some(rec) = self.record(&t) {
                        let root = rec.workspace.join("results");
                        for e in entries {
                            self.check_confined(&root, &e.relative_path, "list_results");
                        }
                    }
                    Ok(())
                }
                Err(e) => Err(e),
            },
            Command::ReadResult | Command::Upload => {
                let hostile = self.rng.random_bool(0.6);
                let pool = if hostile { HOSTILE_PATHS } else { SAFE_PATHS };
                let rel = pool[self.rng.random_range(0..pool.len())];
                let res = if cmd == Command::ReadResult {
                    o.read_result(&caller, id, rel).map(drop)
                } else {
                    o.upload_result(&caller, id, rel, BTreeMap::new()).await.map(drop)
                };
                if hostile && res.is_ok() {
                    self.violations(format!("{} accepted hostile path {rel:?}", cmd.name()));
                }
                res
            }
            Command::Edit | Command::Commit => {
                let Some(rec) = self.record(&t) else { return Ok(false) };
                let dir = rec.workspace.join("project");
                if !dir.join(".git").exists() || rec.status.is_in_flight() {
                    return Ok(false);
                }
                if cmd == Command::Edit {
                    std::fs::write(dir.join("NOTES.md"), format!("note {}\n", self.rng.random::<u32>()))?;
                } else {
                    git::commit_all(&dir, "fuzz commit")?;
                }
                Ok(())
            }
            Command::Route => {
                let res = o.route(&format!("/session/{id}/lab"));
                if let Some(rec) = self.record(&t) {
                    let running = rec.status == ProjectStatus::Running;
                    if running != res.is_ok() {
                        self.violations(format!("route of {id} in {} returned {res:?}", rec.status));
                    }
                }
                res.map(drop)
            }
        };
        Ok(outcome.is_ok())
    }

    /// What a hostile process inside the session could leave in `/results`.
    fn hostile_write(&mut self, t: &Tracked) {
        let Some(rec) = self.record(t) else { return };
        let results = rec.workspace.join("results");
        if !results.is_dir() {
            return;
        }
        let _ = match self.rng.random_range(0..5) {
            0 => std::os::unix::fs::symlink(&self.outside, results.join("link")),
            1 => std::os::unix::fs::symlink(self.outside.join("secret"), results.join("leak.txt")),
            2 => std::os::unix::fs::symlink("/etc", results.join("dirlink")),
            3 => std::fs::create_dir_all(results.join("nested")).and_then(|_| std::fs::write(results.join("nested/b.txt"), b"b")),
            _ => std::fs::write(results.join("..."), b"dots"),
        };
    }

    fn check_confined(&mut self, root: &Path, rel: &str, what: &str) {
        let Ok(canonical_root) = root.canonicalize() else { return };
        let ok = !rel.split('/').any(|c| c == ".." || c.is_empty())
            && root.join(rel).canonicalize().map(|p| p.starts_with(&canonical_root)).unwrap_or(false);
        if !ok {
            self.violations(format!("{what} returned {rel:?} outside {}", root.display()));
        }
    }

    /// Consumes new journal events of `t` and checks them and the record.
    fn check_project(&mut self, t: &Tracked, context: &str) {
        let caller = self.callers[t.owner].clone();
        let o = self.platform.orchestrator.clone();
        let Some(idx) = self.projects.iter().position(|p| p.id == t.id) else { return };
        let Ok(mut stream) = o.project_events(&caller, &t.id, self.projects[idx].next_sequence) else {
            self.violations(format!("{context}: journal of {} unavailable", t.id));
            return;
        };
        while let Some(Some(item)) = stream.next().now_or_never() {
            let tracked = &mut self.projects[idx];
            let event = match item {
                JournalItem::Event(e) => e,
                JournalItem::Gap { first_missing } => {
                    let msg = format!("{context}: gap at {first_missing} in {}", t.id);
                    self.violations(msg);
                    break;
                }
            };
            if event.sequence != tracked.next_sequence {
                let msg = format!("{context}: {} expected sequence {} got {}", t.id, tracked.next_sequence, event.sequence);
                self.violations(msg);
                break;
            }
            tracked.next_sequence += 1;
            self.report.events_checked += 1;
            if event.kind == EventKind::Status {
                let to: ProjectStatus = match event.payload.parse() {
                    Ok(s) => s,
                    Err(e) => {
                        self.violations(format!("{context}: {e}"));
                        continue;
                    }
                };
                let from = tracked.status;
                tracked.status = to;
                self.report.transitions_checked += 1;
                if !transition_allowed(from, to) {
                    self.violations(format!("{context}: undeclared transition {from} -> {to} in {}", t.id));
                }
            }
        }

        let Some(rec) = self.record(t) else { return };
        let journal_status = self.projects[idx].status;
        // The record may be one transition ahead of the journal read above.
        if rec.status != journal_status && !transition_allowed(journal_status, rec.status) {
            self.violations(format!("{context}: record {} but journal {}", rec.status, journal_status));
        }
        let up = rec.session.as_ref().map(|s| s.status == crate::runtime::SessionStatus::Up).unwrap_or(false);
        if (rec.status == ProjectStatus::Running) != up {
            self.violations(format!("{context}: {} is {} with session {:?}", t.id, rec.status, rec.session));
        }
        if matches!(rec.status, ProjectStatus::Ready | ProjectStatus::Running | ProjectStatus::Stopped) && rec.image_ref.is_none() {
            self.violations(format!("{context}: {} is {} without an image", t.id, rec.status));
        }
        if rec.status == ProjectStatus::Deleted && (rec.spec.is_some() || rec.image_ref.is_some() || !rec.name.is_empty()) {
            self.violations(format!("{context}: deleted {} kept more than its identity", t.id));
        }
    }
}
