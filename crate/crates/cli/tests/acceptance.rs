//! Acceptance suite: one line per criterion, `PASS`, `FAIL` or (for checks
//! that need a container daemon) `SKIP`. Exits nonzero when any check fails.
//!
//! Run alone with `cargo test -p rrp-cli --test acceptance`; a trailing
//! argument filters checks by name.

use std::fmt::Display;
use std::future::Future;
use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::pin::Pin;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::Method;
use rrp_api::types::CreateProjectRequest;
use rrp_api::{serve, ApiClient, ServeConfig};
use rrp_core::bundler::{
    export_player_bundle, export_player_script, play_script, verify_bundle, BundleError, HttpFetcher,
};
use rrp_core::config::PlannerConfig;
use rrp_core::demo::{self, DemoPlatform};
use rrp_core::digest::sha256_hex;
use rrp_core::fuzz::{run_state_machine_fuzz, FuzzConfig};
use rrp_core::orchestrator::{OrchestratorError, ProjectStatus};
use rrp_core::planner::{image_reference, plan_build, render_recipe};
use rrp_core::project::{git, parse_environment, spec_digest, ProjectSource, ProjectSpec, WorkingTree};
use rrp_core::rdms::{RdmsClient, DEMO_PASSWORD, DEMO_USER};
use rrp_core::runtime::{DockerRuntime, RuntimeAdapter, RuntimeError, SimConfig, SimRegistry, SimRuntime};

enum Verdict {
    Pass(String),
    Skip(String),
}

type Check = Result<Verdict, String>;
type CheckFn = fn() -> Pin<Box<dyn Future<Output = Check> + Send>>;

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: Display> Ctx<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const REGISTRY: &str = "http://registry.example:5000";

fn expected_hash() -> String {
    sha256_hex(demo::expected_demo_output(demo::DEFAULT_SEED).as_bytes())
}

fn sim_with(registry: &SimRegistry) -> Arc<SimRuntime> {
    let sim = Arc::new(SimRuntime::new(SimConfig::default()).with_registry(registry.clone()));
    demo::register_sim_programs(&sim);
    sim
}

/// Creates the demo project and waits for it to settle as Ready.
async fn ready_project(p: &DemoPlatform) -> Result<String, String> {
    let o = &p.orchestrator;
    let id = o.create_project(&p.caller, p.source(), "demo").await.ctx("create")?.project_id;
    let rec = o.wait_settled(&p.caller, &id).await.ctx("settle")?;
    ensure!(rec.status == ProjectStatus::Ready, "project ended {} ({:?})", rec.status, rec.failure);
    Ok(id)
}

/// Start, run the workload, stop. Returns the hash of the result file.
async fn run_once(p: &DemoPlatform, id: &str) -> Result<String, String> {
    let o = &p.orchestrator;
    o.start_project(&p.caller, id, None).await.ctx("start")?;
    let out = o.run_command(&p.caller, id, &demo::workload_command()).await.ctx("workload")?;
    ensure!(out.exit_code == 0, "workload exited {}: {}", out.exit_code, out.output);
    let rec = o.stop_project(&p.caller, id).await.ctx("stop")?;
    ensure!(rec.status == ProjectStatus::Stopped, "stop left {}", rec.status);
    let results = o.list_results(&p.caller, id).ctx("list_results")?;
    let entry = results.iter().find(|e| e.relative_path == demo::RESULT_FILE);
    entry.map(|e| e.content_hash.clone()).ok_or_else(|| format!("{} missing from {results:?}", demo::RESULT_FILE))
}

fn lifecycle() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let expected = expected_hash();
        let mut slowest = Duration::ZERO;
        for rep in 1..=50 {
            let dir = tempfile::tempdir().ctx("tempdir")?;
            let started = Instant::now();
            // Starting the demo platform registers the fixture dataset.
            let p = DemoPlatform::start(dir.path()).await.ctx("platform")?;
            let id = ready_project(&p).await.map_err(|e| format!("run {rep}: {e}"))?;
            let hash = run_once(&p, &id).await.map_err(|e| format!("run {rep}: {e}"))?;
            ensure!(hash == expected, "run {rep}: result hash {hash}, expected {expected}");
            let rec = p.orchestrator.get_project(&p.caller, &id).ctx("get")?;
            let sim = p.sim.as_ref().expect("sim platform");
            ensure!(rec.session.is_none() && sim.live_sessions().is_empty(), "run {rep}: results needed a live session");
            let elapsed = started.elapsed();
            ensure!(elapsed < Duration::from_secs(10), "run {rep} took {elapsed:?}");
            slowest = slowest.max(elapsed);
            p.rdms.shutdown().await;
        }
        Ok(Verdict::Pass(format!("50/50 runs reached Ready and produced {}; slowest {slowest:.2?}", demo::RESULT_FILE)))
    })
}

fn determinism() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let repo = dir.path().join("fixture");
        let commit = demo::write_fixture_repo(&repo, "http://127.0.0.1:8443", "20260101000000000-1").ctx("fixture")?;
        let cfg = PlannerConfig::default();
        let cycle = || -> Result<(Vec<u8>, String, String), String> {
            let tree = WorkingTree::open(&repo).ctx("open")?;
            let spec = ProjectSpec::load(ProjectSource::new(repo.to_string_lossy()), tree).ctx("parse")?;
            let plan = plan_build(&spec.environment, &spec.spec_digest, &cfg).ctx("plan")?;
            let recipe = render_recipe(&plan, &cfg);
            let image = image_reference("fixture", &spec.spec_digest).ctx("image")?;
            Ok((recipe.as_bytes().to_vec(), image.to_string(), spec.spec_digest.to_string()))
        };
        let first = cycle()?;
        for i in 2..=100 {
            ensure!(cycle()? == first, "cycle {i} differs from cycle 1");
        }

        let tree = WorkingTree::open(&repo).ctx("open")?;
        let env = parse_environment(&tree).ctx("parse")?;
        let baseline = spec_digest(&env, &commit);
        let sources: Vec<String> = env.source_files.iter().map(|f| f.path.clone()).collect();
        ensure!(!sources.is_empty(), "no consumed environment files");
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        let (mut changed, mut rejected) = (0, 0);
        for trial in 0..1_000 {
            let rel = &sources[rng.random_range(0..sources.len())];
            let path = repo.join(rel);
            let original = std::fs::read(&path).ctx(rel)?;
            if original.is_empty() {
                continue;
            }
            let mut mutated = original.clone();
            let pos = rng.random_range(0..mutated.len());
            let mut byte = rng.random::<u8>();
            while byte == original[pos] {
                byte = rng.random();
            }
            mutated[pos] = byte;
            std::fs::write(&path, &mutated).ctx(rel)?;
            let outcome = parse_environment(&tree).map(|e| spec_digest(&e, &commit));
            std::fs::write(&path, &original).ctx(rel)?;
            match outcome {
                Ok(d) if d == baseline => return Err(format!("trial {trial}: byte {pos} of {rel} left specDigest unchanged")),
                Ok(_) => changed += 1,
                Err(_) => rejected += 1,
            }
        }
        let restored = spec_digest(&parse_environment(&tree).ctx("parse")?, &commit);
        ensure!(restored == baseline, "restoring the files did not restore the digest");
        Ok(Verdict::Pass(format!(
            "100 identical cycles ({} recipe bytes, {}); 1000 mutations over {} files: {changed} changed specDigest, {rejected} rejected by the parser, 0 unchanged",
            first.0.len(),
            first.1,
            sources.len()
        )))
    })
}

fn share_semantics() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let p = DemoPlatform::start(dir.path()).await.ctx("platform")?;
        let o = &p.orchestrator;
        let sim = p.sim.clone().expect("sim platform");
        let id = ready_project(&p).await?;
        let source = o.get_project(&p.caller, &id).ctx("get")?;
        let builds = sim.build_count();
        let share = o.create_share(&p.caller, &id).await.ctx("create_share")?;
        let other = p.collaborator().await.ctx("collaborator")?;
        let opened = o.open_share(&other, &share.share_id).await.ctx("open_share")?;
        ensure!(opened.status == ProjectStatus::Ready, "opened project is {} ({:?})", opened.status, opened.failure);
        ensure!(opened.commit_id() == source.commit_id(), "commitId differs");
        let digest = |r: &rrp_core::orchestrator::ProjectRecord| r.spec.as_ref().map(|s| s.spec_digest.clone());
        ensure!(digest(&opened) == digest(&source) && digest(&source).is_some(), "specDigest differs");
        ensure!(opened.image_ref == source.image_ref && opened.image_ref.is_some(), "imageRef differs");
        let extra = sim.build_count() - builds;
        ensure!(extra == 0, "{extra} additional build_image calls");
        Ok(Verdict::Pass(format!("opened as {} with equal commitId/specDigest/imageRef; 0 additional builds", opened.owner)))
    })
}

fn clean_repo_gate() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let p = DemoPlatform::start(dir.path()).await.ctx("platform")?;
        let o = &p.orchestrator;
        let id = ready_project(&p).await?;
        let checkout = o.get_project(&p.caller, &id).ctx("get")?.workspace.join("project");
        std::fs::write(checkout.join("notes.md"), "an uncommitted edit\n").ctx("edit")?;
        let out = dir.path().join("bundle.tar.gz");

        let share = o.create_share(&p.caller, &id).await;
        ensure!(matches!(share, Err(OrchestratorError::RepositoryDirty)), "create_share on a dirty tree: {share:?}");
        let archive = o.archive_project(&p.caller, &id).await;
        ensure!(matches!(archive, Err(OrchestratorError::DirtyWorkspace)), "archive_project on a dirty tree: {archive:?}");
        let export = export_player_bundle(o, &p.caller, &id, &out).await;
        ensure!(
            matches!(export, Err(BundleError::Orchestrator(OrchestratorError::RepositoryDirty))),
            "export_player_bundle on a dirty tree: {:?}",
            export.map(|r| r.bytes)
        );
        ensure!(!out.exists(), "a refused export left a file behind");

        git::commit_all(&checkout, "Add notes").ctx("commit")?;
        o.create_share(&p.caller, &id).await.ctx("create_share after commit")?;
        o.archive_project(&p.caller, &id).await.ctx("archive_project after commit")?;
        export_player_bundle(o, &p.caller, &id, &out).await.ctx("export_player_bundle after commit")?;
        Ok(Verdict::Pass(
            "dirty: share and export refused with RepositoryDirty, archive with DirtyWorkspace; after commit all three succeed".into(),
        ))
    })
}

/// Byte range and entry path of each gzip member.
fn member_owners(bytes: &[u8]) -> Result<Vec<(Range<usize>, String)>, String> {
    let mut owners = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let mut member = flate2::bufread::GzDecoder::new(rest);
        let mut content = Vec::new();
        member.read_to_end(&mut content).ctx("member")?;
        let remaining = member.into_inner();
        let start = bytes.len() - rest.len();
        let end = bytes.len() - remaining.len();
        let mut archive = tar::Archive::new(content.as_slice());
        let first = archive.entries().ctx("tar")?.next().transpose().ctx("tar")?;
        let path = match first {
            Some(e) => e.path().ctx("path")?.to_string_lossy().into_owned(),
            None => return Err(format!("member at {start} holds no entry")),
        };
        owners.push((start..end, path));
        rest = remaining;
    }
    Ok(owners)
}

fn bundle_round_trip() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let p = DemoPlatform::start(&dir.path().join("platform")).await.ctx("platform")?;
        let id = ready_project(&p).await?;
        let original = run_once(&p, &id).await?;
        let bundle = dir.path().join("demo.tar.gz");
        export_player_bundle(&p.orchestrator, &p.caller, &id, &bundle).await.ctx("export")?;
        let report = verify_bundle(&bundle).ctx("verify")?;
        ensure!(report.ok, "fresh bundle failed verification: {:?}", report.failures);
        p.rdms.shutdown().await;

        // Play in a fresh process inside a network namespace with no interfaces up.
        // The binary is copied next to the bundle because the build directory
        // may not be reachable from inside the user namespace.
        let work = dir.path().join("hermetic");
        let player = dir.path().join("rrp");
        std::fs::copy(env!("CARGO_BIN_EXE_rrp"), &player).ctx("copy rrp")?;
        let mut cmd = Command::new("unshare");
        cmd.arg("-rn").arg(&player).arg("play").arg(&bundle);
        cmd.args(["--runtime", "sim", "--work-dir"]).arg(&work).arg("--exec").args(demo::workload_command());
        let out = tokio::task::spawn_blocking(move || cmd.output()).await.ctx("join")?.ctx("unshare")?;
        ensure!(
            out.status.success(),
            "hermetic playback exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        let replayed = sha256_hex(&std::fs::read(work.join("results").join(demo::RESULT_FILE)).ctx("replayed result")?);
        ensure!(replayed == original, "replayed hash {replayed} differs from {original}");

        let bytes = std::fs::read(&bundle).ctx("read bundle")?;
        let owners = member_owners(&bytes)?;
        ensure!(owners.last().map(|o| o.0.end) == Some(bytes.len()), "members do not cover the archive");
        // Every gzip header byte and trailer end, plus random positions.
        let mut positions: Vec<usize> =
            owners.iter().flat_map(|(r, _)| (r.start..r.start + 10).chain([r.end - 1])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0x7A3B);
        positions.extend((0..300).map(|_| rng.random_range(0..bytes.len())));
        let tampered = dir.path().join("tampered.tar.gz");
        for &pos in &positions {
            let mut copy = bytes.clone();
            copy[pos] ^= 1 << rng.random_range(0..8);
            std::fs::write(&tampered, &copy).ctx("write")?;
            let owner = &owners.iter().find(|(r, _)| r.contains(&pos)).expect("covered").1;
            let report = verify_bundle(&tampered).map_err(|e| format!("byte {pos} ({owner}): {e}"))?;
            let named: Vec<&str> = report.failures.iter().map(|f| f.path.as_str()).collect();
            ensure!(!report.ok && named == [owner.as_str()], "byte {pos} in {owner}: verify named {named:?}");
        }
        Ok(Verdict::Pass(format!(
            "hermetic replay matched {}; {} single-byte tampers over {} entries each named the exact path",
            &original[..12],
            positions.len(),
            owners.len()
        )))
    })
}

fn player_script() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let registry = SimRegistry::new();
        let sim = sim_with(&registry);
        let mut p = DemoPlatform::start_with(&dir.path().join("platform"), sim.clone()).await.ctx("platform")?;
        p.sim = Some(sim);
        let id = ready_project(&p).await?;
        let original = run_once(&p, &id).await?;
        p.orchestrator.push_image(&p.caller, &id, REGISTRY, None).await.ctx("push")?;

        let script = dir.path().join("demo.script.tar.gz");
        match export_player_script(&p.orchestrator, &p.caller, &id, &script).await {
            Err(e @ BundleError::UnpublishedDatasets(_)) => {
                let BundleError::UnpublishedDatasets(ids) = &e else { unreachable!() };
                ensure!(ids == &[p.perm_id.clone()], "named {ids:?}, expected {}", p.perm_id);
                ensure!(e.to_string().contains(&p.perm_id), "message does not name {}: {e}", p.perm_id);
            }
            other => return Err(format!("export with an unpublished dataset: {:?}", other.map(|r| r.bytes))),
        }
        let client = RdmsClient::new(&p.rdms.url()).ctx("client")?;
        client.publish(&p.token, &p.perm_id).await.ctx("publish")?;
        export_player_script(&p.orchestrator, &p.caller, &id, &script).await.ctx("export")?;

        let player = sim_with(&registry);
        let work = dir.path().join("play");
        let playback = play_script(&script, &HttpFetcher::default(), player.as_ref(), &work).await.ctx("play_script")?;
        let out = player.exec(&playback.session.session_id, &demo::workload_command()).await.ctx("workload")?;
        ensure!(out.exit_code == 0, "workload exited {}", out.exit_code);
        let replayed = sha256_hex(&std::fs::read(work.join("results").join(demo::RESULT_FILE)).ctx("result")?);
        ensure!(replayed == original, "replayed hash {replayed} differs from {original}");
        Ok(Verdict::Pass(format!("unpublished {} named; after publish and push the script replayed the same hash", p.perm_id)))
    })
}

async fn read_only_writes_fail(runtime: &dyn RuntimeAdapter, session: &str) -> Result<usize, String> {
    let mut refused = 0;
    for path in ["/openbis/raw_data/README.txt", "/openbis/raw_data/new.txt", "/openbis/raw_data/measurements/x"] {
        match runtime.write_file(session, path, b"oops").await {
            Err(RuntimeError::ReadOnly(_)) => refused += 1,
            other => return Err(format!("write to {path}: {other:?}")),
        }
    }
    Ok(refused)
}

fn read_only_sim() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let p = DemoPlatform::start(dir.path()).await.ctx("platform")?;
        let id = ready_project(&p).await?;
        let info = p.orchestrator.start_project(&p.caller, &id, None).await.ctx("start")?;
        let refused = read_only_writes_fail(p.runtime.as_ref(), &info.session_id).await?;
        let readme = p.orchestrator.get_project(&p.caller, &id).ctx("get")?.workspace.join("openbis/raw_data/README.txt");
        ensure!(std::fs::metadata(&readme).ctx("stat")?.permissions().readonly(), "host copy is writable");
        ensure!(
            std::fs::read(&readme).ctx("read")? == demo::dataset_files(demo::DEFAULT_SEED)[0].1,
            "dataset content changed"
        );
        p.runtime.write_file(&info.session_id, "/results/ok.txt", b"fine").await.ctx("write under /results")?;
        Ok(Verdict::Pass(format!("{refused}/{refused} writes under /openbis refused, host tree read-only, /results writable")))
    })
}

async fn docker() -> Option<Arc<DockerRuntime>> {
    DockerRuntime::connect(None).await.ok().map(Arc::new)
}

/// Demo platform on the real backend, with the project Ready and started.
async fn docker_project(root: &Path, docker: Arc<DockerRuntime>) -> Result<(DemoPlatform, String, String), String> {
    let p = DemoPlatform::start_with(root, docker).await.ctx("platform")?;
    let id = ready_project(&p).await?;
    let info = p.orchestrator.start_project(&p.caller, &id, None).await.ctx("start")?;
    Ok((p, id, info.session_id))
}

fn read_only_real() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let Some(docker) = docker().await else {
            return Ok(Verdict::Skip("no container daemon".into()));
        };
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let (p, id, session) = docker_project(dir.path(), docker).await?;
        let refused = read_only_writes_fail(p.runtime.as_ref(), &session).await?;
        let argv: Vec<String> = ["sh", "-c", "echo x > /openbis/raw_data/probe"].map(String::from).to_vec();
        let out = p.runtime.exec(&session, &argv).await.ctx("exec")?;
        ensure!(out.exit_code != 0, "shell write under /openbis succeeded");
        p.orchestrator.delete_project(&p.caller, &id).await.ctx("delete")?;
        Ok(Verdict::Pass(format!("{refused} file API writes and a shell write under /openbis refused")))
    })
}

fn real_runtime() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let Some(docker) = docker().await else {
            return Ok(Verdict::Skip("no container daemon".into()));
        };
        let started = Instant::now();
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let (p, id, session) = docker_project(dir.path(), docker).await?;
        let rec = p.orchestrator.get_project(&p.caller, &id).ctx("get")?;
        let spec = rec.spec.as_ref().ok_or("no spec")?;
        ensure!(spec.environment.runtime.as_deref() == Some("python-3.10"), "fixture runtime {:?}", spec.environment.runtime);
        ensure!(spec.environment.pip_requirements.lines().count() == 1, "fixture should carry one requirement");

        let handle = p.runtime.session(&session).await.ctx("session")?;
        let endpoint = handle.internal_endpoint.clone();
        let url = if endpoint.contains("://") { endpoint } else { format!("http://{endpoint}/") };
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            match reqwest::get(&url).await {
                Ok(r) if r.status().is_success() => break,
                other => {
                    ensure!(Instant::now() < deadline, "session endpoint {url} never answered: {:?}", other.map(|r| r.status()));
                    tokio::time::sleep(Duration::from_millis(500)).await;
                }
            }
        }
        let out = p.orchestrator.run_command(&p.caller, &id, &demo::workload_command()).await.ctx("workload")?;
        ensure!(out.exit_code == 0, "workload exited {}: {}", out.exit_code, out.output);
        p.orchestrator.stop_project(&p.caller, &id).await.ctx("stop")?;
        let results = p.orchestrator.list_results(&p.caller, &id).ctx("results")?;
        let hash = results.iter().find(|e| e.relative_path == demo::RESULT_FILE).map(|e| e.content_hash.clone());
        ensure!(hash.as_deref() == Some(expected_hash().as_str()), "real result {hash:?} differs from the sim result");
        p.orchestrator.delete_project(&p.caller, &id).await.ctx("delete")?;
        let elapsed = started.elapsed();
        ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
        Ok(Verdict::Pass(format!("built, probed {url}, same result hash as the sim path in {elapsed:.0?}")))
    })
}

fn fuzz() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let cfg = FuzzConfig::default();
        let report = run_state_machine_fuzz(dir.path(), &cfg).await.ctx("fuzz")?;
        ensure!(report.violations.is_empty(), "{} violations, first: {}", report.violations.len(), report.violations[0]);
        ensure!(report.sequences == 10_000, "ran {} sequences", report.sequences);
        Ok(Verdict::Pass(format!(
            "{} sequences, {} commands, {} transitions and {} journal events checked, 0 violations",
            report.sequences, report.commands, report.transitions_checked, report.events_checked
        )))
    })
}

/// Every protected route, with placeholder ids.
const PROTECTED: &[(&str, &str)] = &[
    ("GET", "/api/v1/projects"),
    ("POST", "/api/v1/projects"),
    ("GET", "/api/v1/projects/p1"),
    ("DELETE", "/api/v1/projects/p1"),
    ("POST", "/api/v1/projects/p1/start"),
    ("POST", "/api/v1/projects/p1/stop"),
    ("PUT", "/api/v1/projects/p1/resources"),
    ("GET", "/api/v1/projects/p1/results"),
    ("GET", "/api/v1/projects/p1/results/out.csv"),
    ("POST", "/api/v1/projects/p1/upload"),
    ("POST", "/api/v1/projects/p1/archive"),
    ("POST", "/api/v1/projects/p1/share"),
    ("GET", "/api/v1/projects/p1/events"),
    ("GET", "/api/v1/projects/p1/journal"),
    ("GET", "/api/v1/projects/p1/bundle"),
    ("POST", "/api/v1/projects/p1/exec"),
    ("POST", "/api/v1/projects/p1/push"),
    ("GET", "/api/v1/shares/s1"),
    ("POST", "/api/v1/shares/s1/open"),
    ("GET", "/session/p1/"),
    ("POST", "/session/p1/api/kernels"),
];

fn api_conformance() -> Pin<Box<dyn Future<Output = Check> + Send>> {
    Box::pin(async {
        use futures::StreamExt;
        let dir = tempfile::tempdir().ctx("tempdir")?;
        let p = DemoPlatform::start(dir.path()).await.ctx("platform")?;
        let bind = "127.0.0.1:0".parse().expect("addr");
        let svc = serve(p.orchestrator.clone(), ServeConfig { bind, ..ServeConfig::default() }).await.ctx("serve")?;
        let anon = ApiClient::new(&svc.url());
        let forged = ApiClient::new(&svc.url()).with_token("rrp_forged");
        for (method, path) in PROTECTED {
            let m: Method = method.parse().expect("method");
            for client in [&anon, &forged] {
                let (status, _) = client.session_request(m.clone(), path).await.ctx(path)?;
                ensure!(status == 401, "{method} {path} answered {status} without a valid token");
            }
        }
        let (health, _) = anon.session_request(Method::GET, "/api/v1/health").await.ctx("health")?;
        ensure!(health == 200, "health answered {health}");
        let (login, _) = anon.session_request(Method::POST, "/api/v1/login").await.ctx("login")?;
        ensure!(login != 401 && login < 500, "login without a body answered {login}");

        let mut c = ApiClient::new(&svc.url());
        c.login(DEMO_USER, DEMO_PASSWORD).await.ctx("login")?;
        let req = CreateProjectRequest { repo_url: p.repo.display().to_string(), ..Default::default() };
        let id = c.create_project(&req).await.ctx("create")?.project_id;

        // Subscribe, drop after a few events, resume from the last one seen; repeat until Ready.
        let mut seen: Vec<u64> = Vec::new();
        let mut reconnects = 0;
        let mut ready = false;
        while !ready {
            let last = seen.last().copied().unwrap_or(0);
            let mut frames = c.events(&id, last).await.ctx("events")?;
            reconnects += 1;
            for _ in 0..3 {
                let next = tokio::time::timeout(Duration::from_secs(30), frames.next()).await.ctx("waiting for events")?;
                let frame = next.ok_or("stream ended")?.ctx("frame")?;
                ensure!(!frame.is_gap(), "gap frame at {:?}", frame.sequence());
                let seq = frame.sequence().ok_or("event without a sequence")?;
                ensure!(seq == seen.len() as u64 + 1, "received {seq} after {seen:?}");
                seen.push(seq);
                if frame.event_type == "status" && frame.payload() == Some("Ready") {
                    ready = true;
                    break;
                }
            }
        }
        let journal = c.journal(&id).await.ctx("journal")?;
        let journaled: Vec<u64> = journal.iter().map(|e| e.sequence).collect();
        ensure!(journaled.starts_with(&seen), "streamed {seen:?} is not a prefix of the journal {journaled:?}");
        svc.shutdown().await;
        Ok(Verdict::Pass(format!(
            "{} protected routes answer 401 without a valid token, health and login open; {} events over {reconnects} connections, contiguous, no duplicates",
            PROTECTED.len(),
            seen.len()
        )))
    })
}

const CHECKS: &[(&str, CheckFn, u64)] = &[
    ("lifecycle", lifecycle, 600),
    ("determinism", determinism, 300),
    ("share-semantics", share_semantics, 120),
    ("clean-repo-gate", clean_repo_gate, 120),
    ("bundle-round-trip", bundle_round_trip, 300),
    ("player-script", player_script, 120),
    ("read-only-mounts/sim", read_only_sim, 120),
    ("read-only-mounts/real", read_only_real, 900),
    ("state-machine-fuzz", fuzz, 1800),
    ("api-conformance", api_conformance, 120),
    ("real-runtime", real_runtime, 900),
];

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
    let mut failed = 0;
    for (name, check, limit) in CHECKS {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = rt.block_on(async {
            let task = tokio::spawn(check());
            match tokio::time::timeout(Duration::from_secs(*limit), task).await {
                Ok(Ok(result)) => result,
                Ok(Err(join)) => Err(format!("panicked: {join}")),
                Err(_) => Err(format!("timed out after {limit} s")),
            }
        });
        let took = started.elapsed();
        match outcome {
            Ok(Verdict::Pass(detail)) => println!("PASS {name} ({took:.1?}): {detail}"),
            Ok(Verdict::Skip(reason)) => println!("SKIP {name}: {reason}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({took:.1?}): {reason}");
            }
        }
    }
    rt.shutdown_timeout(Duration::from_secs(5));
    if failed > 0 {
        std::process::exit(1);
    }
}
