use std::collections::BTreeMap;
use std::time::Duration;

use futures::StreamExt;
use rrp_core::demo::{self, DemoPlatform};
use rrp_core::digest::sha256_hex;
use rrp_core::orchestrator::{EventKind, JournalItem, Orchestrator, OrchestratorError, ProjectRecord, ProjectStatus};
use rrp_core::project::{git, ProjectSource};
use rrp_core::rdms::RdmsClient;
use rrp_core::runtime::{ResourceLimits, RuntimeError, GIB};

async fn ready_project(p: &DemoPlatform, name: &str) -> ProjectRecord {
    let rec = p.orchestrator.create_project(&p.caller, p.source(), name).await.unwrap();
    assert_eq!(rec.status, ProjectStatus::New);
    let rec = p.orchestrator.wait_settled(&p.caller, &rec.project_id).await.unwrap();
    assert_eq!(rec.status, ProjectStatus::Ready, "failure: {:?}", rec.failure);
    rec
}

fn status_payloads(p: &DemoPlatform, id: &str) -> Vec<String> {
    p.orchestrator
        .journal(&p.caller, id)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == EventKind::Status)
        .map(|e| e.payload)
        .collect()
}

async fn run_workload(p: &DemoPlatform, id: &str) {
    let out = p.orchestrator.run_command(&p.caller, id, &demo::workload_command()).await.unwrap();
    assert_eq!(out.exit_code, 0, "{}", out.output);
}

#[tokio::test]
async fn demo_lifecycle_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let sim = p.sim.clone().unwrap();
    let rec = ready_project(&p, "demo").await;
    let id = rec.project_id.clone();
    assert_eq!(status_payloads(&p, &id), ["Cloning", "Planning", "Building", "Ready"]);
    assert!(rec.image_ref.is_some());
    assert_eq!(rec.commit_id(), Some(p.commit.as_str()));
    assert!(p.orchestrator.list_results(&p.caller, &id).unwrap().is_empty());
    assert_eq!(sim.build_count(), 1);

    let info = p.orchestrator.start_project(&p.caller, &id, None).await.unwrap();
    assert_eq!(info.public_path, format!("/session/{id}/"));
    assert_eq!(info.resources, ResourceLimits::default());
    let session = sim.session_info(&info.session_id).unwrap();
    let targets: Vec<(String, bool)> = session.mounts.iter().map(|m| (m.container_path.clone(), m.read_only)).collect();
    assert_eq!(
        targets,
        [("/project".to_owned(), false), ("/openbis/raw_data".to_owned(), true), ("/results".to_owned(), false)]
    );
    assert!(session.env.contains(&("RRP_BASE_URL".to_owned(), format!("/session/{id}/"))));

    run_workload(&p, &id).await;
    let stopped = p.orchestrator.stop_project(&p.caller, &id).await.unwrap();
    assert_eq!(stopped.status, ProjectStatus::Stopped);
    assert!(stopped.session.is_none());
    assert!(sim.live_sessions().is_empty());

    let results = p.orchestrator.list_results(&p.caller, &id).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].relative_path, demo::RESULT_FILE);
    let expected = demo::expected_demo_output(demo::DEFAULT_SEED);
    assert_eq!(results[0].content_hash, sha256_hex(expected.as_bytes()));
    assert_eq!(p.orchestrator.read_result(&p.caller, &id, "out.csv").unwrap(), expected.as_bytes());

    let kinds: Vec<EventKind> = p.orchestrator.journal(&p.caller, &id).unwrap().iter().map(|e| e.kind).collect();
    assert!(kinds.contains(&EventKind::ResultsChanged));
    assert!(kinds.contains(&EventKind::RunLog));

    // Restart from Stopped reuses the image.
    p.orchestrator.start_project(&p.caller, &id, Some(ResourceLimits::new(2.0, 4 * GIB).unwrap())).await.unwrap();
    assert_eq!(sim.build_count(), 1);
    let deleted = p.orchestrator.delete_project(&p.caller, &id).await.unwrap();
    assert_eq!(deleted.status, ProjectStatus::Deleted);
    assert!(deleted.image_ref.is_none() && deleted.spec.is_none() && deleted.name.is_empty());
    assert!(!rec.workspace.join("project").exists());
    assert!(rec.workspace.join("journal.log").exists());
    assert!(sim.live_sessions().is_empty());
    assert_eq!(status_payloads(&p, &id)[4..], ["Running", "Stopped", "Running", "Stopped", "Deleted"]);
    assert!(matches!(
        p.orchestrator.start_project(&p.caller, &id, None).await,
        Err(OrchestratorError::InvalidState { status: ProjectStatus::Deleted, .. })
    ));
    assert!(matches!(p.orchestrator.list_results(&p.caller, &id), Err(OrchestratorError::UnknownProject(_))));
    assert!(p.orchestrator.list_projects(&p.caller).is_empty());
}

#[tokio::test]
async fn openbis_mounts_are_read_only_in_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let rec = ready_project(&p, "demo").await;
    let info = p.orchestrator.start_project(&p.caller, &rec.project_id, None).await.unwrap();
    let rt = &p.runtime;
    for path in ["/openbis/raw_data/README.txt", "/openbis/raw_data/new.txt", "/openbis/raw_data/measurements/x"] {
        let err = rt.write_file(&info.session_id, path, b"oops").await.unwrap_err();
        assert!(matches!(err, RuntimeError::ReadOnly(_)), "{path}: {err:?}");
    }
    let original = rt.read_file(&info.session_id, "/openbis/raw_data/README.txt").await.unwrap();
    assert_eq!(original, demo::dataset_files(demo::DEFAULT_SEED)[0].1);
    rt.write_file(&info.session_id, "/results/ok.txt", b"fine").await.unwrap();
    assert_eq!(std::fs::read(rec.workspace.join("results/ok.txt")).unwrap(), b"fine");
    // On the host the materialized tree is read-only too.
    let mode = std::fs::metadata(rec.workspace.join("openbis/raw_data/README.txt")).unwrap().permissions();
    assert!(mode.readonly());
}

#[tokio::test]
async fn invalid_operations_by_state() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let o = &p.orchestrator;
    p.sim.as_ref().unwrap().configure(|c| c.step_delay = Duration::from_millis(100));
    let rec = o.create_project(&p.caller, p.source(), "slow").await.unwrap();
    let id = rec.project_id.clone();
    let mut status = o.project_events(&p.caller, &id, 0).unwrap();
    // Wait until the build is under way.
    while let Some(JournalItem::Event(e)) = status.next().await {
        if e.kind == EventKind::Status && e.payload == "Building" {
            break;
        }
    }
    assert!(matches!(o.start_project(&p.caller, &id, None).await, Err(OrchestratorError::InvalidState { .. })));
    assert!(matches!(o.delete_project(&p.caller, &id).await, Err(OrchestratorError::InvalidState { .. })));
    assert!(matches!(o.stop_project(&p.caller, &id).await, Err(OrchestratorError::InvalidState { .. })));
    assert!(matches!(o.create_share(&p.caller, &id).await, Err(OrchestratorError::InvalidState { .. })));
    assert!(matches!(o.archive_project(&p.caller, &id).await, Err(OrchestratorError::InvalidState { .. })));
    p.sim.as_ref().unwrap().configure(|c| c.step_delay = Duration::ZERO);
    assert_eq!(o.wait_settled(&p.caller, &id).await.unwrap().status, ProjectStatus::Ready);

    assert!(matches!(o.stop_project(&p.caller, &id).await, Err(OrchestratorError::InvalidState { .. })));
    assert!(matches!(
        o.start_project(&p.caller, &id, Some(ResourceLimits { cpu_cores: 0.0, memory_bytes: GIB })).await,
        Err(OrchestratorError::InvalidResources(_))
    ));
    o.start_project(&p.caller, &id, None).await.unwrap();
    assert!(matches!(o.archive_project(&p.caller, &id).await, Err(OrchestratorError::InvalidState { .. })));
    assert!(matches!(o.start_project(&p.caller, &id, None).await, Err(OrchestratorError::InvalidState { .. })));

    assert!(matches!(o.create_project(&p.caller, p.source(), "slow").await, Err(OrchestratorError::NameTaken(_))));
    // Names are per owner.
    let other = p.collaborator().await.unwrap();
    o.create_project(&other, p.source(), "slow").await.unwrap();
    // Other users cannot see the project.
    assert!(matches!(o.get_project(&other, &id), Err(OrchestratorError::UnknownProject(_))));
}

#[tokio::test]
async fn pipeline_failures_surface_as_failed() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let o = &p.orchestrator;

    std::fs::write(p.repo.join(".rrp/datasets.yaml"), "datasets: [unclosed\n").unwrap();
    git::commit_all(&p.repo, "break manifest").unwrap();
    let rec = o.create_project(&p.caller, p.source(), "bad-manifest").await.unwrap();
    let rec = o.wait_settled(&p.caller, &rec.project_id).await.unwrap();
    assert_eq!(rec.status, ProjectStatus::Failed);
    assert!(rec.failure.as_deref().unwrap().starts_with("ManifestSyntax"), "{:?}", rec.failure);
    assert_eq!(status_payloads(&p, &rec.project_id), ["Cloning", "Planning", "Failed"]);

    let rec = o.create_project(&p.caller, ProjectSource::new(dir.path().join("nope").to_string_lossy()), "missing").await.unwrap();
    let rec = o.wait_settled(&p.caller, &rec.project_id).await.unwrap();
    assert!(rec.failure.as_deref().unwrap().starts_with("CloneFailed"));
    // Failed projects can be deleted.
    assert_eq!(o.delete_project(&p.caller, &rec.project_id).await.unwrap().status, ProjectStatus::Deleted);

    demo::write_fixture_repo(&p.repo, &p.rdms.url(), &p.perm_id).unwrap();
    p.sim.as_ref().unwrap().configure(|c| c.fail_build_at_step = Some(2));
    let rec = o.create_project(&p.caller, p.source(), "bad-build").await.unwrap();
    let rec = o.wait_settled(&p.caller, &rec.project_id).await.unwrap();
    assert!(rec.failure.as_deref().unwrap().starts_with("BuildFailed"));
    let logs: Vec<String> = o
        .journal(&p.caller, &rec.project_id)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == EventKind::BuildLog)
        .map(|e| e.payload)
        .collect();
    assert!(logs.iter().any(|l| l.starts_with("Step 2/")));
}

#[tokio::test]
async fn shares_open_without_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let sim = p.sim.clone().unwrap();
    let o = &p.orchestrator;
    let rec = ready_project(&p, "demo").await;
    let s1 = o.create_share(&p.caller, &rec.project_id).await.unwrap();
    let s2 = o.create_share(&p.caller, &rec.project_id).await.unwrap();
    assert_eq!(s1.share_id.len(), 26);
    assert_ne!(s1.share_id, s2.share_id);
    assert_eq!(s1.spec_digest, s2.spec_digest);
    assert_eq!(s1.commit_id, p.commit);

    let builds = sim.build_count();
    let other = p.collaborator().await.unwrap();
    let opened = o.open_share(&other, &s1.share_id).await.unwrap();
    assert_eq!(opened.status, ProjectStatus::Ready, "{:?}", opened.failure);
    assert_eq!(opened.owner, other.user_id);
    assert_eq!(opened.commit_id(), Some(s1.commit_id.as_str()));
    assert_eq!(opened.spec.as_ref().unwrap().spec_digest, s1.spec_digest);
    assert_eq!(opened.image_ref.as_ref(), Some(&s1.image_ref));
    assert_eq!(sim.build_count(), builds);
    assert!(opened.workspace.join("openbis/raw_data/README.txt").is_file());
    // Opening twice gives distinct projects.
    let again = o.open_share(&other, &s1.share_id).await.unwrap();
    assert_ne!(again.name, opened.name);

    // The collaborator gets the same results.
    o.start_project(&other, &opened.project_id, None).await.unwrap();
    let out = o.run_command(&other, &opened.project_id, &demo::workload_command()).await.unwrap();
    assert_eq!(out.exit_code, 0);
    o.stop_project(&other, &opened.project_id).await.unwrap();
    let results = o.list_results(&other, &opened.project_id).unwrap();
    assert_eq!(results[0].content_hash, sha256_hex(demo::expected_demo_output(demo::DEFAULT_SEED).as_bytes()));

    assert!(matches!(o.open_share(&other, "AAAAAAAAAAAAAAAAAAAAAAAAAA").await, Err(OrchestratorError::ShareNotFound(_))));
}

#[tokio::test]
async fn dirty_repository_gates_share_and_archive() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let o = &p.orchestrator;
    let rec = ready_project(&p, "demo").await;
    let id = &rec.project_id;
    let project_dir = rec.workspace.join("project");
    std::fs::write(project_dir.join("README.md"), "edited\n").unwrap();
    assert!(!o.repository_clean(&p.caller, id).unwrap());
    let err = o.create_share(&p.caller, id).await.unwrap_err();
    assert_eq!(err, OrchestratorError::RepositoryDirty);
    assert!(err.to_string().contains("uncommitted changes"));
    assert_eq!(o.archive_project(&p.caller, id).await.unwrap_err(), OrchestratorError::DirtyWorkspace);
    assert!(matches!(o.begin_export(&p.caller, id).await, Err(OrchestratorError::RepositoryDirty)));

    let commit = git::commit_all(&project_dir, "edit readme").unwrap();
    assert!(o.repository_clean(&p.caller, id).unwrap());
    let share = o.create_share(&p.caller, id).await.unwrap();
    assert_eq!(share.commit_id, commit);
    let perm = o.archive_project(&p.caller, id).await.unwrap();
    assert!(!perm.is_empty());
    drop(o.begin_export(&p.caller, id).await.unwrap());

    // An environment change needs a rebuild before sharing.
    std::fs::write(project_dir.join(".binder/requirements.txt"), "tabulate==0.9.0\nnumpy==1.26.4\n").unwrap();
    git::commit_all(&project_dir, "add numpy").unwrap();
    assert!(matches!(o.create_share(&p.caller, id).await, Err(OrchestratorError::RebuildRequired(_))));
}

#[tokio::test]
async fn results_upload_and_archive_land_in_the_rdms() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let o = &p.orchestrator;
    let rec = ready_project(&p, "demo").await;
    let id = &rec.project_id;
    o.start_project(&p.caller, id, None).await.unwrap();
    run_workload(&p, id).await;
    o.stop_project(&p.caller, id).await.unwrap();

    let client = RdmsClient::new(&p.rdms.url()).unwrap();
    let perm = o.upload_result(&p.caller, id, "out.csv", BTreeMap::new()).await.unwrap();
    let d = client.resolve_dataset(&p.token, &perm).await.unwrap();
    assert_eq!(d.files.len(), 1);
    assert_eq!(d.files[0].content_hash, o.list_results(&p.caller, id).unwrap()[0].content_hash);
    let uploads: Vec<String> = o
        .journal(&p.caller, id)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == EventKind::Upload)
        .map(|e| e.payload)
        .collect();
    assert_eq!(uploads, [format!("out.csv -> {perm}")]);

    for bad in ["../../etc/passwd", "/etc/passwd", "missing.csv", "../project/analyze.sh"] {
        assert!(matches!(
            o.upload_result(&p.caller, id, bad, BTreeMap::new()).await,
            Err(OrchestratorError::ResultNotFound(_))
        ));
    }

    let archive = o.archive_project(&p.caller, id).await.unwrap();
    let d = client.resolve_dataset(&p.token, &archive).await.unwrap();
    let paths: Vec<&str> = d.files.iter().map(|f| f.path.as_str()).collect();
    for want in ["image.tar", "datasets.yaml", "results/out.csv", "state.json", "project/analyze.sh", "project/.binder/runtime.txt"] {
        assert!(paths.contains(&want), "{want} missing from {paths:?}");
    }
    assert!(!paths.iter().any(|p| p.starts_with("project/.git/")));
    assert_eq!(d.metadata["type"], "rrp-archive");
    let image = client.read_file(&p.token, &archive, "image.tar", None).await.unwrap();
    rrp_core::runtime::read_image_layout(&image).unwrap();

    // An unreachable RDMS leaves the project untouched.
    let before = o.get_project(&p.caller, id).unwrap();
    let rdms = p.rdms;
    rdms.shutdown().await;
    let err = o.upload_result(&p.caller, id, "out.csv", BTreeMap::new()).await.unwrap_err();
    assert!(matches!(err, OrchestratorError::Rdms(_)), "{err:?}");
    assert_eq!(o.get_project(&p.caller, id).unwrap(), before);
}

#[tokio::test]
async fn routing_and_event_streams() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let o = &p.orchestrator;
    let rec = ready_project(&p, "demo").await;
    let id = &rec.project_id;
    assert!(matches!(o.route("/garbage"), Err(OrchestratorError::UnknownProject(_))));
    assert!(matches!(o.route("/session/nope/"), Err(OrchestratorError::UnknownProject(_))));
    assert!(matches!(o.route(&format!("/session/{id}/")), Err(OrchestratorError::NoActiveSession(_))));
    let info = o.start_project(&p.caller, id, None).await.unwrap();
    let (routed, handle) = o.route(&format!("/session/{id}/tree?x=1")).unwrap();
    assert_eq!(&routed, id);
    assert_eq!(handle.session_id, info.session_id);
    o.stop_project(&p.caller, id).await.unwrap();
    assert!(matches!(o.route(&format!("/session/{id}/")), Err(OrchestratorError::NoActiveSession(_))));

    let head = o.journal(&p.caller, id).unwrap().len() as u64;
    let take = |from| {
        let mut s = o.project_events(&p.caller, id, from).unwrap();
        async move {
            let mut out = Vec::new();
            while let Ok(Some(JournalItem::Event(e))) = tokio::time::timeout(Duration::from_millis(200), s.next()).await {
                out.push(e.sequence);
            }
            out
        }
    };
    let (a, b) = tokio::join!(take(0), take(1));
    assert_eq!(a, b);
    assert_eq!(a, (1..=head).collect::<Vec<_>>());
    assert_eq!(a[0], 1);
    assert_eq!(o.journal(&p.caller, id).unwrap()[0].payload, "Cloning");

    // Beyond head: live only.
    let mut live = o.project_events(&p.caller, id, head + 10).unwrap();
    o.start_project(&p.caller, id, None).await.unwrap();
    match live.next().await.unwrap() {
        JournalItem::Event(e) => assert_eq!(e.sequence, head + 1),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn reload_recovers_records_shares_and_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let p = DemoPlatform::start(dir.path()).await.unwrap();
    let rec = ready_project(&p, "demo").await;
    let id = rec.project_id.clone();
    let share = p.orchestrator.create_share(&p.caller, &id).await.unwrap();
    p.orchestrator.start_project(&p.caller, &id, None).await.unwrap();
    let head = p.orchestrator.journal(&p.caller, &id).unwrap().len();

    let reopened = Orchestrator::open(p.orchestrator.config().clone(), p.runtime.clone()).await.unwrap();
    let r = reopened.get_project(&p.caller, &id).unwrap();
    assert_eq!(r.status, ProjectStatus::Stopped);
    assert!(r.session.is_none());
    assert_eq!(r.image_ref, rec.image_ref);
    let events = reopened.journal(&p.caller, &id).unwrap();
    assert_eq!(events.len(), head + 1);
    assert!(events.windows(2).all(|w| w[1].sequence == w[0].sequence + 1));
    assert_eq!(reopened.get_share(&share.share_id).unwrap(), share);
    let other = p.collaborator().await.unwrap();
    assert_eq!(reopened.open_share(&other, &share.share_id).await.unwrap().status, ProjectStatus::Ready);
    reopened.start_project(&p.caller, &id, None).await.unwrap();
}
