use std::collections::{BTreeMap, BTreeSet};

use rrp_core::digest::sha256_hex;
use rrp_core::project::DatasetBinding;
use rrp_core::rdms::{serve_reference_rdms, RdmsClient, RdmsError, RdmsServerConfig, RdmsServerHandle, DEMO_PASSWORD, DEMO_USER};

async fn start(dir: &std::path::Path) -> (RdmsServerHandle, RdmsClient) {
    let server = serve_reference_rdms(RdmsServerConfig::new(dir)).await.unwrap();
    let client = RdmsClient::new(&server.url()).unwrap();
    (server, client)
}

fn files(pairs: &[(&str, &[u8])]) -> Vec<(String, Vec<u8>)> {
    pairs.iter().map(|(p, b)| (p.to_string(), b.to_vec())).collect()
}

fn seq_of(perm_id: &str) -> u64 {
    let (ts, seq) = perm_id.split_once('-').unwrap();
    assert_eq!(ts.len(), 17, "timestamp is yyyyMMddHHmmssSSS");
    assert!(ts.bytes().all(|b| b.is_ascii_digit()));
    seq.parse().unwrap()
}

#[tokio::test]
async fn demo_account_login() {
    let dir = tempfile::tempdir().unwrap();
    let (server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    assert_eq!(token.user_id, "rrp-demo");
    assert!(!token.is_expired());
    assert_eq!(client.login(DEMO_USER, "wrong").await.unwrap_err(), RdmsError::AuthFailed);
    assert_eq!(client.login("someone-else", DEMO_PASSWORD).await.unwrap_err(), RdmsError::AuthFailed);
    assert_eq!(server.account_count(), 1);
}

#[tokio::test]
async fn register_resolve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    let meta = BTreeMap::from([("title".to_string(), "two files".to_string())]);
    let perm = client.register_dataset(&token, &files(&[("a.txt", b"alpha"), ("sub/b.bin", &[0, 1, 2])]), &meta).await.unwrap();

    let d = client.resolve_dataset(&token, &perm).await.unwrap();
    assert_eq!(d.perm_id, perm);
    assert_eq!(d.files.len(), 2);
    assert_eq!(d.files[0].path, "a.txt");
    assert_eq!(d.files[0].content_hash, sha256_hex(b"alpha"));
    assert_eq!(d.files[1].path, "sub/b.bin");
    assert_eq!(d.total_bytes, 8);
    assert_eq!(d.metadata, meta);
    assert_eq!(client.resolve_dataset(&token, &perm).await.unwrap(), d, "resolve is referentially transparent");

    assert_eq!(client.read_file(&token, &perm, "sub/b.bin", None).await.unwrap(), vec![0, 1, 2]);
    assert_eq!(client.read_file(&token, &perm, "a.txt", Some((1, 3))).await.unwrap(), b"lph");

    assert!(matches!(client.resolve_dataset(&token, "nope").await, Err(RdmsError::DatasetNotFound(p)) if p == "nope"));
}

#[tokio::test]
async fn perm_ids_increase_and_empty_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    let a = client.register_dataset(&token, &files(&[("x", b"1")]), &BTreeMap::new()).await.unwrap();
    let b = client.register_dataset(&token, &files(&[("x", b"1")]), &BTreeMap::new()).await.unwrap();
    assert!(seq_of(&b) > seq_of(&a));
    assert_eq!(client.register_dataset(&token, &[], &BTreeMap::new()).await.unwrap_err(), RdmsError::EmptyDataset);
    assert!(matches!(
        client.register_dataset(&token, &files(&[("../x", b"1")]), &BTreeMap::new()).await,
        Err(RdmsError::InvalidPath(_))
    ));
}

#[tokio::test]
async fn concurrent_registrations_get_distinct_perm_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    let futs = (0..24).map(|i| {
        let (c, t) = (client.clone(), token.clone());
        tokio::spawn(async move {
            c.register_dataset(&t, &[(format!("f{i}"), vec![i as u8])], &BTreeMap::new()).await.unwrap()
        })
    });
    let ids: Vec<String> = futures::future::join_all(futs).await.into_iter().map(Result::unwrap).collect();
    let unique: BTreeSet<_> = ids.iter().collect();
    assert_eq!(unique.len(), ids.len());
    let seqs: BTreeSet<u64> = ids.iter().map(|p| seq_of(p)).collect();
    assert_eq!(seqs, (1..=24).collect());
}

#[tokio::test]
async fn publish_issues_stable_dois() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    let perm = client.register_dataset(&token, &files(&[("b", b"bee"), ("a", b"ay")]), &BTreeMap::new()).await.unwrap();
    assert_eq!(client.publication(&token, &perm).await.unwrap(), None);

    let doi = client.publish(&token, &perm).await.unwrap();
    assert_eq!(doi.doi, "10.5281/rrp-sim.1");
    assert_eq!(doi.object_ref, perm);
    assert_eq!(client.publish(&token, &perm).await.unwrap(), doi, "publish is idempotent");
    assert_eq!(client.publication(&token, &perm).await.unwrap(), Some(doi.clone()));
    assert!(matches!(client.publish(&token, "missing").await, Err(RdmsError::ObjectNotFound(_))));

    // The resolved URL serves the object's bytes without authentication.
    let body = reqwest::get(&doi.resolved_url).await.unwrap().bytes().await.unwrap();
    let mut archive = tar::Archive::new(body.as_ref());
    let mut seen = Vec::new();
    for e in archive.entries().unwrap() {
        let mut e = e.unwrap();
        let mut data = Vec::new();
        std::io::Read::read_to_end(&mut e, &mut data).unwrap();
        seen.push((e.path().unwrap().to_string_lossy().into_owned(), data));
    }
    assert_eq!(seen, vec![("a".to_string(), b"ay".to_vec()), ("b".to_string(), b"bee".to_vec())]);
}

#[tokio::test]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    let perm = client.register_dataset(&token, &files(&[("keep.txt", b"persisted")]), &BTreeMap::new()).await.unwrap();
    let before = client.resolve_dataset(&token, &perm).await.unwrap();
    client.publish(&token, &perm).await.unwrap();
    server.shutdown().await;

    let (_server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    assert_eq!(client.resolve_dataset(&token, &perm).await.unwrap(), before);
    assert_eq!(client.read_file(&token, &perm, "keep.txt", None).await.unwrap(), b"persisted");
    assert_eq!(client.publication(&token, &perm).await.unwrap().unwrap().doi, "10.5281/rrp-sim.1");
    let next = client.register_dataset(&token, &files(&[("n", b"n")]), &BTreeMap::new()).await.unwrap();
    assert_eq!(seq_of(&next), 2);
}

#[tokio::test]
async fn port_in_use_and_unwritable_dir() {
    let dir = tempfile::tempdir().unwrap();
    let (server, _) = start(dir.path()).await;
    let other = tempfile::tempdir().unwrap();
    let mut cfg = RdmsServerConfig::new(other.path());
    cfg.bind = server.addr();
    assert_eq!(serve_reference_rdms(cfg).await.err(), Some(RdmsError::PortInUse(server.addr().port())));

    let file = dir.path().join("not-a-dir");
    std::fs::write(&file, b"").unwrap();
    assert!(matches!(
        serve_reference_rdms(RdmsServerConfig::new(file.join("data"))).await,
        Err(RdmsError::DataDirUnwritable(_))
    ));
}

#[tokio::test]
async fn expired_and_missing_tokens_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    let perm = client.register_dataset(&token, &files(&[("x", b"1")]), &BTreeMap::new()).await.unwrap();
    server.expire_tokens();
    assert_eq!(client.resolve_dataset(&token, &perm).await.unwrap_err(), RdmsError::AuthFailed);
    assert_eq!(client.publish(&token, &perm).await.unwrap_err(), RdmsError::AuthFailed);
    assert_eq!(client.read_file(&token, &perm, "x", None).await.unwrap_err(), RdmsError::AuthFailed);

    let mut forged = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    forged.token.push('x');
    assert_eq!(client.resolve_dataset(&forged, &perm).await.unwrap_err(), RdmsError::AuthFailed);
}

#[tokio::test]
async fn unreachable_server_is_distinct_from_auth_failure() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = RdmsClient::new(&format!("http://{addr}")).unwrap();
    assert!(matches!(client.login(DEMO_USER, DEMO_PASSWORD).await, Err(RdmsError::ServerUnreachable(_))));
}

#[tokio::test]
async fn mount_materializes_verified_read_only_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (server, client) = start(dir.path()).await;
    let token = client.login(DEMO_USER, DEMO_PASSWORD).await.unwrap();
    let raw = client.register_dataset(&token, &files(&[("a.csv", b"1,2"), ("deep/b.csv", b"3,4")]), &BTreeMap::new()).await.unwrap();
    let other = client.register_dataset(&token, &files(&[("c.csv", b"5,6")]), &BTreeMap::new()).await.unwrap();
    let ws = tempfile::tempdir().unwrap();

    let bind = |perm: &str, folder: &str| DatasetBinding { server_url: server.url(), perm_id: perm.into(), folder: folder.into() };
    let r1 = client.mount_dataset(&token, &bind(&raw, "raw_data"), ws.path()).await.unwrap();
    let r2 = client.mount_dataset(&token, &bind(&other, "more"), ws.path()).await.unwrap();
    assert!(r1.verified && r2.verified);
    assert_eq!(r1.local_path, ws.path().join("openbis/raw_data"));
    assert_eq!((r1.files_materialized, r1.bytes), (2, 6));
    assert_eq!(std::fs::read(ws.path().join("openbis/raw_data/deep/b.csv")).unwrap(), b"3,4");
    assert_eq!(std::fs::read(ws.path().join("openbis/more/c.csv")).unwrap(), b"5,6");
    assert!(!ws.path().join("openbis/more/a.csv").exists());

    let meta = std::fs::metadata(ws.path().join("openbis/raw_data/a.csv")).unwrap();
    assert!(meta.permissions().readonly());
    assert!(std::fs::metadata(ws.path().join("openbis/raw_data/deep")).unwrap().permissions().readonly());

    // Re-hashing the local tree reproduces the descriptor.
    let d = client.resolve_dataset(&token, &raw).await.unwrap();
    for f in &d.files {
        let (h, n) = rrp_core::digest::sha256_file(&r1.local_path.join(&f.path)).unwrap();
        assert_eq!((h, n), (f.content_hash.clone(), f.byte_size));
    }

    // Mounting again replaces the read-only tree.
    client.mount_dataset(&token, &bind(&raw, "raw_data"), ws.path()).await.unwrap();

    server.corrupt_file(&raw, "deep/b.csv").unwrap();
    let err = client.mount_dataset(&token, &bind(&raw, "raw_data"), ws.path()).await.unwrap_err();
    assert_eq!(err, RdmsError::ChecksumMismatch { path: "deep/b.csv".into() });

    assert!(matches!(
        client.mount_dataset(&token, &bind("missing", "x"), ws.path()).await,
        Err(RdmsError::DatasetNotFound(_))
    ));
}
