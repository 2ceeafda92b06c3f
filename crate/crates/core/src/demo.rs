//! The bundled demo project.
//!
//! A tiny repository with a Python environment, one dataset binding and a
//! deterministic analysis script. The script lists every file under
//! `/openbis` with its size and SHA-256 and writes the table to
//! `/results/out.csv`, so result hashes depend only on the mounted data.
//! [`sim_workload`] is the same computation for the simulated runtime.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::digest::sha256_hex;
use crate::config::PlatformConfig;
use crate::orchestrator::{Caller, Orchestrator};
use crate::project::{self, DatasetBinding, ProjectError, ProjectSource};
use crate::rdms::{serve_reference_rdms, RdmsClient, RdmsServerConfig, RdmsServerHandle, SessionToken, DEMO_PASSWORD, DEMO_USER};
use crate::runtime::{RuntimeAdapter, SimConfig, SimFs, SimRuntime};

pub const DATASET_FOLDER: &str = "raw_data";
pub const RESULT_FILE: &str = "out.csv";
pub const ANALYZE_SCRIPT: &str = "analyze.sh";
pub const DEFAULT_SEED: u64 = 0x5252_5044;
/// Second account on the demo RDMS, for sharing between users.
pub const COLLABORATOR_USER: &str = "rrp-collaborator";
pub const COLLABORATOR_PASSWORD: &str = "rrp-collaborator";
const DATA_FILE_BYTES: usize = 512 * 1024;

/// Command that runs the analysis inside a session.
pub fn workload_command() -> Vec<String> {
    vec!["sh".into(), format!("/project/{ANALYZE_SCRIPT}")]
}

pub const ANALYZE_SH: &str = r#"#!/bin/sh
# Lists every mounted dataset file with its size and SHA-256.
set -eu
out="${RRP_RESULTS_DIR:-/results}/out.csv"
list=$(mktemp)
cd "${RRP_DATA_DIR:-/openbis}"
find . -type f | sed 's|^\./||' | LC_ALL=C sort > "$list"
{
  echo "path,bytes,sha256"
  while IFS= read -r f; do
    printf '%s,%s,%s\n' "$f" "$(wc -c < "$f" | tr -d ' ')" "$(sha256sum "$f" | cut -d' ' -f1)"
  done < "$list"
} > "$out"
rm -f "$list"
echo "wrote /results/out.csv"
"#;

/// Files of the demo dataset: two pseudo-random measurement blocks and a note.
pub fn dataset_files(seed: u64) -> Vec<(String, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = || {
        let mut b = vec![0u8; DATA_FILE_BYTES];
        rng.fill_bytes(&mut b);
        b
    };
    vec![
        ("README.txt".into(), format!("Synthetic measurements, seed {seed}.\n").into_bytes()),
        ("measurements/run-1.bin".into(), block()),
        ("measurements/run-2.bin".into(), block()),
    ]
}

pub fn dataset_metadata() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("title".to_owned(), "RRP demo measurements".to_owned()),
        ("kind".to_owned(), "raw_data".to_owned()),
    ])
}

pub async fn register_demo_dataset(client: &RdmsClient, token: &SessionToken, seed: u64) -> crate::rdms::Result<String> {
    client.register_dataset(token, &dataset_files(seed), &dataset_metadata()).await
}

/// Expected `out.csv` for a set of files mounted under `/openbis/<folder>/`.
pub fn expected_output<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut rows: Vec<(String, usize, String)> =
        files.into_iter().map(|(p, b)| (p.to_owned(), b.len(), sha256_hex(b))).collect();
    rows.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    let mut out = String::from("path,bytes,sha256\n");
    for (p, n, h) in rows {
        out.push_str(&format!("{p},{n},{h}\n"));
    }
    out
}

/// The analysis script on the simulated runtime.
pub fn sim_workload(fs: &mut SimFs<'_>) -> Result<String, String> {
    let paths = fs.list("/openbis").map_err(|e| e.to_string())?;
    let mut files = Vec::with_capacity(paths.len());
    for p in &paths {
        let rel = p.strip_prefix("/openbis/").unwrap_or(p).to_owned();
        files.push((rel, fs.read(p).map_err(|e| e.to_string())?));
    }
    let csv = expected_output(files.iter().map(|(p, b)| (p.as_str(), b.as_slice())));
    fs.write("/results/out.csv", csv.as_bytes()).map_err(|e| e.to_string())?;
    Ok("wrote /results/out.csv\n".into())
}

pub fn register_sim_programs(sim: &SimRuntime) {
    sim.register_program(&workload_command().join(" "), std::sync::Arc::new(sim_workload));
}

/// Writes the demo repository to `root` (created if needed), commits it on
/// branch `main` and returns the commit id.
pub fn write_fixture_repo(root: &Path, rdms_url: &str, perm_id: &str) -> Result<String, ProjectError> {
    let io = |e: std::io::Error| ProjectError::Git(e.to_string());
    std::fs::create_dir_all(root.join(".binder")).map_err(io)?;
    std::fs::create_dir_all(root.join(".rrp")).map_err(io)?;
    let files: [(&str, String); 7] = [
        (".binder/runtime.txt", "python-3.10\n".into()),
        (".binder/requirements.txt", "tabulate==0.9.0\n".into()),
        (".binder/apt.txt", "# tools used by analyze.sh\ncoreutils\nfindutils\n".into()),
        (".binder/start", "exec python3 -m http.server 8888 --bind 0.0.0.0 --directory /results\n".into()),
        (
            project::MANIFEST_PATH,
            project::serialize_datasets_manifest(&[DatasetBinding {
                server_url: rdms_url.to_owned(),
                perm_id: perm_id.to_owned(),
                folder: DATASET_FOLDER.to_owned(),
            }]),
        ),
        (ANALYZE_SCRIPT, ANALYZE_SH.into()),
        ("README.md", "# RRP demo\n\nRun `sh analyze.sh` inside a session; the table lands in `results/out.csv`.\n".into()),
    ];
    for (rel, content) in files {
        std::fs::write(root.join(rel), content).map_err(io)?;
    }
    std::fs::write(root.join(".gitignore"), "__pycache__/\n").map_err(io)?;
    if !root.join(".git").exists() {
        project::git::init_repository(root)?;
    }
    project::git::commit_all(root, "RRP demo project")
}

/// Expected `out.csv` for the demo dataset mounted at its default folder.
pub fn expected_demo_output(seed: u64) -> String {
    let files: Vec<(String, Vec<u8>)> =
        dataset_files(seed).into_iter().map(|(p, b)| (format!("{DATASET_FOLDER}/{p}"), b)).collect();
    expected_output(files.iter().map(|(p, b)| (p.as_str(), b.as_slice())))
}

pub type DemoError = Box<dyn std::error::Error + Send + Sync>;

/// A complete local platform around the demo project: a reference RDMS with
/// the demo dataset, the committed fixture repository and an orchestrator.
pub struct DemoPlatform {
    pub root: PathBuf,
    pub rdms: RdmsServerHandle,
    pub token: SessionToken,
    pub caller: Caller,
    pub perm_id: String,
    pub repo: PathBuf,
    pub commit: String,
    pub runtime: Arc<dyn RuntimeAdapter>,
    /// Set when running on the simulated backend.
    pub sim: Option<Arc<SimRuntime>>,
    pub orchestrator: Orchestrator,
}

impl DemoPlatform {
    /// Everything under `root`, on a fresh simulated runtime.
    pub async fn start(root: &Path) -> Result<Self, DemoError> {
        let sim = Arc::new(SimRuntime::new(SimConfig::default()));
        register_sim_programs(&sim);
        let mut platform = Self::start_with(root, sim.clone()).await?;
        platform.sim = Some(sim);
        Ok(platform)
    }

    pub async fn start_with(root: &Path, runtime: Arc<dyn RuntimeAdapter>) -> Result<Self, DemoError> {
        std::fs::create_dir_all(root)?;
        let rdms = serve_reference_rdms(
            RdmsServerConfig::new(root.join("rdms")).with_user(COLLABORATOR_USER, COLLABORATOR_PASSWORD),
        ).await?;
        let client = RdmsClient::new(&rdms.url())?;
        let token = client.login(DEMO_USER, DEMO_PASSWORD).await?;
        let perm_id = register_demo_dataset(&client, &token, DEFAULT_SEED).await?;
        let repo = root.join("fixture");
        let commit = write_fixture_repo(&repo, &rdms.url(), &perm_id)?;
        let config = PlatformConfig { data_root: root.join("data"), rdms_url: rdms.url(), ..PlatformConfig::default() };
        let orchestrator = Orchestrator::open(config, runtime.clone()).await?;
        Ok(Self {
            root: root.to_path_buf(),
            caller: Caller::new(token.clone()),
            token,
            rdms,
            perm_id,
            repo,
            commit,
            runtime,
            sim: None,
            orchestrator,
        })
    }

    /// Signs in the second demo account.
    pub async fn collaborator(&self) -> Result<Caller, DemoError> {
        let client = RdmsClient::new(&self.rdms.url())?;
        Ok(Caller::new(client.login(COLLABORATOR_USER, COLLABORATOR_PASSWORD).await?))
    }

    pub fn source(&self) -> ProjectSource {
        ProjectSource::new(self.repo.to_string_lossy())
    }
}
