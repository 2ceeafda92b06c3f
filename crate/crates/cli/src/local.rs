//! Subcommands that run on this machine: the service, the reference RDMS,
//! and bundle verification and playback.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use rrp_api::{ServeConfig, ServeError, TlsFiles, DEFAULT_PORT};
use rrp_core::bundler::{
    play_bundle, play_script, read_manifest, verify_bundle, BundleError, BundleKind, HttpFetcher, Playback,
};
use rrp_core::orchestrator::Orchestrator;
use rrp_core::rdms::{serve_reference_rdms, RdmsClient, RdmsServerConfig, DEMO_PASSWORD, DEMO_USER};
use rrp_core::runtime::{DockerRuntime, RuntimeAdapter, SimConfig, SimRuntime};
use rrp_core::{demo, PlatformConfig};

use crate::render::json;
use crate::{Failure, Io, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuntimeKind {
    /// A local Docker-compatible daemon.
    Docker,
    /// In-process simulation; runs only registered demo programs.
    Sim,
}

#[derive(Debug, Clone, Args)]
pub struct RuntimeArgs {
    #[arg(long, value_enum, env = "RRP_RUNTIME", default_value = "docker")]
    pub runtime: RuntimeKind,
    /// Daemon socket or URL (default: the Docker environment settings).
    #[arg(long, env = "RRP_RUNTIME_ENDPOINT")]
    pub runtime_endpoint: Option<String>,
}

impl RuntimeArgs {
    async fn connect(&self) -> Result<Arc<dyn RuntimeAdapter>, Failure> {
        match self.runtime {
            RuntimeKind::Sim => {
                let sim = SimRuntime::new(SimConfig::default());
                demo::register_sim_programs(&sim);
                Ok(Arc::new(sim))
            }
            RuntimeKind::Docker => {
                let docker = DockerRuntime::connect(self.runtime_endpoint.as_deref())
                    .await
                    .map_err(|e| Failure::system(format!("container runtime: {e}")))?;
                Ok(Arc::new(docker))
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    #[arg(long, env = "RRP_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Platform settings in TOML; flags and environment take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "RRP_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "RRP_RDMS_URL")]
    pub rdms_url: Option<String>,
    #[command(flatten)]
    pub runtime: RuntimeArgs,
    /// Built web console to serve at `/`.
    #[arg(long, env = "RRP_UI_DIR")]
    pub ui_dir: Option<PathBuf>,
    /// PEM certificate chain; serves HTTPS together with --tls-key.
    #[arg(long, requires = "tls_key")]
    pub tls_cert: Option<PathBuf>,
    #[arg(long, requires = "tls_cert")]
    pub tls_key: Option<PathBuf>,
}

fn init_tracing() {
    use tracing_subscriber::filter::LevelFilter;
    let level = std::env::var("RRP_LOG").ok().and_then(|v| v.parse::<LevelFilter>().ok()).unwrap_or(LevelFilter::INFO);
    let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
    let _ = tracing_subscriber::fmt().with_max_level(level).with_ansi(ansi).with_writer(std::io::stderr).try_init();
}

/// Resolves on Ctrl-C or SIGTERM.
async fn stop_requested() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        if let Ok(mut term) = signal(SignalKind::terminate()) {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
            return;
        }
    }
    let _ = tokio::signal::ctrl_c().await;
}

pub async fn serve(args: ServeArgs, io: &mut Io<'_>) -> Outcome {
    init_tracing();
    let mut config = match &args.config {
        Some(path) => PlatformConfig::from_toml_file(path)
            .map_err(|e| Failure::user(format!("{}: {e}", path.display())))?,
        None => PlatformConfig::default(),
    };
    if let Some(dir) = args.data_dir {
        config.data_root = dir;
    }
    if let Some(url) = args.rdms_url {
        config.rdms_url = url;
    }
    let runtime = args.runtime.connect().await?;
    let orchestrator = Orchestrator::open(config, runtime)
        .await
        .map_err(|e| Failure::system(format!("cannot open the data directory: {e}")))?;
    let serve_config = ServeConfig {
        bind: SocketAddr::new(args.bind, args.port),
        ui_dir: args.ui_dir,
        tls: args.tls_cert.zip(args.tls_key).map(|(cert, key)| TlsFiles { cert, key }),
        ..ServeConfig::default()
    };
    let handle = rrp_api::serve(orchestrator, serve_config).await.map_err(|e| match e {
        ServeError::PortInUse(port) => {
            Failure::system(format!("port {port} is already in use; pick another with --port or RRP_PORT"))
        }
        other => Failure::system(other.to_string()),
    })?;
    io.line(format!("listening on {}", handle.url()));
    let _ = io.out.flush();
    stop_requested().await;
    io.note("shutting down");
    handle.shutdown().await;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct RdmsServeArgs {
    /// Where datasets are stored.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    #[arg(long, default_value_t = 8443)]
    pub port: u16,
    /// Extra account as NAME:PASSWORD; repeatable. The demo account always exists.
    #[arg(long = "user", value_parser = parse_account)]
    pub users: Vec<(String, String)>,
    /// Register the demo dataset at startup and print its permId.
    #[arg(long)]
    pub demo_dataset: bool,
}

fn parse_account(s: &str) -> Result<(String, String), String> {
    match s.split_once(':') {
        Some((u, p)) if !u.is_empty() => Ok((u.to_owned(), p.to_owned())),
        _ => Err(format!("expected NAME:PASSWORD, got {s:?}")),
    }
}

pub async fn rdms_serve(args: RdmsServeArgs, io: &mut Io<'_>) -> Outcome {
    init_tracing();
    let mut config = RdmsServerConfig::new(&args.data);
    config.bind = SocketAddr::new(args.bind, args.port);
    for (u, p) in &args.users {
        config = config.with_user(u, p);
    }
    let handle = serve_reference_rdms(config).await.map_err(|e| Failure::system(e.to_string()))?;
    io.line(format!("RDMS listening on {}", handle.url()));
    if args.demo_dataset {
        let client = RdmsClient::new(&handle.url()).map_err(|e| Failure::system(e.to_string()))?;
        let registered = async {
            let token = client.login(DEMO_USER, DEMO_PASSWORD).await?;
            demo::register_demo_dataset(&client, &token, demo::DEFAULT_SEED).await
        }
        .await;
        match registered {
            Ok(perm_id) => io.line(format!("demo dataset {perm_id}")),
            Err(e) => {
                handle.shutdown().await;
                return Err(Failure::system(format!("registering the demo dataset: {e}")));
            }
        }
    }
    let _ = io.out.flush();
    stop_requested().await;
    handle.shutdown().await;
    Ok(())
}

fn bundle_failure(e: BundleError) -> Failure {
    match e {
        BundleError::WorkDirNotEmpty(_) | BundleError::WrongKind { .. } => Failure::user(e.to_string()),
        other => Failure::system(other.to_string()),
    }
}

pub fn verify(file: &Path, as_json: bool, io: &mut Io<'_>) -> Outcome {
    let report = verify_bundle(file).map_err(bundle_failure)?;
    if as_json {
        json(io, &report);
    } else {
        if let Some(m) = &report.manifest {
            io.line(format!("{} ({:?}) at commit {}", m.project_name, m.kind, m.commit_id));
        }
        for f in &report.failures {
            io.line(format!("MISMATCH  {}  expected {}  got {}", f.path, f.expected_hash, f.actual_hash));
        }
        if report.ok {
            io.line(format!("ok: {} entries verified", report.entries.len()));
        }
    }
    if report.ok {
        Ok(())
    } else {
        let paths: Vec<_> = report.failures.iter().map(|f| f.path.as_str()).collect();
        Err(Failure::system(format!("verification failed: {}", paths.join(", "))))
    }
}

#[derive(Debug, Clone, Args)]
pub struct PlayArgs {
    pub file: PathBuf,
    /// Empty or missing directory to unpack into (default: <file>.play next to the archive).
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[command(flatten)]
    pub runtime: RuntimeArgs,
    /// Run this command in the session, print its output and stop.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    pub exec: Option<Vec<String>>,
}

fn default_work_dir(file: &Path) -> PathBuf {
    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "bundle".into());
    let stem = name.strip_suffix(".tar.gz").unwrap_or(&name);
    file.with_file_name(format!("{stem}.play"))
}

pub async fn play(args: PlayArgs, as_json: bool, io: &mut Io<'_>) -> Outcome {
    let kind = read_manifest(&args.file).map_err(bundle_failure)?.kind;
    let work_dir = args.work_dir.clone().unwrap_or_else(|| default_work_dir(&args.file));
    let runtime = args.runtime.connect().await?;
    let playback = match kind {
        BundleKind::Bundle => play_bundle(&args.file, runtime.as_ref(), &work_dir).await,
        BundleKind::Script => play_script(&args.file, &HttpFetcher::default(), runtime.as_ref(), &work_dir).await,
    }
    .map_err(bundle_failure)?;
    report_playback(&playback, as_json, io);

    let session_id = playback.session.session_id.clone();
    if let Some(argv) = args.exec {
        let result = runtime.exec(&session_id, &argv).await;
        let _ = runtime.destroy_session(&session_id).await;
        let out = result.map_err(|e| Failure::system(e.to_string()))?;
        let _ = io.out.write_all(out.output.as_bytes());
        if out.exit_code != 0 {
            return Err(Failure::user(format!("command exited with status {}", out.exit_code)));
        }
        return Ok(());
    }
    if args.runtime.runtime == RuntimeKind::Docker {
        io.note(format!("session {session_id} keeps running; stop it with your container tooling"));
        return Ok(());
    }
    // The simulated session lives in this process.
    let _ = io.out.flush();
    stop_requested().await;
    let _ = runtime.destroy_session(&session_id).await;
    Ok(())
}

fn report_playback(p: &Playback, as_json: bool, io: &mut Io<'_>) {
    if as_json {
        json(io, p);
    } else {
        io.line(format!("{} at commit {}", p.manifest.project_name, p.manifest.commit_id));
        io.line(format!("unpacked to {}", p.work_dir.display()));
        io.line(format!("session {} at {}", p.session.session_id, p.local_url));
    }
}
