//! The `rrp` command-line tool.
//!
//! Remote subcommands are thin clients of the REST API; `serve`,
//! `rdms-serve`, `play` and `verify` run locally. Exit status is 0 on
//! success, 1 for user errors (bad input, 4xx answers, dirty repositories)
//! and 2 for system errors (unreachable services, 5xx answers, failed
//! verification).

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod local;
mod remote;
mod render;

pub use render::parse_bytes;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_SYSTEM: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rrp", version, about = "Reproducible research platform")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Service URL. Defaults to the server of the last login, then to
    /// http://127.0.0.1:$RRP_PORT.
    #[arg(long, global = true, env = "RRP_SERVER")]
    pub server: Option<String>,
    /// API token; defaults to the one saved by `login`.
    #[arg(long, global = true, env = "RRP_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Where `login` keeps its token (default: ~/.rrp).
    #[arg(long, global = true, env = "RRP_HOME")]
    pub config_dir: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Accept self-signed server certificates.
    #[arg(long, global = true)]
    pub insecure: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the platform service.
    Serve(local::ServeArgs),
    /// Run the reference RDMS server.
    RdmsServe(local::RdmsServeArgs),
    /// Sign in with RDMS credentials and save the token.
    Login {
        #[arg(long, env = "RRP_USER")]
        user: String,
        /// Read from standard input when omitted.
        #[arg(long, env = "RRP_PASSWORD", hide_env_values = true)]
        password: Option<String>,
    },
    /// Check that the service is up.
    Health,
    /// Create a project from a Git repository and wait for its build.
    Create {
        #[arg(long)]
        repo: String,
        /// Branch, tag or commit.
        #[arg(long = "ref")]
        git_ref: Option<String>,
        #[arg(long)]
        name: Option<String>,
        /// Secret for a private repository.
        #[arg(long, env = "RRP_REPO_CREDENTIALS", hide_env_values = true)]
        credentials: Option<String>,
        /// Return as soon as the project is registered.
        #[arg(long)]
        no_wait: bool,
    },
    /// List projects.
    List,
    /// Show one project.
    Show { id: String },
    /// Start a project's session.
    Start {
        id: String,
        #[arg(long)]
        cpu: Option<f64>,
        /// Bytes, or with a K/M/G/T suffix.
        #[arg(long, value_parser = parse_bytes)]
        mem: Option<u64>,
    },
    Stop { id: String },
    Delete { id: String },
    /// List results, or download one with --get.
    Results {
        id: String,
        #[arg(long)]
        get: Option<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Register a result file or directory as an RDMS dataset.
    Upload { id: String, path: String },
    /// Store the project (code, results, image) as an RDMS dataset.
    Archive { id: String },
    /// Create a share id for a project.
    Share { id: String },
    /// Open a share as a new project of your own.
    OpenShare { share_id: String },
    /// Print a project's events; --follow keeps streaming.
    Events {
        id: String,
        /// Last sequence already seen.
        #[arg(long, default_value_t = 0)]
        after: u64,
        #[arg(long)]
        follow: bool,
    },
    /// Run a command inside a running session.
    Exec {
        id: String,
        #[arg(trailing_var_arg = true, required = true, allow_hyphen_values = true)]
        argv: Vec<String>,
    },
    /// Push a project's image to a registry.
    Push {
        id: String,
        #[arg(long)]
        registry: String,
        #[arg(long, env = "RRP_REGISTRY_USER")]
        username: Option<String>,
        #[arg(long, env = "RRP_REGISTRY_PASSWORD", hide_env_values = true)]
        password: Option<String>,
    },
    /// Export a player bundle (or with --script, a player script).
    Bundle {
        id: String,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        script: bool,
    },
    /// Verify a bundle or player script without running it.
    Verify { file: PathBuf },
    /// Verify and run a bundle or player script locally.
    Play(local::PlayArgs),
}

/// Outcome of a subcommand: exit status plus a message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn user(message: impl Into<String>) -> Self {
        Self { code: EXIT_USER, message: message.into() }
    }

    pub fn system(message: impl Into<String>) -> Self {
        Self { code: EXIT_SYSTEM, message: message.into() }
    }
}

impl From<rrp_api::ClientError> for Failure {
    fn from(e: rrp_api::ClientError) -> Self {
        let code = if e.is_user_error() { EXIT_USER } else { EXIT_SYSTEM };
        Failure { code, message: e.to_string() }
    }
}

pub type Outcome = Result<(), Failure>;

/// Output sinks, so tests can capture what a command prints.
pub struct Io<'a> {
    pub out: &'a mut (dyn Write + Send),
    pub err: &'a mut (dyn Write + Send),
}

impl Io<'_> {
    pub fn line(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.out, "{}", text.as_ref());
    }

    pub fn note(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.err, "{}", text.as_ref());
    }
}

/// Parses `args` (including the program name) and runs the command.
pub async fn run<I, S>(args: I, io: &mut Io<'_>) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() { io.note(text.trim_end()) } else { io.line(text.trim_end()) }
            return code;
        }
    };
    match dispatch(cli, io).await {
        Ok(()) => EXIT_OK,
        Err(f) => {
            io.note(format!("error: {}", f.message));
            f.code
        }
    }
}

async fn dispatch(cli: Cli, io: &mut Io<'_>) -> Outcome {
    let g = cli.global;
    match cli.command {
        Command::Serve(args) => local::serve(args, io).await,
        Command::RdmsServe(args) => local::rdms_serve(args, io).await,
        Command::Verify { file } => local::verify(&file, g.json, io),
        Command::Play(args) => local::play(args, g.json, io).await,
        other => remote::run(other, &g, io).await,
    }
}
