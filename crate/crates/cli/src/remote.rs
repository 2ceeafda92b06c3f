//! Subcommands that talk to a running service.

use std::io::BufRead;
use std::path::PathBuf;

use futures::StreamExt;
use rrp_api::types::{CreateProjectRequest, PushRequest, StartRequest, UploadRequest};
use rrp_api::{ApiClient, ApiToken, DEFAULT_PORT};
use rrp_core::orchestrator::{ProjectRecord, ProjectStatus};
use serde::{Deserialize, Serialize};

use crate::render::{self, json};
use crate::{Command, Failure, Global, Io, Outcome};

const TOKEN_FILE: &str = "token.json";

#[derive(Debug, Serialize, Deserialize)]
struct Saved {
    server: String,
    token: ApiToken,
}

fn config_dir(g: &Global) -> PathBuf {
    g.config_dir
        .clone()
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".rrp")))
        .unwrap_or_else(|| PathBuf::from(".rrp"))
}

fn load_saved(g: &Global) -> Option<Saved> {
    let text = std::fs::read_to_string(config_dir(g).join(TOKEN_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn save(g: &Global, saved: &Saved) -> std::io::Result<PathBuf> {
    let dir = config_dir(g);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(TOKEN_FILE);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(saved)?)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&tmp, std::fs::Permissions::from_mode(0o600))?;
    }
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

fn default_server() -> String {
    let port = std::env::var("RRP_PORT").ok().and_then(|p| p.parse::<u16>().ok()).unwrap_or(DEFAULT_PORT);
    format!("http://127.0.0.1:{port}")
}

fn client(g: &Global) -> ApiClient {
    let saved = load_saved(g);
    let server = g.server.clone().or_else(|| saved.as_ref().map(|s| s.server.clone())).unwrap_or_else(default_server);
    let c = if g.insecure { ApiClient::insecure(&server) } else { ApiClient::new(&server) };
    let saved_token = saved.filter(|s| s.server.trim_end_matches('/') == c.base_url()).map(|s| s.token.token);
    match g.token.clone().or(saved_token) {
        Some(t) => c.with_token(t),
        None => c,
    }
}

fn read_password(io: &mut Io<'_>) -> Result<String, Failure> {
    io.note("password: ");
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line).map_err(|e| Failure::system(e.to_string()))?;
    Ok(line.trim_end_matches(['\n', '\r']).to_owned())
}

pub async fn run(command: Command, g: &Global, io: &mut Io<'_>) -> Outcome {
    let c = client(g);
    match command {
        Command::Login { user, password } => {
            let password = match password {
                Some(p) => p,
                None => read_password(io)?,
            };
            let mut c = c;
            let token = c.login(&user, &password).await?;
            let path = save(g, &Saved { server: c.base_url().to_owned(), token: token.clone() })
                .map_err(|e| Failure::system(format!("cannot save token: {e}")))?;
            if g.json {
                json(io, &token);
            } else {
                io.line(format!("signed in as {} until {}", token.user_id, token.expires_at.to_rfc3339()));
                io.note(format!("token saved to {}", path.display()));
            }
        }
        Command::Health => {
            let h = c.health().await?;
            if g.json { json(io, &h) } else { io.line(format!("{} ({})", h.status, h.version)) }
        }
        Command::Create { repo, git_ref, name, credentials, no_wait } => {
            let req = CreateProjectRequest { repo_url: repo, r#ref: git_ref, name, credentials };
            let rec = c.create_project(&req).await?;
            let rec = if no_wait { rec } else { follow_build(&c, &rec.project_id, !g.json, io).await? };
            if g.json { json(io, &rec) } else { io.line(render::project(&rec)) }
            if rec.status == ProjectStatus::Failed {
                return Err(Failure::user(format!("project {} failed: {}", rec.project_id, rec.failure.unwrap_or_default())));
            }
        }
        Command::List => {
            let list = c.list_projects().await?;
            if g.json { json(io, &list) } else { io.line(render::projects(&list)) }
        }
        Command::Show { id } => {
            let rec = c.get_project(&id).await?;
            if g.json { json(io, &rec) } else { io.line(render::project(&rec)) }
        }
        Command::Start { id, cpu, mem } => {
            let req = (cpu.is_some() || mem.is_some()).then_some(StartRequest { cpu_cores: cpu, memory_bytes: mem });
            let info = c.start_project(&id, req.as_ref()).await?;
            if g.json {
                json(io, &info);
            } else {
                io.line(format!("{} running at {}{}", info.project_id, c.base_url(), info.public_path));
            }
        }
        Command::Stop { id } => record_out(g, io, c.stop_project(&id).await?),
        Command::Delete { id } => record_out(g, io, c.delete_project(&id).await?),
        Command::Results { id, get: None, .. } => {
            let list = c.list_results(&id).await?;
            if g.json { json(io, &list) } else { io.line(render::results(&list)) }
        }
        Command::Results { id, get: Some(path), output } => {
            let bytes = c.read_result(&id, &path).await?;
            match output {
                Some(out) => {
                    std::fs::write(&out, &bytes).map_err(|e| Failure::system(format!("{}: {e}", out.display())))?;
                    io.note(format!("wrote {} bytes to {}", bytes.len(), out.display()));
                }
                None => {
                    io.out.write_all(&bytes).map_err(|e| Failure::system(e.to_string()))?;
                }
            }
        }
        Command::Upload { id, path } => {
            let r = c.upload_result(&id, &UploadRequest { path, ..Default::default() }).await?;
            if g.json { json(io, &r) } else { io.line(r.perm_id) }
        }
        Command::Archive { id } => {
            let r = c.archive_project(&id).await?;
            if g.json { json(io, &r) } else { io.line(r.perm_id) }
        }
        Command::Share { id } => {
            let share = c.create_share(&id).await?;
            if g.json { json(io, &share) } else { io.line(&share.share_id) }
        }
        Command::OpenShare { share_id } => {
            let rec = c.open_share(&share_id).await?;
            record_out(g, io, rec.clone());
            if rec.status == ProjectStatus::Failed {
                return Err(Failure::user(format!("opening the share failed: {}", rec.failure.unwrap_or_default())));
            }
        }
        Command::Events { id, after, follow } => {
            if follow {
                let mut frames = c.events(&id, after).await?;
                while let Some(frame) = frames.next().await {
                    let frame = frame?;
                    if g.json {
                        io.line(frame.data.to_string());
                    } else {
                        io.line(format!("{:>6}  {:<15}  {}", frame.sequence().unwrap_or(0), frame.event_type, frame.payload().unwrap_or("")));
                    }
                }
            } else {
                let events: Vec<_> = c.journal(&id).await?.into_iter().filter(|e| e.sequence > after).collect();
                if g.json {
                    json(io, &events);
                } else {
                    for e in events {
                        io.line(format!("{:>6}  {:<15}  {}", e.sequence, rrp_api::sse::event_type(e.kind), e.payload));
                    }
                }
            }
        }
        Command::Exec { id, argv } => {
            let out = c.exec(&id, &argv).await?;
            if g.json {
                json(io, &out);
            } else {
                let _ = io.out.write_all(out.output.as_bytes());
            }
            if out.exit_code != 0 {
                return Err(Failure::user(format!("command exited with status {}", out.exit_code)));
            }
        }
        Command::Push { id, registry, username, password } => {
            let receipt = c.push_image(&id, &PushRequest { registry_url: registry, username, password }).await?;
            if g.json { json(io, &receipt) } else { io.line(&receipt.remote_reference) }
        }
        Command::Bundle { id, output, script } => {
            let dl = c.download_bundle(&id, script, &output).await?;
            for w in &dl.warnings {
                io.note(format!("warning: {w}"));
            }
            if g.json {
                json(io, &serde_json::json!({ "path": output, "bytes": dl.bytes, "warnings": dl.warnings }));
            } else {
                io.line(format!("wrote {} ({} bytes)", output.display(), dl.bytes));
            }
        }
        Command::Serve(_) | Command::RdmsServe(_) | Command::Verify { .. } | Command::Play(_) => {
            unreachable!("local commands are dispatched elsewhere")
        }
    }
    Ok(())
}

fn record_out(g: &Global, io: &mut Io<'_>, rec: ProjectRecord) {
    if g.json { json(io, &rec) } else { io.line(format!("{}  {}", rec.project_id, rec.status)) }
}

/// Streams status and build log to stderr until the project settles.
async fn follow_build(c: &ApiClient, id: &str, verbose: bool, io: &mut Io<'_>) -> Result<ProjectRecord, Failure> {
    let mut frames = c.events(id, 0).await?;
    while let Some(frame) = frames.next().await {
        let frame = frame?;
        if frame.is_gap() {
            // Resume from the first missing event.
            frames = c.events(id, frame.sequence().unwrap_or(1).saturating_sub(1)).await?;
            continue;
        }
        let payload = frame.payload().unwrap_or_default();
        if verbose {
            match frame.event_type.as_str() {
                "status" => io.note(format!("[{payload}]")),
                _ => io.note(payload),
            }
        }
        if frame.event_type == "status" && matches!(payload, "Ready" | "Failed" | "Deleted") {
            break;
        }
    }
    Ok(c.get_project(id).await?)
}
