//! Container daemon backend over the Docker Engine API.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use async_trait::async_trait;
use bollard::auth::DockerCredentials;
use bollard::errors::Error as DockerError;
use bollard::models::{ContainerCreateBody, ExecConfig, HostConfig, PortBinding};
use bollard::query_parameters::{
    BuildImageOptionsBuilder, CreateContainerOptionsBuilder, CreateImageOptionsBuilder, DownloadFromContainerOptionsBuilder,
    ImportImageOptionsBuilder, PushImageOptionsBuilder, RemoveContainerOptionsBuilder, StopContainerOptionsBuilder,
    TagImageOptionsBuilder, UploadToContainerOptionsBuilder,
};
use bollard::{body_full, Docker, API_DEFAULT_VERSION};
use bytes::Bytes;
use futures::{StreamExt, TryStreamExt};

use super::{
    normalize_container_path, remote_reference, BuildResult, ExecOutput, LogSink, ProxyRequest, ProxyResponse,
    PushReceipt, RegistryCredentials, ResourceLimits, Result, RuntimeAdapter, RuntimeError, SessionHandle,
    SessionRequest, SessionStatus,
};
use crate::planner::{ImageRef, RecipeText};

const RECIPE_NAME: &str = ".rrp.Dockerfile";
const SESSION_PORT: &str = "8888/tcp";
const TIMEOUT_SECS: u64 = 600;

pub struct DockerRuntime {
    docker: Docker,
    http: reqwest::Client,
}

fn daemon(e: DockerError) -> RuntimeError {
    match e {
        DockerError::DockerResponseServerError { status_code: 404, message } => RuntimeError::ImageNotFound(message),
        DockerError::DockerResponseServerError { message, .. } if message.contains("read-only") => {
            RuntimeError::ReadOnly(message)
        }
        other => RuntimeError::DaemonUnavailable(other.to_string()),
    }
}

fn session_err(id: &str) -> impl Fn(DockerError) -> RuntimeError + '_ {
    move |e| match e {
        DockerError::DockerResponseServerError { status_code: 404, .. } => RuntimeError::UnknownSession(id.to_owned()),
        other => daemon(other),
    }
}

impl DockerRuntime {
    /// Connects to `endpoint` (`unix://`, `tcp://` or `http://`) or, when
    /// absent, to the local daemon defaults.
    pub async fn connect(endpoint: Option<&str>) -> Result<Self> {
        let docker = match endpoint {
            Some(e) if e.starts_with("unix://") || e.starts_with('/') => {
                Docker::connect_with_unix(e, TIMEOUT_SECS, API_DEFAULT_VERSION)
            }
            Some(e) => Docker::connect_with_http(e, TIMEOUT_SECS, API_DEFAULT_VERSION),
            None => Docker::connect_with_local_defaults(),
        }
        .map_err(|e| RuntimeError::DaemonUnavailable(e.to_string()))?;
        docker.ping().await.map_err(|e| RuntimeError::DaemonUnavailable(e.to_string()))?;
        Ok(Self { docker, http: reqwest::Client::new() })
    }

    fn context_tar(recipe: &RecipeText, context: &Path) -> Result<Vec<u8>> {
        let mut b = tar::Builder::new(Vec::new());
        b.follow_symlinks(false);
        let walker = walkdir::WalkDir::new(context)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || e.file_name() != ".git");
        for entry in walker {
            let entry = entry.map_err(|e| RuntimeError::Io(e.to_string()))?;
            if entry.depth() == 0 {
                continue;
            }
            let rel = entry.path().strip_prefix(context).expect("under context");
            b.append_path_with_name(entry.path(), rel)?;
        }
        let mut append = |name: &str, data: &[u8]| -> Result<()> {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_cksum();
            b.append_data(&mut h, name, data)?;
            Ok(())
        };
        append(RECIPE_NAME, recipe.as_bytes())?;
        if !context.join(".dockerignore").exists() {
            append(".dockerignore", format!(".git\n{RECIPE_NAME}\n.dockerignore\n").as_bytes())?;
        }
        Ok(b.into_inner()?)
    }

    fn single_file_tar(path: &str, bytes: &[u8]) -> Result<Vec<u8>> {
        let name = path.rsplit('/').next().unwrap_or(path);
        let mut b = tar::Builder::new(Vec::new());
        let mut h = tar::Header::new_gnu();
        h.set_size(bytes.len() as u64);
        h.set_mode(0o644);
        h.set_cksum();
        b.append_data(&mut h, name, bytes)?;
        Ok(b.into_inner()?)
    }

    async fn handle(&self, id: &str) -> Result<SessionHandle> {
        let info = self.docker.inspect_container(id, None).await.map_err(session_err(id))?;
        let status = match info.state.as_ref().and_then(|s| s.running) {
            Some(true) => SessionStatus::Up,
            _ => SessionStatus::Stopped,
        };
        let port = info
            .network_settings
            .as_ref()
            .and_then(|n| n.ports.as_ref())
            .and_then(|p| p.get(SESSION_PORT).cloned().flatten())
            .and_then(|b| b.into_iter().find_map(|b| b.host_port))
            .unwrap_or_default();
        let image_ref = info
            .config
            .as_ref()
            .and_then(|c| c.image.as_deref())
            .and_then(ImageRef::parse)
            .ok_or_else(|| RuntimeError::UnknownSession(id.to_owned()))?;
        Ok(SessionHandle {
            session_id: id.to_owned(),
            image_ref,
            internal_endpoint: format!("127.0.0.1:{port}"),
            status,
        })
    }
}

#[async_trait]
impl RuntimeAdapter for DockerRuntime {
    fn backend_name(&self) -> &'static str {
        "docker"
    }

    async fn build_image(&self, recipe: &RecipeText, context: &Path, image: &ImageRef, logs: LogSink<'_>) -> Result<BuildResult> {
        let body = Self::context_tar(recipe, context)?;
        let tag = image.to_string();
        let opts = BuildImageOptionsBuilder::new().dockerfile(RECIPE_NAME).t(&tag).rm(true).build();
        let mut stream = self.docker.build_image(opts, None, Some(body_full(Bytes::from(body))));
        let mut tail: VecDeque<String> = VecDeque::new();
        let mut count = 0usize;
        while let Some(item) = stream.next().await {
            let info = item.map_err(|e| match e {
                DockerError::DockerStreamError { error } => {
                    RuntimeError::BuildFailed { message: error, last_lines: tail.iter().cloned().collect() }
                }
                other => daemon(other),
            })?;
            if let Some(detail) = info.error_detail {
                return Err(RuntimeError::BuildFailed {
                    message: detail.message.unwrap_or_else(|| "build failed".into()),
                    last_lines: tail.into_iter().collect(),
                });
            }
            for line in info.stream.iter().flat_map(|s| s.lines()).filter(|l| !l.trim().is_empty()) {
                logs(line);
                count += 1;
                tail.push_back(line.to_owned());
                if tail.len() > 50 {
                    tail.pop_front();
                }
            }
        }
        let image_id = self.image_id(image).await?;
        Ok(BuildResult { success: image_id.is_some(), image_id, log_line_count: count })
    }

    async fn image_id(&self, image: &ImageRef) -> Result<Option<String>> {
        match self.docker.inspect_image(&image.to_string()).await {
            Ok(i) => Ok(i.id),
            Err(DockerError::DockerResponseServerError { status_code: 404, .. }) => Ok(None),
            Err(e) => Err(daemon(e)),
        }
    }

    async fn create_session(&self, image: &ImageRef, limits: ResourceLimits, request: SessionRequest) -> Result<SessionHandle> {
        limits.validate().map_err(|e| RuntimeError::ResourceDenied(e.to_string()))?;
        if self.image_id(image).await?.is_none() {
            return Err(RuntimeError::ImageNotFound(image.to_string()));
        }
        let mut binds = Vec::new();
        for m in &request.mounts {
            let target = normalize_container_path(&m.container_path)?;
            let host = m.host_path.canonicalize().map_err(|e| RuntimeError::StartFailed(format!("{}: {e}", m.host_path.display())))?;
            binds.push(format!("{}:{}{}", host.display(), target, if m.read_only { ":ro" } else { "" }));
        }
        let ports = HashMap::from([(
            SESSION_PORT.to_owned(),
            Some(vec![PortBinding { host_ip: Some("127.0.0.1".into()), host_port: Some(String::new()) }]),
        )]);
        let body = ContainerCreateBody {
            image: Some(image.to_string()),
            cmd: request.command.clone(),
            env: Some(request.env.iter().map(|(k, v)| format!("{k}={v}")).collect()),
            exposed_ports: Some(vec![SESSION_PORT.to_owned()]),
            host_config: Some(HostConfig {
                binds: Some(binds),
                nano_cpus: Some((limits.cpu_cores * 1e9) as i64),
                memory: Some(limits.memory_bytes as i64),
                port_bindings: Some(ports),
                ..Default::default()
            }),
            ..Default::default()
        };
        let name = format!("rrp-{}", uuid::Uuid::new_v4().simple());
        let created = self
            .docker
            .create_container(Some(CreateContainerOptionsBuilder::new().name(&name).build()), body)
            .await
            .map_err(|e| RuntimeError::StartFailed(e.to_string()))?;
        if let Err(e) = self.docker.start_container(&created.id, None).await {
            let _ = self.docker.remove_container(&created.id, Some(RemoveContainerOptionsBuilder::new().force(true).build())).await;
            let msg = e.to_string();
            return Err(if msg.contains("memory") || msg.contains("cpu") {
                RuntimeError::ResourceDenied(msg)
            } else {
                RuntimeError::StartFailed(msg)
            });
        }
        self.handle(&created.id).await
    }

    async fn session(&self, session_id: &str) -> Result<SessionHandle> {
        self.handle(session_id).await
    }

    async fn stop_session(&self, session_id: &str) -> Result<SessionHandle> {
        let h = self.handle(session_id).await?;
        if h.status == SessionStatus::Up {
            match self.docker.stop_container(session_id, Some(StopContainerOptionsBuilder::new().t(10).build())).await {
                Ok(()) | Err(DockerError::DockerResponseServerError { status_code: 304, .. }) => {}
                Err(e) => return Err(session_err(session_id)(e)),
            }
        }
        self.handle(session_id).await
    }

    async fn destroy_session(&self, session_id: &str) -> Result<()> {
        self.docker
            .remove_container(session_id, Some(RemoveContainerOptionsBuilder::new().force(true).build()))
            .await
            .map_err(session_err(session_id))
    }

    async fn exec(&self, session_id: &str, argv: &[String]) -> Result<ExecOutput> {
        let cfg = ExecConfig {
            attach_stdout: Some(true),
            attach_stderr: Some(true),
            cmd: Some(argv.to_vec()),
            ..Default::default()
        };
        let exec = self.docker.create_exec(session_id, cfg).await.map_err(session_err(session_id))?;
        let mut output = String::new();
        if let bollard::exec::StartExecResults::Attached { output: mut out, .. } =
            self.docker.start_exec(&exec.id, None).await.map_err(daemon)?
        {
            while let Some(chunk) = out.next().await {
                output.push_str(&chunk.map_err(daemon)?.to_string());
            }
        }
        let inspect = self.docker.inspect_exec(&exec.id).await.map_err(daemon)?;
        Ok(ExecOutput { exit_code: inspect.exit_code.unwrap_or(-1), output })
    }

    async fn write_file(&self, session_id: &str, container_path: &str, bytes: &[u8]) -> Result<()> {
        let path = normalize_container_path(container_path)?;
        let parent = path.rsplit_once('/').map(|(p, _)| if p.is_empty() { "/" } else { p }).unwrap_or("/");
        let tar = Self::single_file_tar(&path, bytes)?;
        self.docker
            .upload_to_container(session_id, Some(UploadToContainerOptionsBuilder::new().path(parent).build()), body_full(tar.into()))
            .await
            .map_err(|e| match daemon(e) {
                RuntimeError::ImageNotFound(m) => RuntimeError::FileNotFound(m),
                other => other,
            })
    }

    async fn read_file(&self, session_id: &str, container_path: &str) -> Result<Vec<u8>> {
        let path = normalize_container_path(container_path)?;
        let chunks: Vec<Bytes> = self
            .docker
            .download_from_container(session_id, Some(DownloadFromContainerOptionsBuilder::new().path(&path).build()))
            .try_collect()
            .await
            .map_err(|_| RuntimeError::FileNotFound(path.clone()))?;
        let tar_bytes = chunks.concat();
        let mut archive = tar::Archive::new(tar_bytes.as_slice());
        for entry in archive.entries()? {
            let mut entry = entry?;
            if entry.header().entry_type().is_file() {
                let mut out = Vec::new();
                std::io::Read::read_to_end(&mut entry, &mut out)?;
                return Ok(out);
            }
        }
        Err(RuntimeError::FileNotFound(path))
    }

    async fn export_image(&self, image: &ImageRef, out: &Path) -> Result<u64> {
        let mut file = tokio::fs::File::create(out).await?;
        let mut stream = self.docker.export_image(&image.to_string());
        let mut n = 0u64;
        while let Some(chunk) = stream.next().await {
            let chunk = chunk.map_err(daemon)?;
            n += chunk.len() as u64;
            tokio::io::AsyncWriteExt::write_all(&mut file, &chunk).await?;
        }
        tokio::io::AsyncWriteExt::flush(&mut file).await?;
        Ok(n)
    }

    async fn import_image(&self, archive: &Path) -> Result<ImageRef> {
        let bytes = tokio::fs::read(archive).await?;
        let mut stream = self.docker.import_image(ImportImageOptionsBuilder::new().quiet(true).build(), body_full(bytes.into()), None);
        let mut loaded = None;
        while let Some(item) = stream.next().await {
            let info = item.map_err(|e| RuntimeError::ImportFailed(e.to_string()))?;
            if let Some(detail) = info.error_detail {
                return Err(RuntimeError::CorruptArchive(detail.message.unwrap_or_default()));
            }
            if let Some(r) = info.stream.as_deref().and_then(|s| s.trim().strip_prefix("Loaded image: ")) {
                loaded = ImageRef::parse(r);
            }
        }
        loaded.ok_or_else(|| RuntimeError::ImportFailed("daemon did not report a loaded image".into()))
    }

    async fn push_image(&self, image: &ImageRef, registry_url: &str, credentials: Option<&RegistryCredentials>) -> Result<PushReceipt> {
        let image_id = self.image_id(image).await?.ok_or_else(|| RuntimeError::ImageNotFound(image.to_string()))?;
        let remote = remote_reference(image, registry_url);
        let (repo, tag) = remote.rsplit_once(':').expect("references carry a tag");
        self.docker
            .tag_image(&image.to_string(), Some(TagImageOptionsBuilder::new().repo(repo).tag(tag).build()))
            .await
            .map_err(daemon)?;
        let creds = credentials.map(|c| DockerCredentials {
            username: Some(c.username.clone()),
            password: Some(c.password.clone()),
            serveraddress: Some(super::registry_host(registry_url)),
            ..Default::default()
        });
        let mut stream = self.docker.push_image(repo, Some(PushImageOptionsBuilder::new().tag(tag).build()), creds);
        while let Some(item) = stream.next().await {
            let msg = match item {
                Ok(info) => match info.error_detail.and_then(|d| d.message) {
                    Some(m) => m,
                    None => continue,
                },
                Err(e) => e.to_string(),
            };
            return Err(if msg.contains("unauthorized") || msg.contains("denied") {
                RuntimeError::AuthFailed
            } else {
                RuntimeError::RegistryUnreachable(msg)
            });
        }
        Ok(PushReceipt { remote_reference: remote, registry_url: registry_url.to_owned(), image_id })
    }

    async fn pull_image(&self, remote: &str) -> Result<ImageRef> {
        let r = ImageRef::parse(remote).ok_or_else(|| RuntimeError::ImageNotFound(remote.to_owned()))?;
        let opts = CreateImageOptionsBuilder::new().from_image(&r.repository).tag(&r.tag).build();
        let mut stream = self.docker.create_image(Some(opts), None, None);
        while let Some(item) = stream.next().await {
            let info = item.map_err(|e| RuntimeError::RegistryUnreachable(e.to_string()))?;
            if let Some(m) = info.error_detail.and_then(|d| d.message) {
                return Err(RuntimeError::ImageNotFound(m));
            }
        }
        Ok(r)
    }

    async fn forward_http(&self, session_id: &str, request: ProxyRequest) -> Result<ProxyResponse> {
        let h = self.handle(session_id).await?;
        if h.status != SessionStatus::Up {
            return Err(RuntimeError::NotUp(session_id.to_owned()));
        }
        let method = reqwest::Method::from_bytes(request.method.as_bytes()).map_err(|e| RuntimeError::Io(e.to_string()))?;
        let mut rb = self.http.request(method, format!("http://{}{}", h.internal_endpoint, request.path_and_query));
        for (k, v) in &request.headers {
            rb = rb.header(k, v);
        }
        let resp = rb.body(request.body).send().await.map_err(|e| RuntimeError::Io(e.to_string()))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| v.to_str().ok().map(|v| (k.to_string(), v.to_owned())))
            .collect();
        let body = resp.bytes().await.map_err(|e| RuntimeError::Io(e.to_string()))?.to_vec();
        Ok(ProxyResponse { status, headers, body })
    }
}
