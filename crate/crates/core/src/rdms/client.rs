use std::collections::BTreeMap;
use std::path::Path;

use data_encoding::BASE64;
use reqwest::{StatusCode, Url};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use super::tree::{make_tree_read_only, remove_tree};
use super::{validate_dataset_path, DatasetDescriptor, DoiRecord, MountReport, RdmsError, Result, SessionToken};
use crate::digest::sha256_hex;
use crate::project::DatasetBinding;

/// HTTP client for one RDMS base URL.
#[derive(Debug, Clone)]
pub struct RdmsClient {
    base: Url,
    http: reqwest::Client,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    #[serde(default)]
    message: String,
}

fn unreachable(e: reqwest::Error) -> RdmsError {
    RdmsError::ServerUnreachable(e.to_string())
}

impl RdmsClient {
    pub fn new(base_url: &str) -> Result<Self> {
        let mut base = Url::parse(base_url).map_err(|e| RdmsError::ServerUnreachable(format!("{base_url}: {e}")))?;
        if !base.path().ends_with('/') {
            let p = format!("{}/", base.path());
            base.set_path(&p);
        }
        Ok(Self { base, http: reqwest::Client::new() })
    }

    pub fn base_url(&self) -> &str {
        self.base.as_str().trim_end_matches('/')
    }

    fn url<'a>(&self, segments: impl IntoIterator<Item = &'a str>) -> Url {
        let mut u = self.base.clone();
        u.path_segments_mut().expect("http base").pop_if_empty().extend(segments);
        u
    }

    async fn check(resp: reqwest::Response, subject: &str) -> Result<reqwest::Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body: Option<ErrorBody> = resp.json().await.ok();
        let code = body.as_ref().map(|b| b.error.as_str()).unwrap_or("");
        Err(match (status, code) {
            (StatusCode::UNAUTHORIZED, _) => RdmsError::AuthFailed,
            (_, "DatasetNotFound") => RdmsError::DatasetNotFound(subject.to_owned()),
            (_, "ObjectNotFound") => RdmsError::ObjectNotFound(subject.to_owned()),
            (_, "EmptyDataset") => RdmsError::EmptyDataset,
            (_, "InvalidPath") => RdmsError::InvalidPath(body.map(|b| b.message).unwrap_or_default()),
            _ => RdmsError::Protocol(format!("{status}: {}", body.map(|b| b.message).unwrap_or_default())),
        })
    }

    async fn json<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        resp.json().await.map_err(|e| RdmsError::Protocol(e.to_string()))
    }

    pub async fn login(&self, user: &str, password: &str) -> Result<SessionToken> {
        let resp = self
            .http
            .post(self.url(["login"]))
            .json(&json!({ "user": user, "password": password }))
            .send()
            .await
            .map_err(unreachable)?;
        Self::json(Self::check(resp, user).await?).await
    }

    pub async fn resolve_dataset(&self, token: &SessionToken, perm_id: &str) -> Result<DatasetDescriptor> {
        let resp = self.http.get(self.url(["datasets", perm_id])).bearer_auth(&token.token).send().await.map_err(unreachable)?;
        Self::json(Self::check(resp, perm_id).await?).await
    }

    /// Reads one file, optionally a byte range `start..=end`.
    pub async fn read_file(&self, token: &SessionToken, perm_id: &str, path: &str, range: Option<(u64, u64)>) -> Result<Vec<u8>> {
        validate_dataset_path(path)?;
        let url = self.url(["datasets", perm_id, "files"].into_iter().chain(path.split('/')));
        let mut req = self.http.get(url).bearer_auth(&token.token);
        if let Some((start, end)) = range {
            req = req.header(reqwest::header::RANGE, format!("bytes={start}-{end}"));
        }
        let resp = Self::check(req.send().await.map_err(unreachable)?, perm_id).await?;
        Ok(resp.bytes().await.map_err(unreachable)?.to_vec())
    }

    /// Materializes a dataset under `<workspace_root>/openbis/<folder>/`,
    /// verifies every file and leaves the tree read-only. A previous
    /// materialization of the same folder is replaced.
    pub async fn mount_dataset(&self, token: &SessionToken, binding: &DatasetBinding, workspace_root: &Path) -> Result<MountReport> {
        crate::project::validate_folder(&binding.folder).map_err(|_| RdmsError::InvalidPath(binding.folder.clone()))?;
        let descriptor = self.resolve_dataset(token, &binding.perm_id).await?;
        let target = workspace_root.join("openbis").join(&binding.folder);
        let not_writable = |e: std::io::Error| RdmsError::TargetNotWritable(format!("{}: {e}", target.display()));
        remove_tree(&target).map_err(not_writable)?;
        std::fs::create_dir_all(&target).map_err(not_writable)?;

        let mut bytes_total = 0;
        for f in &descriptor.files {
            validate_dataset_path(&f.path)?;
            let data = self.read_file(token, &binding.perm_id, &f.path, None).await?;
            if data.len() as u64 != f.byte_size || sha256_hex(&data) != f.content_hash {
                let _ = remove_tree(&target);
                return Err(RdmsError::ChecksumMismatch { path: f.path.clone() });
            }
            let dest = target.join(&f.path);
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent).map_err(not_writable)?;
            }
            std::fs::write(&dest, &data).map_err(not_writable)?;
            bytes_total += data.len() as u64;
        }
        make_tree_read_only(&target)?;
        Ok(MountReport {
            binding: binding.clone(),
            local_path: target,
            files_materialized: descriptor.files.len(),
            bytes: bytes_total,
            verified: true,
        })
    }

    pub async fn register_dataset(
        &self,
        token: &SessionToken,
        files: &[(String, Vec<u8>)],
        metadata: &BTreeMap<String, String>,
    ) -> Result<String> {
        if files.is_empty() {
            return Err(RdmsError::EmptyDataset);
        }
        for (p, _) in files {
            validate_dataset_path(p)?;
        }
        let body = json!({
            "files": files.iter().map(|(p, b)| json!({ "path": p, "content": BASE64.encode(b) })).collect::<Vec<_>>(),
            "metadata": metadata,
        });
        let resp = self.http.post(self.url(["datasets"])).bearer_auth(&token.token).json(&body).send().await.map_err(unreachable)?;
        #[derive(Deserialize)]
        #[serde(rename_all = "camelCase")]
        struct Registered {
            perm_id: String,
        }
        let r: Registered = Self::json(Self::check(resp, "dataset").await?).await?;
        Ok(r.perm_id)
    }

    pub async fn publish(&self, token: &SessionToken, object_ref: &str) -> Result<DoiRecord> {
        let resp = self
            .http
            .post(self.url(["publish"]))
            .bearer_auth(&token.token)
            .json(&json!({ "objectRef": object_ref }))
            .send()
            .await
            .map_err(unreachable)?;
        Self::json(Self::check(resp, object_ref).await?).await
    }

    /// The publication record of `object_ref`, if it was published.
    pub async fn publication(&self, token: &SessionToken, object_ref: &str) -> Result<Option<DoiRecord>> {
        let resp = self.http.get(self.url(["publish", object_ref])).bearer_auth(&token.token).send().await.map_err(unreachable)?;
        match Self::check(resp, object_ref).await {
            Ok(r) => Ok(Some(Self::json(r).await?)),
            Err(RdmsError::ObjectNotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}
