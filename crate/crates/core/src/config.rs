//! Platform configuration, loadable from a TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::runtime::ResourceLimits;

/// Pinned base image for one runtime ecosystem. `{version}` in `image` is
/// replaced with the version from `runtime.txt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseImage {
    pub image: String,
    pub default_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Keyed by ecosystem name as written in `runtime.txt` (`python`, `r`, `julia`).
    pub base_images: BTreeMap<String, BaseImage>,
    /// Base image used for conda environments when no runtime is given.
    pub conda_base_image: String,
    /// Internal port of the default interactive session.
    pub session_port: u16,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let mut base_images = BTreeMap::new();
        base_images.insert(
            "python".to_owned(),
            BaseImage { image: "docker.io/library/python:{version}-slim-bookworm".into(), default_version: "3.11".into() },
        );
        base_images.insert(
            "r".to_owned(),
            BaseImage { image: "docker.io/rocker/r-ver:{version}".into(), default_version: "4.3.2".into() },
        );
        base_images.insert(
            "julia".to_owned(),
            BaseImage { image: "docker.io/library/julia:{version}-bookworm".into(), default_version: "1.10".into() },
        );
        Self {
            base_images,
            conda_base_image: "docker.io/condaforge/miniforge3:24.3.0-0".into(),
            session_port: 8888,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub data_root: PathBuf,
    pub rdms_url: String,
    pub build_concurrency: usize,
    pub default_resources: ResourceLimits,
    pub planner: PlannerConfig,
    /// Embedded data above this size triggers a warning suggesting a player script.
    pub bundle_warn_bytes: u64,
    #[serde(with = "secs")]
    pub api_token_ttl: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("rrp-data"),
            rdms_url: "http://127.0.0.1:8443".into(),
            build_concurrency: 2,
            default_resources: ResourceLimits::default(),
            planner: PlannerConfig::default(),
            bundle_warn_bytes: 4 << 30,
            api_token_ttl: Duration::from_secs(8 * 3600),
        }
    }
}

impl PlatformConfig {
    pub fn from_toml_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Applies `RRP_DATA_DIR` and `RRP_RDMS_URL` on top of `self`.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(dir) = std::env::var("RRP_DATA_DIR") {
            self.data_root = dir.into();
        }
        if let Ok(url) = std::env::var("RRP_RDMS_URL") {
            self.rdms_url = url;
        }
        self
    }
}
