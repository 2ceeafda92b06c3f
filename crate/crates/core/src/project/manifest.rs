//! The `.rrp/datasets.yaml` dataset manifest.
//!
//! ```yaml
//! datasets:
//!   - server: https://rdms.example.org
//!     permId: 20240101120000000-1
//!     folder: raw_data
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use super::{ProjectError, Result};

pub const MANIFEST_PATH: &str = ".rrp/datasets.yaml";
pub const LEGACY_MANIFEST_PATH: &str = ".rrp/dataset.yaml";

const REQUIRED_KEYS: [&str; 3] = ["server", "permId", "folder"];

/// One dataset to mount, addressed by its permanent identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetBinding {
    pub server_url: String,
    pub perm_id: String,
    pub folder: String,
}

/// A parsed manifest plus any unknown keys seen along the way.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestDocument {
    pub bindings: Vec<DatasetBinding>,
    pub unknown_keys: Vec<String>,
}

pub fn validate_folder(folder: &str) -> Result<()> {
    let bad = folder.is_empty()
        || folder == "."
        || folder == ".."
        || folder.contains(['/', '\\', '\0'])
        || folder.trim() != folder;
    if bad {
        Err(ProjectError::InvalidFolderName(folder.to_owned()))
    } else {
        Ok(())
    }
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

impl ManifestDocument {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| ProjectError::ManifestSyntax(format!("not UTF-8: {e}")))?;
        let root: Value = serde_yaml::from_str(text).map_err(|e| ProjectError::ManifestSyntax(e.to_string()))?;
        let map = match root {
            Value::Mapping(m) => m,
            Value::Null => return Err(ProjectError::ManifestSyntax("empty document".into())),
            _ => return Err(ProjectError::ManifestSyntax("top level must be a mapping".into())),
        };

        let mut doc = ManifestDocument::default();
        let mut entries = None;
        for (k, v) in map {
            match k.as_str() {
                Some("datasets") => entries = Some(v),
                Some(other) => doc.unknown_keys.push(other.to_owned()),
                None => return Err(ProjectError::ManifestSyntax("non-string top-level key".into())),
            }
        }
        let entries = match entries {
            Some(Value::Sequence(seq)) => seq,
            Some(Value::Null) => Vec::new(),
            Some(_) => return Err(ProjectError::ManifestSyntax("`datasets` must be a list".into())),
            None => return Err(ProjectError::ManifestSyntax("missing `datasets` key".into())),
        };

        let mut folders = BTreeSet::new();
        for (i, entry) in entries.into_iter().enumerate() {
            let Value::Mapping(m) = entry else {
                return Err(ProjectError::ManifestSyntax(format!("datasets[{i}] must be a mapping")));
            };
            let mut fields: [Option<String>; 3] = Default::default();
            for (k, v) in m {
                let key = k
                    .as_str()
                    .ok_or_else(|| ProjectError::ManifestSyntax(format!("datasets[{i}]: non-string key")))?;
                match REQUIRED_KEYS.iter().position(|r| *r == key) {
                    Some(idx) => {
                        let s = scalar_string(&v).ok_or_else(|| {
                            ProjectError::ManifestSyntax(format!("datasets[{i}].{key} must be a string"))
                        })?;
                        fields[idx] = Some(s);
                    }
                    None => doc.unknown_keys.push(format!("datasets[{i}].{key}")),
                }
            }
            let [server, perm_id, folder] = fields;
            let server_url = server.ok_or_else(|| ProjectError::ManifestSyntax(format!("datasets[{i}]: missing `server`")))?;
            let perm_id = perm_id.ok_or_else(|| ProjectError::ManifestSyntax(format!("datasets[{i}]: missing `permId`")))?;
            let folder = folder.ok_or_else(|| ProjectError::ManifestSyntax(format!("datasets[{i}]: missing `folder`")))?;
            if perm_id.trim().is_empty() {
                return Err(ProjectError::ManifestSyntax(format!("datasets[{i}]: empty `permId`")));
            }
            validate_folder(&folder)?;
            if !folders.insert(folder.clone()) {
                return Err(ProjectError::DuplicateMountTarget(folder));
            }
            doc.bindings.push(DatasetBinding { server_url, perm_id, folder });
        }
        Ok(doc)
    }
}

/// Parses manifest bytes into bindings, in file order.
pub fn parse_datasets_manifest(bytes: &[u8]) -> Result<Vec<DatasetBinding>> {
    let doc = ManifestDocument::parse(bytes)?;
    for key in &doc.unknown_keys {
        tracing::warn!(key = %key, "unknown key in dataset manifest");
    }
    Ok(doc.bindings)
}

#[derive(Serialize)]
struct WireManifest<'a> {
    datasets: Vec<WireEntry<'a>>,
}

#[derive(Serialize)]
struct WireEntry<'a> {
    server: &'a str,
    #[serde(rename = "permId")]
    perm_id: &'a str,
    folder: &'a str,
}

pub fn serialize_datasets_manifest(bindings: &[DatasetBinding]) -> String {
    let wire = WireManifest {
        datasets: bindings
            .iter()
            .map(|b| WireEntry { server: &b.server_url, perm_id: &b.perm_id, folder: &b.folder })
            .collect(),
    };
    serde_yaml::to_string(&wire).expect("manifest serialization")
}
