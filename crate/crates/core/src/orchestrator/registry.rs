//! Append-only registry of project snapshots, shares and pushes.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ProjectRecord, ShareRecord};
use crate::runtime::PushReceipt;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub(crate) struct ShareEntry {
    pub record: ShareRecord,
    pub project_name: String,
    pub bundle_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub(crate) enum RegistryEntry {
    Project { record: Box<ProjectRecord> },
    Share { entry: ShareEntry },
    Push { image_ref: String, receipt: PushReceipt },
}

pub(crate) struct Registry {
    file: File,
}

impl Registry {
    /// Opens the log and returns every readable entry in order.
    pub fn open(path: &Path) -> std::io::Result<(Self, Vec<RegistryEntry>)> {
        let mut entries = Vec::new();
        if let Ok(f) = File::open(path) {
            for line in BufReader::new(f).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line) {
                    Ok(e) => entries.push(e),
                    Err(e) => tracing::warn!("skipping unreadable registry line: {e}"),
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Self { file }, entries))
    }

    pub fn append(&mut self, entry: &RegistryEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        self.file.write_all(&line)
    }
}
