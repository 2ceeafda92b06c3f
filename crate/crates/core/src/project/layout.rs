use serde::{Deserialize, Serialize};

use super::environment::winning_location;
use super::manifest::{ManifestDocument, LEGACY_MANIFEST_PATH, MANIFEST_PATH};
use super::WorkingTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FindingCode {
    MissingEnvironment,
    MissingDatasetManifest,
    LegacyManifestName,
    InvalidDatasetManifest,
    UnknownManifestKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: FindingCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    fn push(&mut self, severity: Severity, code: FindingCode, message: impl Into<String>) {
        self.findings.push(Finding { severity, code, message: message.into() });
    }

    pub fn has(&self, code: FindingCode) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }
}

/// Checks the repository for the environment folder and the dataset
/// manifest. Problems are reported as findings, never as errors.
pub fn validate_layout(tree: &WorkingTree) -> ValidationReport {
    let root = &tree.root_path;
    let mut report = ValidationReport::default();

    if winning_location(root).is_none() {
        report.push(
            Severity::Error,
            FindingCode::MissingEnvironment,
            "no environment files in .binder/, binder/ or the repository root",
        );
    }

    let manifest = if root.join(MANIFEST_PATH).is_file() {
        Some(MANIFEST_PATH)
    } else if root.join(LEGACY_MANIFEST_PATH).is_file() {
        report.push(
            Severity::Warning,
            FindingCode::LegacyManifestName,
            format!("{LEGACY_MANIFEST_PATH} is accepted but {MANIFEST_PATH} is the canonical name"),
        );
        Some(LEGACY_MANIFEST_PATH)
    } else {
        report.push(
            Severity::Warning,
            FindingCode::MissingDatasetManifest,
            format!("{MANIFEST_PATH} not found; no datasets will be mounted"),
        );
        None
    };

    if let Some(rel) = manifest {
        match std::fs::read(root.join(rel)).map_err(|e| e.to_string()).and_then(|b| {
            ManifestDocument::parse(&b).map_err(|e| e.to_string())
        }) {
            Ok(doc) => {
                for key in doc.unknown_keys {
                    report.push(Severity::Warning, FindingCode::UnknownManifestKey, format!("unknown key `{key}` in {rel}"));
                }
            }
            Err(e) => report.push(Severity::Error, FindingCode::InvalidDatasetManifest, format!("{rel}: {e}")),
        }
    }

    report.ok = !report.findings.iter().any(|f| f.severity == Severity::Error);
    report
}
