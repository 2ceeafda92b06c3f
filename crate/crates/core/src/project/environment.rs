//! Environment definition discovery and parsing.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProjectError, Result, WorkingTree};
use crate::digest::sha256_hex;

/// Search locations, highest precedence first. The first location holding any
/// recognized file is used and the others are ignored entirely.
pub const SEARCH_LOCATIONS: [&str; 3] = [".binder", "binder", ""];

pub const RECOGNIZED_FILES: [&str; 8] = [
    "runtime.txt",
    "requirements.txt",
    "environment.yml",
    "apt.txt",
    "install.R",
    "Project.toml",
    "postBuild",
    "start",
];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SourceFile {
    pub path: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnvironmentSpec {
    pub runtime: Option<String>,
    pub apt_packages: Vec<String>,
    pub pip_requirements: String,
    pub conda_environment: String,
    pub r_install_script: String,
    pub julia_project: String,
    pub post_build: String,
    pub start_command: String,
    pub source_files: Vec<SourceFile>,
}

impl EnvironmentSpec {
    /// True when at least one input besides `source_files` carries content.
    pub fn is_populated(&self) -> bool {
        self.runtime.is_some()
            || !self.apt_packages.is_empty()
            || [
                &self.pip_requirements,
                &self.conda_environment,
                &self.r_install_script,
                &self.julia_project,
                &self.post_build,
                &self.start_command,
            ]
            .iter()
            .any(|s| !s.trim().is_empty())
    }

    /// Repository-relative path of the consumed file with this name.
    pub fn source_path(&self, file_name: &str) -> Option<&str> {
        self.source_files
            .iter()
            .map(|f| f.path.as_str())
            .find(|p| p.rsplit('/').next() == Some(file_name))
    }
}

/// Normalizes an `apt.txt` body: one package per token, `#` comments stripped,
/// deduplicated and sorted.
pub fn parse_apt_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .map(str::to_owned)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn location_path(location: &str, file: &str) -> String {
    if location.is_empty() {
        file.to_owned()
    } else {
        format!("{location}/{file}")
    }
}

fn present_files(root: &Path, location: &str) -> Vec<&'static str> {
    RECOGNIZED_FILES
        .iter()
        .copied()
        .filter(|f| root.join(location_path(location, f)).is_file())
        .collect()
}

/// The location whose files define the environment, if any.
pub(crate) fn winning_location(root: &Path) -> Option<(&'static str, Vec<&'static str>)> {
    SEARCH_LOCATIONS.iter().find_map(|loc| {
        let files = present_files(root, loc);
        (!files.is_empty()).then_some((*loc, files))
    })
}

/// Reads the recognized environment files of `tree`.
pub fn parse_environment(tree: &WorkingTree) -> Result<EnvironmentSpec> {
    let root = &tree.root_path;
    let (location, files) = winning_location(root).ok_or(ProjectError::NoEnvironmentFound)?;

    let mut env = EnvironmentSpec::default();
    for file in files {
        let rel = location_path(location, file);
        let bytes = std::fs::read(root.join(&rel))
            .map_err(|e| ProjectError::UnreadableFile { path: rel.clone(), reason: e.to_string() })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| ProjectError::UnreadableFile { path: rel.clone(), reason: "not UTF-8".into() })?;
        env.source_files.push(SourceFile { path: rel, content_hash: sha256_hex(&bytes) });
        match file {
            "runtime.txt" => {
                env.runtime = text.lines().map(str::trim).find(|l| !l.is_empty()).map(str::to_owned);
            }
            "requirements.txt" => env.pip_requirements = text,
            "environment.yml" => env.conda_environment = text,
            "apt.txt" => env.apt_packages = parse_apt_list(&text),
            "install.R" => env.r_install_script = text,
            "Project.toml" => env.julia_project = text,
            "postBuild" => env.post_build = text,
            "start" => env.start_command = text,
            _ => unreachable!("unrecognized file {file}"),
        }
    }
    env.source_files.sort();
    if !env.is_populated() {
        return Err(ProjectError::NoEnvironmentFound);
    }
    Ok(env)
}
