//! Thin wrappers over the `git` command line.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use data_encoding::BASE64;

use super::{ProjectError, ProjectSource, Result, WorkingTree};

fn git_command(dir: Option<&Path>) -> Command {
    let mut cmd = Command::new("git");
    if let Some(dir) = dir {
        cmd.arg("-C").arg(dir);
    }
    cmd.env("GIT_TERMINAL_PROMPT", "0")
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .env("LC_ALL", "C");
    cmd
}

fn run<I, S>(dir: Option<&Path>, args: I) -> Result<Output>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    git_command(dir)
        .args(args)
        .output()
        .map_err(|e| ProjectError::Git(format!("cannot run git: {e}")))
}

fn run_ok<I, S>(dir: &Path, args: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let out = run(Some(dir), args)?;
    if !out.status.success() {
        return Err(ProjectError::Git(String::from_utf8_lossy(&out.stderr).trim().to_owned()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn auth_header(secret: &str) -> String {
    if secret.contains(':') {
        format!("Authorization: Basic {}", BASE64.encode(secret.as_bytes()))
    } else {
        format!("Authorization: Bearer {secret}")
    }
}

/// Clones `source` into `destination` and checks out `source.ref` (or the
/// remote default branch) with submodules initialized recursively.
pub fn load_project_source(source: &ProjectSource, destination: &Path) -> Result<WorkingTree> {
    if destination.exists() {
        let non_empty = std::fs::read_dir(destination)
            .map(|mut it| it.next().is_some())
            .unwrap_or(true);
        if non_empty {
            return Err(ProjectError::DestinationNotEmpty(destination.to_path_buf()));
        }
    }
    if source.repo_url.trim().is_empty() {
        return Err(ProjectError::CloneFailed("empty repository url".into()));
    }
    let created = !destination.exists();
    let result = clone_and_checkout(source, destination);
    if result.is_err() && destination.exists() {
        if created {
            let _ = std::fs::remove_dir_all(destination);
        } else if let Ok(entries) = std::fs::read_dir(destination) {
            for entry in entries.flatten() {
                let p = entry.path();
                let _ = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
            }
        }
    }
    result
}

fn clone_and_checkout(source: &ProjectSource, destination: &Path) -> Result<WorkingTree> {
    let mut clone = git_command(None);
    if let Some(secret) = &source.credentials {
        clone.arg("-c").arg(format!("http.extraHeader={}", auth_header(secret)));
    }
    let out = clone
        .arg("clone")
        .arg("--quiet")
        .arg("--no-checkout")
        .arg(&source.repo_url)
        .arg(destination)
        .output()
        .map_err(|e| ProjectError::CloneFailed(format!("cannot run git: {e}")))?;
    if !out.status.success() {
        return Err(ProjectError::CloneFailed(String::from_utf8_lossy(&out.stderr).trim().to_owned()));
    }

    match source.r#ref.as_deref().filter(|r| !r.is_empty()) {
        None => {
            // Default branch: whatever the remote HEAD points to.
            let out = run(Some(destination), ["checkout", "--quiet"])?;
            if !out.status.success() {
                return Err(ProjectError::RefNotFound("remote HEAD".into()));
            }
        }
        Some(r) => {
            let remote_branch = format!("refs/remotes/origin/{r}");
            if rev_parse_commit(destination, &remote_branch).is_some() {
                run_ok(destination, ["checkout", "--quiet", "-B", r, &remote_branch])?;
            } else if let Some(commit) = rev_parse_commit(destination, r) {
                run_ok(destination, ["checkout", "--quiet", "--detach", &commit])?;
            } else {
                return Err(ProjectError::RefNotFound(r.to_owned()));
            }
        }
    }

    let out = run(Some(destination), ["submodule", "update", "--init", "--recursive", "--quiet"])?;
    if !out.status.success() {
        return Err(ProjectError::CloneFailed(format!(
            "submodule update: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let commit_id = head_commit(destination)?;
    Ok(WorkingTree { root_path: destination.to_path_buf(), commit_id, dirty: false })
}

fn rev_parse_commit(dir: &Path, rev: &str) -> Option<String> {
    let out = run(Some(dir), ["rev-parse", "--verify", "--quiet", &format!("{rev}^{{commit}}")]).ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_owned())
        .filter(|s| s.len() == 40)
}

fn ensure_repository_root(root: &Path) -> Result<PathBuf> {
    let out = run(Some(root), ["rev-parse", "--show-toplevel"])?;
    if !out.status.success() {
        return Err(ProjectError::NotARepository(root.to_path_buf()));
    }
    let top = PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
    let canonical_root = root.canonicalize().map_err(|_| ProjectError::NotARepository(root.to_path_buf()))?;
    let canonical_top = top.canonicalize().unwrap_or(top);
    if canonical_root != canonical_top {
        return Err(ProjectError::NotARepository(root.to_path_buf()));
    }
    Ok(canonical_top)
}

pub fn head_commit(root: &Path) -> Result<String> {
    ensure_repository_root(root)?;
    rev_parse_commit(root, "HEAD").ok_or_else(|| ProjectError::RefNotFound("HEAD".into()))
}

/// True iff the checkout has no tracked modifications and no untracked,
/// non-ignored files (including inside submodules).
pub fn is_clean(tree: &WorkingTree) -> Result<bool> {
    ensure_repository_root(&tree.root_path)?;
    let out = run_ok(
        &tree.root_path,
        ["status", "--porcelain", "--untracked-files=all", "--ignore-submodules=none"],
    )?;
    Ok(out.trim().is_empty())
}

/// Tracked files of the current checkout, including submodule contents.
pub fn tracked_files(root: &Path) -> Result<Vec<String>> {
    let out = run_ok(root, ["ls-files", "-z", "--recurse-submodules"])?;
    let mut files: Vec<String> = out.split('\0').filter(|s| !s.is_empty()).map(str::to_owned).collect();
    files.sort();
    Ok(files)
}

/// Writes a single-file bundle containing `HEAD` and its history.
pub fn create_bundle(root: &Path, out: &Path) -> Result<()> {
    run_ok(root, [OsStr::new("bundle"), OsStr::new("create"), out.as_os_str(), OsStr::new("HEAD")])?;
    Ok(())
}

/// Creates a repository at `root` (which must exist) on branch `main`.
pub fn init_repository(root: &Path) -> Result<()> {
    run_ok(root, ["init", "--quiet", "--initial-branch=main"])?;
    Ok(())
}

/// Stages everything and commits it; returns the new commit id.
pub fn commit_all(root: &Path, message: &str) -> Result<String> {
    run_ok(root, ["add", "--all"])?;
    run_ok(
        root,
        [
            "-c",
            "user.name=rrp",
            "-c",
            "user.email=rrp@localhost",
            "-c",
            "commit.gpgsign=false",
            "commit",
            "--quiet",
            "--allow-empty",
            "-m",
            message,
        ],
    )?;
    head_commit(root)
}
