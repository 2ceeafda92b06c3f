//! Permission handling for materialized read-only trees.

use std::fs;
use std::io;
use std::path::Path;

#[cfg(unix)]
fn set_mode(path: &Path, mode: u32) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(mode))
}

#[cfg(not(unix))]
fn set_mode(path: &Path, mode: u32) -> io::Result<()> {
    let mut p = fs::metadata(path)?.permissions();
    p.set_readonly(mode & 0o200 == 0);
    fs::set_permissions(path, p)
}

/// Files become 0444 and directories 0555, bottom-up so traversal keeps working.
pub fn make_tree_read_only(root: &Path) -> io::Result<()> {
    for entry in walkdir::WalkDir::new(root).contents_first(true).follow_links(false) {
        let entry = entry.map_err(io::Error::other)?;
        let ft = entry.file_type();
        if ft.is_dir() {
            set_mode(entry.path(), 0o555)?;
        } else if ft.is_file() {
            set_mode(entry.path(), 0o444)?;
        }
    }
    Ok(())
}

/// Removes a tree that may contain read-only directories. Missing is fine.
pub fn remove_tree(root: &Path) -> io::Result<()> {
    if fs::symlink_metadata(root).is_err() {
        return Ok(());
    }
    for entry in walkdir::WalkDir::new(root).follow_links(false) {
        let entry = entry.map_err(io::Error::other)?;
        if entry.file_type().is_dir() {
            set_mode(entry.path(), 0o755)?;
        }
    }
    fs::remove_dir_all(root)
}
