//! Deterministic tar writing: fixed mode, zero mtime and owner, sorted input.

use std::io::{self, Write};

pub(crate) fn header(size: u64, mode: u32) -> tar::Header {
    let mut h = tar::Header::new_gnu();
    h.set_size(size);
    h.set_mode(mode);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    h.set_cksum();
    h
}

pub(crate) fn append_bytes<W: Write>(b: &mut tar::Builder<W>, path: &str, data: &[u8], mode: u32) -> io::Result<()> {
    b.append_data(&mut header(data.len() as u64, mode), path, data)
}

/// A tar of `(path, bytes)` pairs in path order.
pub fn tar_of_files<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> io::Result<Vec<u8>> {
    let mut sorted: Vec<_> = files.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut b = tar::Builder::new(Vec::new());
    for (path, data) in sorted {
        append_bytes(&mut b, path, data, 0o644)?;
    }
    b.into_inner()
}
