//! The bundle container: a gzip-compressed tar written as one gzip member per
//! tar entry.
//!
//! Concatenated members are still a valid `.tar.gz` for standard tools, and a
//! reader can tell which entry a damaged stretch of bytes belongs to. Every
//! member carries a header CRC (FHCRC), so no byte outside deflate padding
//! can change without a decode error or a content mismatch.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use flate2::write::DeflateEncoder;
use flate2::{Compression, Crc};
use sha2::{Digest, Sha256};

const BLOCK: usize = 512;
const GZIP_MAGIC: [u8; 4] = [0x1f, 0x8b, 0x08, 0x02];

/// Where an entry's bytes come from when writing.
pub(crate) enum Source {
    Bytes(Vec<u8>),
    File(PathBuf),
}

pub(crate) struct Entry {
    pub path: String,
    pub mode: u32,
    pub source: Source,
}

impl Entry {
    pub fn bytes(path: impl Into<String>, mode: u32, bytes: Vec<u8>) -> Self {
        Self { path: path.into(), mode, source: Source::Bytes(bytes) }
    }

    pub fn file(path: impl Into<String>, mode: u32, file: PathBuf) -> Self {
        Self { path: path.into(), mode, source: Source::File(file) }
    }

    pub fn sha256(&self) -> io::Result<(String, u64)> {
        match &self.source {
            Source::Bytes(b) => Ok((crate::digest::sha256_hex(b), b.len() as u64)),
            Source::File(p) => crate::digest::sha256_file(p),
        }
    }

    fn open(&self) -> io::Result<(Box<dyn Read + '_>, u64)> {
        match &self.source {
            Source::Bytes(b) => Ok((Box::new(&b[..]), b.len() as u64)),
            Source::File(p) => {
                let f = File::open(p)?;
                let len = f.metadata()?.len();
                Ok((Box::new(f.take(len)), len))
            }
        }
    }
}

/// Writes `entries` in order. Returns the archive size.
pub(crate) fn write_archive(out: &Path, entries: &[Entry]) -> io::Result<u64> {
    let mut w = io::BufWriter::new(File::create(out)?);
    for (i, entry) in entries.iter().enumerate() {
        write_member(&mut w, entry, i + 1 == entries.len())?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(std::fs::metadata(out)?.len())
}

pub(crate) fn write_member<W: Write>(out: &mut W, entry: &Entry, last: bool) -> io::Result<()> {
    // mtime 0, no extra flags, OS "unknown".
    let header = [0x1f, 0x8b, 0x08, 0x02, 0, 0, 0, 0, 0, 0xff];
    let mut hcrc = Crc::new();
    hcrc.update(&header);
    out.write_all(&header)?;
    out.write_all(&(hcrc.sum() as u16).to_le_bytes())?;

    let mut body = CrcWriter { inner: DeflateEncoder::new(&mut *out, Compression::default()), crc: Crc::new() };
    let (mut reader, size) = entry.open()?;
    write_tar_headers(&mut body, &entry.path, size, entry.mode)?;
    let copied = io::copy(&mut reader, &mut body)?;
    if copied != size {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, format!("{} changed while writing", entry.path)));
    }
    body.write_all(&[0u8; BLOCK][..pad(size)])?;
    if last {
        body.write_all(&[0u8; 2 * BLOCK])?;
    }
    let CrcWriter { inner, crc } = body;
    let out = inner.finish()?;
    out.write_all(&crc.sum().to_le_bytes())?;
    out.write_all(&crc.amount().to_le_bytes())?;
    Ok(())
}

struct CrcWriter<W: Write> {
    inner: W,
    crc: Crc,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn pad(size: u64) -> usize {
    (BLOCK - (size % BLOCK as u64) as usize) % BLOCK
}

/// GNU long-name record when needed, then the entry header.
fn write_tar_headers<W: Write>(w: &mut W, path: &str, size: u64, mode: u32) -> io::Result<()> {
    let mut h = crate::tarutil::header(size, mode);
    if path.len() > 100 {
        let mut name = path.as_bytes().to_vec();
        name.push(0);
        let mut long = crate::tarutil::header(name.len() as u64, 0o644);
        long.set_entry_type(tar::EntryType::GNULongName);
        long.as_old_mut().name[..13].copy_from_slice(b"././@LongLink");
        long.set_cksum();
        w.write_all(long.as_bytes())?;
        w.write_all(&name)?;
        w.write_all(&[0u8; BLOCK][..pad(name.len() as u64)])?;
        h.as_old_mut().name[..100].copy_from_slice(&path.as_bytes()[..100]);
    } else {
        h.as_old_mut().name[..path.len()].copy_from_slice(path.as_bytes());
    }
    h.set_cksum();
    w.write_all(h.as_bytes())
}

/// One decoded entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Scanned {
    pub path: String,
    pub mode: u32,
    pub size: u64,
    pub sha256: String,
    /// Kept for small entries only (the manifest and checksum list).
    pub content: Option<Vec<u8>>,
}

/// A member that failed to decode, by position in the archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Broken {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub(crate) struct Scan {
    /// Entries in archive order, with their member index.
    pub entries: Vec<(usize, Scanned)>,
    pub broken: Vec<Broken>,
    pub members: usize,
}

const KEEP_CONTENT_BELOW: u64 = 4 * 1024 * 1024;

/// Decodes every member, hashing entry contents. With `extract_to`, regular
/// files are also written beneath it; callers must validate paths first.
pub(crate) fn scan_archive(path: &Path, extract_to: Option<&Path>, keep: &dyn Fn(&str) -> bool) -> io::Result<Scan> {
    let mut file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut head = [0u8; 4];
    let n = file.read(&mut head)?;
    if n == 4 && head[..3] == GZIP_MAGIC[..3] && head[3] & 0x02 == 0 {
        // A damaged flags byte also looks like this; only a clean decode
        // counts as a repacked archive.
        let plain = scan_plain(File::open(path)?, extract_to, keep)?;
        if plain.broken.is_empty() {
            return Ok(plain);
        }
    }
    let mut scan = Scan::default();
    let mut offset = 0u64;
    let mut index = 0usize;
    while offset < total {
        file.seek(SeekFrom::Start(offset))?;
        let mut counted = Counted { inner: BufReader::new(&mut file), consumed: 0 };
        let outcome = decode_member(&mut counted, extract_to, keep);
        let consumed = counted.consumed;
        match outcome {
            Ok(entry) => {
                if let Some(e) = entry {
                    scan.entries.push((index, e));
                }
                offset += consumed;
            }
            Err(e) => {
                scan.broken.push(Broken { index, reason: e.to_string() });
                match resync(&mut file, offset + 1, total)? {
                    Some(next) => offset = next,
                    None => {
                        scan.members = index + 1;
                        return Ok(scan);
                    }
                }
            }
        }
        index += 1;
    }
    scan.members = index;
    Ok(scan)
}

/// Fallback for archives repacked by ordinary tools: one gzip stream, so a
/// decode error can only be pinned to the entry being read.
fn scan_plain(mut file: File, extract_to: Option<&Path>, keep: &dyn Fn(&str) -> bool) -> io::Result<Scan> {
    file.seek(SeekFrom::Start(0))?;
    let mut scan = Scan::default();
    let mut archive = tar::Archive::new(flate2::read::MultiGzDecoder::new(BufReader::new(file)));
    let entries = match archive.entries() {
        Ok(e) => e,
        Err(e) => {
            scan.broken.push(Broken { index: 0, reason: e.to_string() });
            return Ok(scan);
        }
    };
    let mut index = 0;
    for entry in entries {
        let outcome = entry.and_then(|mut entry| {
            if entry.header().entry_type().is_dir() {
                return Ok(None);
            }
            if !entry.header().entry_type().is_file() {
                return Err(invalid("unsupported tar entry type"));
            }
            let path = String::from_utf8(entry.path_bytes().into_owned()).map_err(|_| invalid("non-utf8 path"))?;
            let mode = entry.header().mode()?;
            let size = entry.size();
            let dest = extract_to.and_then(|root| safe_join(root, &path));
            let mut sink: Box<dyn Write> = match &dest {
                Some(dest) => {
                    if let Some(parent) = dest.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    Box::new(io::BufWriter::new(File::create(dest)?))
                }
                None => Box::new(io::sink()),
            };
            let mut content = (size < KEEP_CONTENT_BELOW && keep(&path)).then(Vec::new);
            let mut hasher = Sha256::new();
            let mut buf = vec![0u8; 64 * 1024];
            loop {
                let n = entry.read(&mut buf)?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
                sink.write_all(&buf[..n])?;
                if let Some(c) = content.as_mut() {
                    c.extend_from_slice(&buf[..n]);
                }
            }
            sink.flush()?;
            drop(sink);
            if let Some(dest) = &dest {
                use std::os::unix::fs::PermissionsExt;
                std::fs::set_permissions(dest, std::fs::Permissions::from_mode(mode & 0o777))?;
            }
            Ok(Some(Scanned { path, mode, size, sha256: hex::encode(hasher.finalize()), content }))
        });
        match outcome {
            Ok(Some(s)) => {
                scan.entries.push((index, s));
                index += 1;
            }
            Ok(None) => {}
            Err(e) => {
                // The stream cannot be resumed after a decode error.
                scan.broken.push(Broken { index, reason: e.to_string() });
                break;
            }
        }
    }
    scan.members = index;
    Ok(scan)
}

/// Decodes one member. `None` when it holds only end-of-archive blocks.
fn decode_member<R: BufRead>(r: &mut R, extract_to: Option<&Path>, keep: &dyn Fn(&str) -> bool) -> io::Result<Option<Scanned>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != GZIP_MAGIC {
        return Err(invalid("not a checksummed gzip member"));
    }
    let mut gz = flate2::bufread::GzDecoder::new(Prefixed { prefix: magic, pos: 0, inner: r });
    let mut block = [0u8; BLOCK];

    let mut long_name: Option<String> = None;
    let scanned = loop {
        if !read_block(&mut gz, &mut block)? {
            return Err(invalid("member ended before a tar header"));
        }
        if block.iter().all(|&b| b == 0) {
            expect_end(&mut gz, 1)?;
            return Ok(None);
        }
        let header = tar::Header::from_byte_slice(&block);
        let stored = header.cksum().map_err(|_| invalid("bad tar header checksum field"))?;
        let mut probe = header.clone();
        probe.set_cksum();
        if probe.cksum().ok() != Some(stored) {
            return Err(invalid("tar header checksum mismatch"));
        }
        let size = header.entry_size().map_err(|_| invalid("bad tar size field"))?;
        match header.entry_type() {
            tar::EntryType::GNULongName => {
                if size > 64 * 1024 {
                    return Err(invalid("long name too long"));
                }
                let mut name = vec![0u8; size as usize];
                gz.read_exact(&mut name)?;
                skip(&mut gz, pad(size) as u64)?;
                while name.last() == Some(&0) {
                    name.pop();
                }
                long_name = Some(String::from_utf8(name).map_err(|_| invalid("non-utf8 path"))?);
            }
            tar::EntryType::Regular => {
                let path = match long_name.take() {
                    Some(p) => p,
                    None => String::from_utf8(header.path_bytes().into_owned()).map_err(|_| invalid("non-utf8 path"))?,
                };
                let mode = header.mode().map_err(|_| invalid("bad tar mode field"))?;
                let dest = extract_to.and_then(|root| safe_join(root, &path));
                let mut sink: Box<dyn Write> = match &dest {
                    Some(dest) => {
                        if let Some(parent) = dest.parent() {
                            std::fs::create_dir_all(parent)?;
                        }
                        Box::new(io::BufWriter::new(File::create(dest)?))
                    }
                    None => Box::new(io::sink()),
                };
                let keep_content = size < KEEP_CONTENT_BELOW && keep(&path);
                let mut content = keep_content.then(Vec::new);
                let mut hasher = Sha256::new();
                let mut left = size;
                let mut buf = vec![0u8; 64 * 1024];
                while left > 0 {
                    let want = left.min(buf.len() as u64) as usize;
                    let n = gz.read(&mut buf[..want])?;
                    if n == 0 {
                        return Err(invalid("entry truncated"));
                    }
                    hasher.update(&buf[..n]);
                    sink.write_all(&buf[..n])?;
                    if let Some(c) = content.as_mut() {
                        c.extend_from_slice(&buf[..n]);
                    }
                    left -= n as u64;
                }
                sink.flush()?;
                drop(sink);
                if let Some(dest) = &dest {
                    use std::os::unix::fs::PermissionsExt;
                    std::fs::set_permissions(dest, std::fs::Permissions::from_mode(mode & 0o777))?;
                }
                skip(&mut gz, pad(size) as u64)?;
                break Scanned { path, mode, size, sha256: hex::encode(hasher.finalize()), content };
            }
            other => return Err(invalid(&format!("unsupported tar entry type {:?}", other.as_byte() as char))),
        }
    };
    // Anything left in the member must be the end-of-archive marker.
    let mut rest = Vec::new();
    gz.read_to_end(&mut rest)?;
    if !(rest.is_empty() || (rest.len() == 2 * BLOCK && rest.iter().all(|&b| b == 0))) {
        return Err(invalid("unexpected data after entry"));
    }
    Ok(Some(scanned))
}

fn read_block<R: Read>(r: &mut R, block: &mut [u8; BLOCK]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < BLOCK {
        let n = r.read(&mut block[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(invalid("partial tar block"));
        }
        filled += n;
    }
    Ok(true)
}

/// After one zero block: the rest of the member must be `more` zero blocks.
fn expect_end<R: Read>(r: &mut R, more: usize) -> io::Result<()> {
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() == more * BLOCK && rest.iter().all(|&b| b == 0) {
        Ok(())
    } else {
        Err(invalid("malformed end-of-archive marker"))
    }
}

fn skip<R: Read>(r: &mut R, n: u64) -> io::Result<()> {
    let copied = io::copy(&mut r.take(n), &mut io::sink())?;
    if copied != n {
        return Err(invalid("entry padding truncated"));
    }
    Ok(())
}

/// Next offset after `from` that starts a gzip member with a valid header CRC.
fn resync(file: &mut File, from: u64, total: u64) -> io::Result<Option<u64>> {
    file.seek(SeekFrom::Start(from))?;
    let mut r = BufReader::new(file);
    let mut window: Vec<u8> = Vec::with_capacity(12);
    let mut pos = from;
    let mut byte = [0u8; 1];
    while pos < total {
        if r.read(&mut byte)? == 0 {
            break;
        }
        window.push(byte[0]);
        if window.len() > 12 {
            window.remove(0);
        }
        pos += 1;
        if window.len() == 12 && window[..4] == GZIP_MAGIC {
            let mut crc = Crc::new();
            crc.update(&window[..10]);
            if (crc.sum() as u16).to_le_bytes() == window[10..12] {
                return Ok(Some(pos - 12));
            }
        }
    }
    Ok(None)
}

/// `root/rel` when `rel` is a plain relative path.
pub(crate) fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    if !is_safe_path(rel) {
        return None;
    }
    Some(root.join(rel))
}

/// Relative, `/`-separated, no empty, `.` or `..` segments, no backslashes.
pub(crate) fn is_safe_path(rel: &str) -> bool {
    !rel.is_empty()
        && !rel.starts_with('/')
        && !rel.contains('\\')
        && !rel.contains('\0')
        && rel.split('/').all(|s| !s.is_empty() && s != "." && s != "..")
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_owned())
}

struct Counted<R> {
    inner: R,
    consumed: u64,
}

impl<R: BufRead> Read for Counted<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.consumed += n as u64;
        Ok(n)
    }
}

impl<R: BufRead> BufRead for Counted<R> {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.consumed += amt as u64;
        self.inner.consume(amt)
    }
}

/// Replays bytes already read ahead of a buffered reader.
struct Prefixed<'a, R> {
    prefix: [u8; 4],
    pos: usize,
    inner: &'a mut R,
}

impl<R: BufRead> Read for Prefixed<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let avail = self.fill_buf()?;
        let n = avail.len().min(buf.len());
        buf[..n].copy_from_slice(&avail[..n]);
        self.consume(n);
        Ok(n)
    }
}

impl<R: BufRead> BufRead for Prefixed<'_, R> {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        if self.pos < self.prefix.len() {
            return Ok(&self.prefix[self.pos..]);
        }
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        if self.pos < self.prefix.len() {
            self.pos += amt;
        } else {
            self.inner.consume(amt)
        }
    }
}

/// Decodes only the first member.
pub(crate) fn first_entry(path: &Path) -> io::Result<Scanned> {
    let mut r = BufReader::new(File::open(path)?);
    let member = decode_member(&mut r, None, &|_| true);
    if member.is_ok() {
        return member?.ok_or_else(|| invalid("archive has no entries"));
    }
    // Archives repacked by ordinary tools have no per-member checksums.
    let mut archive = tar::Archive::new(flate2::read::MultiGzDecoder::new(BufReader::new(File::open(path)?)));
    let Some(Ok(mut entry)) = archive.entries()?.next() else {
        return member?.ok_or_else(|| invalid("archive has no entries"));
    };
    let path = String::from_utf8(entry.path_bytes().into_owned()).map_err(|_| invalid("non-utf8 path"))?;
    let mode = entry.header().mode()?;
    let size = entry.size();
    let mut content = Vec::new();
    entry.read_to_end(&mut content)?;
    let sha256 = hex::encode(Sha256::digest(&content));
    Ok(Scanned { path, mode, size, sha256, content: Some(content) })
}
