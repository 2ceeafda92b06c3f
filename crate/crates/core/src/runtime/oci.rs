//! Minimal OCI image layout tarballs for the simulated backend.
//!
//! One layer holds the image's filesystem snapshot; the config carries the
//! recipe and image id as labels. Every blob is verified against its digest
//! on read.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};

use serde_json::{json, Value};

use super::{Result, RuntimeError};
use crate::digest::sha256_hex;
use crate::planner::ImageRef;

const MANIFEST_MEDIA: &str = "application/vnd.oci.image.manifest.v1+json";
const CONFIG_MEDIA: &str = "application/vnd.oci.image.config.v1+json";
const LAYER_MEDIA: &str = "application/vnd.oci.image.layer.v1.tar";
const REF_ANNOTATION: &str = "org.opencontainers.image.ref.name";
const ID_LABEL: &str = "org.rrp.image-id";
const RECIPE_LABEL: &str = "org.rrp.recipe";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageArchive {
    pub reference: ImageRef,
    pub image_id: String,
    pub recipe: String,
    /// Filesystem snapshot, keyed by absolute container path.
    pub files: BTreeMap<String, Vec<u8>>,
}

fn append(builder: &mut tar::Builder<&mut Vec<u8>>, path: &str, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, path, data)
}

fn descriptor(media: &str, blob: &[u8]) -> Value {
    json!({ "mediaType": media, "digest": format!("sha256:{}", sha256_hex(blob)), "size": blob.len() })
}

pub fn write_image_layout(image: &ImageArchive) -> Vec<u8> {
    let mut layer = Vec::new();
    {
        let mut b = tar::Builder::new(&mut layer);
        for (path, data) in &image.files {
            append(&mut b, path.trim_start_matches('/'), data).expect("in-memory tar");
        }
        b.finish().expect("in-memory tar");
    }
    let config = serde_json::to_vec(&json!({
        "architecture": "amd64",
        "os": "linux",
        "config": { "Labels": { ID_LABEL: image.image_id, RECIPE_LABEL: image.recipe } },
        "rootfs": { "type": "layers", "diff_ids": [format!("sha256:{}", sha256_hex(&layer))] },
    }))
    .expect("json");
    let manifest = serde_json::to_vec(&json!({
        "schemaVersion": 2,
        "mediaType": MANIFEST_MEDIA,
        "config": descriptor(CONFIG_MEDIA, &config),
        "layers": [descriptor(LAYER_MEDIA, &layer)],
    }))
    .expect("json");
    let mut manifest_desc = descriptor(MANIFEST_MEDIA, &manifest);
    manifest_desc["annotations"] = json!({ REF_ANNOTATION: image.reference.to_string() });
    let index = serde_json::to_vec(&json!({
        "schemaVersion": 2,
        "mediaType": "application/vnd.oci.image.index.v1+json",
        "manifests": [manifest_desc],
    }))
    .expect("json");

    let mut out = Vec::new();
    {
        let mut b = tar::Builder::new(&mut out);
        // The layer is itself a tar ending in zero blocks, so it must not be
        // the final entry or a lost end marker would go unnoticed.
        for blob in [&manifest, &config, &layer] {
            append(&mut b, &format!("blobs/sha256/{}", sha256_hex(blob)), blob).expect("tar");
        }
        append(&mut b, "index.json", &index).expect("tar");
        append(&mut b, "oci-layout", br#"{"imageLayoutVersion":"1.0.0"}"#).expect("tar");
        b.finish().expect("tar");
    }
    out
}

fn corrupt(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::CorruptArchive(msg.into())
}

fn read_entries(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    let mut out = BTreeMap::new();
    let entries = archive.entries().map_err(|e| corrupt(e.to_string()))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| corrupt(e.to_string()))?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = entry.path().map_err(|e| corrupt(e.to_string()))?.to_string_lossy().into_owned();
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut data).map_err(|e| corrupt(format!("{path}: {e}")))?;
        if data.len() as u64 != entry.size() {
            return Err(corrupt(format!("{path}: truncated")));
        }
        out.insert(path, data);
    }
    Ok(out)
}

fn blob<'a>(entries: &'a BTreeMap<String, Vec<u8>>, desc: &Value) -> Result<&'a [u8]> {
    let digest = desc["digest"].as_str().ok_or_else(|| corrupt("descriptor without digest"))?;
    let hex = digest.strip_prefix("sha256:").ok_or_else(|| corrupt(format!("unsupported digest {digest}")))?;
    let data = entries.get(&format!("blobs/sha256/{hex}")).ok_or_else(|| corrupt(format!("missing blob {digest}")))?;
    if sha256_hex(data) != hex {
        return Err(corrupt(format!("blob {digest} does not match its digest")));
    }
    if desc["size"].as_u64() != Some(data.len() as u64) {
        return Err(corrupt(format!("blob {digest} has the wrong size")));
    }
    Ok(data)
}

fn json_of(bytes: &[u8], what: &str) -> Result<Value> {
    serde_json::from_slice(bytes).map_err(|e| corrupt(format!("{what}: {e}")))
}

pub fn read_image_layout(bytes: &[u8]) -> Result<ImageArchive> {
    // A complete tar stream ends with two zero blocks.
    if bytes.len() < 1024 || !bytes.len().is_multiple_of(512) || bytes[bytes.len() - 1024..].iter().any(|b| *b != 0) {
        return Err(corrupt("missing end-of-archive marker (truncated?)"));
    }
    let entries = read_entries(bytes)?;
    if !entries.contains_key("oci-layout") {
        return Err(corrupt("missing oci-layout"));
    }
    let index = json_of(entries.get("index.json").ok_or_else(|| corrupt("missing index.json"))?, "index.json")?;
    let desc = index["manifests"].get(0).ok_or_else(|| corrupt("index has no manifests"))?;
    let reference = desc["annotations"][REF_ANNOTATION]
        .as_str()
        .and_then(ImageRef::parse)
        .ok_or_else(|| corrupt("manifest has no usable reference annotation"))?;
    let manifest = json_of(blob(&entries, desc)?, "manifest")?;
    let config = json_of(blob(&entries, &manifest["config"])?, "config")?;
    let labels = &config["config"]["Labels"];
    let image_id = labels[ID_LABEL].as_str().ok_or_else(|| corrupt("config lacks image id"))?.to_owned();
    let recipe = labels[RECIPE_LABEL].as_str().ok_or_else(|| corrupt("config lacks recipe"))?.to_owned();
    if image_id != format!("sha256:{}", sha256_hex(recipe.as_bytes())) {
        return Err(corrupt("image id does not match recipe"));
    }

    let layers = manifest["layers"].as_array().ok_or_else(|| corrupt("manifest lacks layers"))?;
    let mut files = BTreeMap::new();
    for layer in layers {
        for (path, data) in read_entries(blob(&entries, layer)?)? {
            files.insert(format!("/{path}"), data);
        }
    }
    Ok(ImageArchive { reference, image_id, recipe, files })
}
