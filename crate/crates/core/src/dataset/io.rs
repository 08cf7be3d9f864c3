//! Binary dataset files with a JSON manifest sidecar.
//!
//! Layout (little-endian): `"IMN1"`, version `u32`, record count `u64`,
//! sequence length `u32`, then per record the features as `f32`, `target_p`
//! and `target_logr` as `f32` and the `Γ` class as `u8`; a CRC32 of all
//! preceding bytes closes the file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, ExampleSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IMN1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// `<dir>/<stem>.manifest` for a dataset file `<dir>/<stem>.<ext>`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest")
}

fn record_len(feature_len: usize) -> usize {
    4 * feature_len + 9
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode(examples: &ExampleSet, seq_len: usize) -> Vec<u8> {
    let n = examples.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * record_len(examples.feature_len) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(seq_len as u32).to_le_bytes());
    for i in 0..n {
        for v in examples.features_of(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&examples.target_p[i].to_le_bytes());
        buf.extend_from_slice(&examples.target_logr[i].to_le_bytes());
        buf.push(examples.gamma_class[i]);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let m = &dataset.manifest;
    if dataset.examples.len() != m.split_sizes.total() {
        return Err(Error::Shape(format!(
            "dataset holds {} examples but manifest declares {}",
            dataset.examples.len(),
            m.split_sizes.total()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_atomic(path, &encode(&dataset.examples, m.config.seq_len))?;
    let text = serde_json::to_string_pretty(m)?;
    write_atomic(&manifest_path(path), text.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", mpath.display())))
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().unwrap())
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes(b.try_into().unwrap())
}

pub(crate) fn decode(bytes: &[u8], path: &Path, manifest: &DatasetManifest) -> Result<ExampleSet> {
    let found = bytes.len() as u64;
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: (HEADER_LEN + 4) as u64,
            found,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let version = le_u32(&bytes[4..8]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let seq_len = le_u32(&bytes[16..20]) as usize;
    // The manifest is an independent copy of the header fields.
    if count != manifest.split_sizes.total() as u64 || seq_len != manifest.config.seq_len {
        return Err(Error::Checksum {
            path: path.into(),
            detail: format!(
                "header declares {count} records of length {seq_len}, manifest declares {} of length {}",
                manifest.split_sizes.total(),
                manifest.config.seq_len
            ),
        });
    }
    let feature_len = manifest.feature_len();
    let rec = record_len(feature_len);
    let expected = (HEADER_LEN + count as usize * rec + 4) as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::Checksum {
            path: path.into(),
            detail: format!("{} unexpected trailing bytes", found - expected),
        });
    }
    let body_end = bytes.len() - 4;
    let stored = le_u32(&bytes[body_end..]);
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::Checksum {
            path: path.into(),
            detail: format!("stored CRC32 {stored:08x}, computed {actual:08x}"),
        });
    }

    let mut out = ExampleSet::new(feature_len);
    out.features.reserve(count as usize * feature_len);
    for chunk in bytes[HEADER_LEN..body_end].chunks_exact(rec) {
        out.features
            .extend(chunk[..4 * feature_len].chunks_exact(4).map(le_f32));
        let tail = &chunk[4 * feature_len..];
        out.target_p.push(le_f32(&tail[0..4]));
        out.target_logr.push(le_f32(&tail[4..8]));
        out.gamma_class.push(tail[8]);
    }
    if let Some(bad) = out.gamma_class.iter().find(|&&c| c as usize >= manifest.class_map.num_classes()) {
        return Err(Error::Checksum {
            path: path.into(),
            detail: format!("class index {bad} outside the class map"),
        });
    }
    Ok(out)
}

/// Load a dataset and its manifest; nothing is returned unless every check passes.
pub fn load(path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: manifest_path(path),
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let examples = decode(&bytes, path, &manifest)?;
    Ok(Dataset { examples, manifest })
}
