//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `"IMNC"`, version `u32`, metadata JSON length `u32`
//! and bytes, model config JSON length `u32` and bytes, tensor count `u32`,
//! then per tensor a `u16` name length, the name, a `u64` value count and the
//! values as `f64`; a CRC32 of everything before it closes the file.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::dataset::io::write_atomic;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the dataset manifest the model was trained against.
    pub manifest_hash: String,
    /// Free-form run label such as `mtl` or `stl-p`.
    pub label: String,
    pub lambdas: [f64; 3],
    pub train_seconds: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.into(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        serde_json::from_slice(s).map_err(|e| Error::Parse(format!("{}: {e}", self.path.display())))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for json in [
            serde_json::to_vec(&self.meta).expect("metadata serialises"),
            serde_json::to_vec(&self.model.config).expect("config serialises"),
        ] {
            buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
            buf.extend_from_slice(&json);
        }
        let tensors = self.model.params.tensors(true);
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, values) in tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                path: path.into(),
                expected: 12,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        let mut r = Reader { bytes, pos: 4, path };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Checksum {
                path: path.into(),
                detail: format!("stored CRC32 {stored:08x}, computed {actual:08x}"),
            });
        }
        let r_bytes = &bytes[..body_end];
        let mut r = Reader {
            bytes: r_bytes,
            pos: r.pos,
            path,
        };
        let meta: CheckpointMeta = r.json()?;
        let config: ModelConfig = r.json()?;
        let count = r.u32()? as usize;
        let mut stored_tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Parse(format!("{}: tensor name is not UTF-8", path.display())))?;
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Parse("tensor too large".into()))?)?;
            let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            stored_tensors.insert(name, values);
        }
        if r.pos != r_bytes.len() {
            return Err(Error::Parse(format!("{}: trailing bytes after tensors", path.display())));
        }

        let mut model = Model::new(config, 0)?;
        let expected = model.params.tensors(true).len();
        if expected != stored_tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, architecture expects {expected}",
                stored_tensors.len()
            )));
        }
        for (name, slot) in model.params.tensors_mut(true) {
            let values = stored_tensors
                .remove(&name)
                .ok_or_else(|| Error::Shape(format!("checkpoint is missing tensor {name}")))?;
            if values.len() != slot.len() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint has {} values, architecture expects {}",
                    values.len(),
                    slot.len()
                )));
            }
            *slot = values;
        }
        Ok(Checkpoint { meta, model })
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.encode();
        write_atomic(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Estimator, Mode, Task};

    fn sample() -> Checkpoint {
        let mut model = Model::new(ModelConfig::default(), 7).unwrap();
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        let (_, cache) = model.forward(&x, 3, Mode::Train { dropout_seed: 1 }).unwrap();
        model.update_running_stats(&cache.unwrap());
        Checkpoint {
            meta: CheckpointMeta {
                manifest_hash: "ab".repeat(32),
                label: "mtl".into(),
                lambdas: [1.0, 1.0, 1.0],
                train_seconds: 1.5,
                epochs_run: 3,
                best_epoch: 2,
            },
            model,
        }
    }

    #[test]
    fn round_trip_preserves_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        let size = ck.save(&path).unwrap();
        assert_eq!(size as u64, fs::metadata(&path).unwrap().len());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.11).cos()).collect();
        assert_eq!(back.model.infer(&x, 2).unwrap(), ck.model.infer(&x, 2).unwrap());
    }

    #[test]
    fn stl_round_trip() {
        let model = Model::build_stl(Task::Gamma, &ModelConfig::default(), 3).unwrap();
        let ck = Checkpoint {
            model,
            ..sample()
        };
        let back = Checkpoint::decode(&ck.encode(), Path::new("x")).unwrap();
        assert!(back.model.params.head_p.is_none());
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().encode();
        let p = Path::new("m.ckpt");
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x04;
        assert!(matches!(Checkpoint::decode(&flipped, p), Err(Error::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(matches!(Checkpoint::decode(&magic, p), Err(Error::BadMagic { .. })));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(Checkpoint::decode(&version, p), Err(Error::VersionMismatch { .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 9], p).is_err());
    }
}
