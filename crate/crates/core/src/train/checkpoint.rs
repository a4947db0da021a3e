//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config snapshot, step, RNG state, fingerprints, array index), then
//! the raw little-endian array payload. Every array carries its own SHA-256 so
//! corruption is reported with the byte offset of the damaged array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tensor_bytes;

pub const MAGIC: &[u8; 8] = b"DDEPTHCK";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next epoch to run; shuffling and augmentation derive from `(seed, epoch)`.
    pub epoch: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    global_step: u64,
    rng: RngState,
    fingerprints: BTreeMap<String, String>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Canonical config text the model was built from.
    pub config: String,
    pub config_hash: String,
    pub global_step: u64,
    pub rng: RngState,
    /// Frozen-store fingerprints at save time.
    pub fingerprints: BTreeMap<String, String>,
    /// `store/name` parameters plus optimizer moments under `opt/`.
    pub arrays: Vec<(String, Tensor)>,
}

/// How strictly a checkpoint is matched against the active config.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Hash of the config the caller intends to run with, if any.
    pub expected_config_hash: Option<String>,
    /// Accept a checkpoint built from a different config.
    pub allow_config_mismatch: bool,
}

impl Checkpoint {
    /// Refuse a config-hash mismatch unless overridden; returns a warning
    /// when the override was used.
    pub fn check_config(&self, opts: &LoadOptions) -> Result<Option<String>> {
        match &opts.expected_config_hash {
            Some(h) if *h != self.config_hash => {
                if opts.allow_config_mismatch {
                    Ok(Some(format!(
                        "checkpoint config hash {} differs from active config {h}; loading anyway",
                        self.config_hash
                    )))
                } else {
                    Err(Error::ConfigMismatch {
                        expected: h.clone(),
                        found: self.config_hash.clone(),
                    })
                }
            }
            _ => Ok(None),
        }
    }

    pub fn array_map(&self) -> BTreeMap<String, Tensor> {
        self.arrays.iter().cloned().collect()
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Contract(format!("cannot checkpoint dtype {other:?}"))),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.arrays.len());
    for (name, t) in &ckpt.arrays {
        let bytes = tensor_bytes(t)?;
        entries.push(ArrayEntry {
            name: name.clone(),
            dtype: dtype_name(t.dtype())?.to_string(),
            shape: t.dims().to_vec(),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        config: ckpt.config.clone(),
        config_hash: ckpt.config_hash.clone(),
        global_step: ckpt.global_step,
        rng: ckpt.rng,
        fingerprints: ckpt.fingerprints.clone(),
        arrays: entries,
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN as usize + hjson.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(path, &bytes)
}

fn corrupt(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN as usize {
        return Err(corrupt(path, bytes.len() as u64, "file ends inside the fixed prefix"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt(path, 0, "bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let hend = PREFIX_LEN
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len() as u64)
        .ok_or_else(|| corrupt(path, 12, format!("header length {hlen} runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN as usize..hend as usize]).map_err(|e| {
        // serde reports line/column; the header is a single line
        corrupt(
            path,
            PREFIX_LEN + e.column().saturating_sub(1) as u64,
            format!("malformed header: {e}"),
        )
    })?;
    let payload = &bytes[hend as usize..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for a in &header.arrays {
        let at = hend + a.offset;
        let end = a
            .offset
            .checked_add(a.len)
            .filter(|e| *e <= payload.len() as u64)
            .ok_or_else(|| corrupt(path, at, format!("array {} runs past end of file", a.name)))?;
        let raw = &payload[a.offset as usize..end as usize];
        if hex::encode(Sha256::digest(raw)) != a.sha256 {
            return Err(corrupt(path, at, format!("array {} fails its checksum", a.name)));
        }
        let n: usize = a.shape.iter().product();
        let t = match a.dtype.as_str() {
            "f32" if raw.len() == 4 * n => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                    .collect();
                Tensor::from_vec(v, a.shape.as_slice(), &Device::Cpu)?
            }
            "f64" if raw.len() == 8 * n => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                    .collect();
                Tensor::from_vec(v, a.shape.as_slice(), &Device::Cpu)?
            }
            d => {
                return Err(corrupt(
                    path,
                    at,
                    format!(
                        "array {} has dtype {d} and {} bytes for shape {:?}",
                        a.name,
                        raw.len(),
                        a.shape
                    ),
                ))
            }
        };
        arrays.push((a.name.clone(), t));
    }
    Ok(Checkpoint {
        format_version: version,
        config: header.config,
        config_hash: header.config_hash,
        global_step: header.global_step,
        rng: header.rng,
        fingerprints: header.fingerprints,
        arrays,
    })
}

/// Only the arrays of a checkpoint-format file, for weight adapters.
pub fn read_arrays(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(load_checkpoint(path)?.arrays)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let dev = Device::Cpu;
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: "a = 1\n".into(),
            config_hash: "h1".into(),
            global_step: 7,
            rng: RngState { seed: 3, epoch: 2 },
            fingerprints: [("classifier".to_string(), "ff".to_string())].into_iter().collect(),
            arrays: vec![
                (
                    "head/w".into(),
                    Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &dev).unwrap(),
                ),
                ("head/b".into(), Tensor::new(&[1e-300f64, -0.0], &dev).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = sample();
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.global_step, 7);
        assert_eq!(back.rng, c.rng);
        assert_eq!(back.fingerprints, c.fingerprints);
        for ((n1, t1), (n2, t2)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dtype(), t2.dtype());
            assert_eq!(tensor_bytes(t1).unwrap(), tensor_bytes(t2).unwrap());
        }
        // saving the reloaded checkpoint reproduces the same bytes
        let q = dir.path().join("d.ckpt");
        save_checkpoint(&q, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn corruption_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        let good = fs::read(&p).unwrap();

        let mut flipped = good.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0xff;
        match parse_checkpoint(&p, &flipped) {
            Err(Error::Checkpoint { offset, msg, .. }) => {
                assert!(msg.contains("head/b"));
                assert_eq!(offset, (good.len() - 16) as u64);
            }
            other => panic!("{:?}", other.err()),
        }

        let truncated = &good[..good.len() - 3];
        assert!(matches!(parse_checkpoint(&p, truncated), Err(Error::Checkpoint { .. })));

        let mut v2 = good.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&p, &v2),
            Err(Error::CheckpointVersion { found: 2, .. })
        ));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&p, &bad_magic),
            Err(Error::Checkpoint { offset: 0, .. })
        ));

        let mut bad_header = good;
        bad_header[22] = b'#';
        assert!(matches!(
            parse_checkpoint(&p, &bad_header),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn config_hash_guard() {
        let c = sample();
        let strict = LoadOptions {
            expected_config_hash: Some("h2".into()),
            allow_config_mismatch: false,
        };
        assert!(matches!(c.check_config(&strict), Err(Error::ConfigMismatch { .. })));
        let lenient = LoadOptions {
            allow_config_mismatch: true,
            ..strict
        };
        assert!(c.check_config(&lenient).unwrap().is_some());
        let same = LoadOptions {
            expected_config_hash: Some("h1".into()),
            allow_config_mismatch: false,
        };
        assert!(c.check_config(&same).unwrap().is_none());
    }
}
