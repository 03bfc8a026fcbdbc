//! Portable checkpoint format.
//!
//! All integers are little-endian `u32` unless noted:
//!
//! ```text
//! "SWNT" | version | fingerprint_len | fingerprint (UTF-8 hex)
//! metadata: entry_count, then per entry key_len | key | value_len | value
//! params:   param_count, then per param
//!           name_len | name | rank | dims[rank] | f32 LE payload
//! ```
//!
//! Nothing may follow the last parameter record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchitectureSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("architecture fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
}

/// Training provenance stored with the weights.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub seed: u64,
    pub epochs: u32,
    pub manifest_hash: String,
    pub timestamp: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

const RESERVED: [&str; 4] = ["seed", "epochs", "manifest_hash", "timestamp"];

impl CheckpointMetadata {
    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("epochs".to_string(), self.epochs.to_string()),
            ("manifest_hash".to_string(), self.manifest_hash.clone()),
            ("timestamp".to_string(), self.timestamp.clone()),
        ];
        out.extend(
            self.extra
                .iter()
                .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone())),
        );
        out
    }

    fn from_entries(entries: Vec<(String, String)>) -> Result<Self, CheckpointError> {
        let mut map: BTreeMap<String, String> = entries.into_iter().collect();
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| CheckpointError::Corrupt(format!("metadata key `{key}` missing")))
        };
        let seed = take("seed")?
            .parse()
            .map_err(|_| CheckpointError::Corrupt("metadata seed is not an integer".into()))?;
        let epochs = take("epochs")?
            .parse()
            .map_err(|_| CheckpointError::Corrupt("metadata epochs is not an integer".into()))?;
        let manifest_hash = take("manifest_hash")?;
        let timestamp = take("timestamp")?;
        Ok(Self {
            seed,
            epochs,
            manifest_hash,
            timestamp,
            extra: map,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), CheckpointError> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_checkpoint(
    network: &Network<f32>,
    metadata: &CheckpointMetadata,
) -> Result<Vec<u8>, CheckpointError> {
    let params = network.parameters();
    let payload: usize = params.iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(payload + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &network.fingerprint())?;
    let entries = metadata.entries();
    put_u32(&mut out, entries.len())?;
    for (k, v) in &entries {
        put_str(&mut out, k)?;
        put_str(&mut out, v)?;
    }
    put_u32(&mut out, params.len())?;
    for (name, tensor) in params {
        put_str(&mut out, &name)?;
        put_u32(&mut out, tensor.rank())?;
        for &d in tensor.shape() {
            put_u32(&mut out, d)?;
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }
}

/// Decodes a checkpoint for `spec`, verifying magic, version and fingerprint
/// before any weights are accepted.
pub fn decode_checkpoint(
    bytes: &[u8],
    spec: &ArchitectureSpec,
) -> Result<(Network<f32>, CheckpointMetadata), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let found = r.string("fingerprint")?;
    let expected = spec.fingerprint();
    if found != expected {
        return Err(CheckpointError::FingerprintMismatch { expected, found });
    }
    let entry_count = r.u32("metadata count")?;
    let mut entries = Vec::new();
    for _ in 0..entry_count {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        entries.push((k, v));
    }
    let metadata = CheckpointMetadata::from_entries(entries)?;

    let mut network = Network::<f32>::zeroed(spec.clone())
        .map_err(|e| CheckpointError::Corrupt(format!("architecture: {e}")))?;
    let names: Vec<String> = network.parameters().into_iter().map(|(n, _)| n).collect();
    let count = r.u32("parameter count")? as usize;
    if count != names.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} parameter records, architecture has {}",
            names.len()
        )));
    }
    for (slot, expected_name) in network.parameters_mut().into_iter().zip(&names) {
        let name = r.string("parameter name")?;
        if &name != expected_name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter `{name}` where `{expected_name}` was expected"
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if shape != slot.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter `{name}` has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let raw = r.take(slot.len() * 4, "parameter payload")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *slot = Tensor::new(shape, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok((network, metadata))
}

/// Writes the checkpoint atomically (temp file + rename).
pub fn save_checkpoint(
    network: &Network<f32>,
    metadata: &CheckpointMetadata,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(network, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("swnt.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Loads a SewerNet checkpoint.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Network<f32>, CheckpointMetadata), CheckpointError> {
    load_checkpoint_for(path, &ArchitectureSpec::sewernet())
}

pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    spec: &ArchitectureSpec,
) -> Result<(Network<f32>, CheckpointMetadata), CheckpointError> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec};

    fn small_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            input_shape: [4, 4, 1],
            num_classes: 4,
            layers: vec![
                LayerSpec::Conv2d {
                    name: "conv".into(),
                    kernel_size: 3,
                    in_channels: 1,
                    out_channels: 2,
                    activation: Activation::Relu,
                },
                LayerSpec::Flatten {
                    name: "flat".into(),
                },
                LayerSpec::Dense {
                    name: "out".into(),
                    inputs: 32,
                    outputs: 4,
                    activation: Activation::None,
                },
            ],
        }
    }

    fn metadata() -> CheckpointMetadata {
        let mut extra = BTreeMap::new();
        extra.insert("note".to_string(), "ünïcode ok".to_string());
        CheckpointMetadata {
            seed: 7,
            epochs: 3,
            manifest_hash: "abc".into(),
            timestamp: "2026-01-01T00:00:00Z".into(),
            extra,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let spec = small_spec();
        let net = Network::<f32>::build(spec.clone(), 11).unwrap();
        let bytes = encode_checkpoint(&net, &metadata()).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let (back, meta) = decode_checkpoint(&bytes, &spec).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta, metadata());
        assert_eq!(encode_checkpoint(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn each_failure_has_its_own_error() {
        let spec = small_spec();
        let net = Network::<f32>::build(spec.clone(), 1).unwrap();
        let bytes = encode_checkpoint(&net, &metadata()).unwrap();

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint(truncated, &spec),
            Err(CheckpointError::Corrupt(_))
        ));

        let mut versioned = bytes.clone();
        versioned[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&versioned, &spec),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));

        let mut other = spec.clone();
        if let LayerSpec::Conv2d { activation, .. } = &mut other.layers[0] {
            *activation = Activation::None;
        }
        assert!(matches!(
            decode_checkpoint(&bytes, &other),
            Err(CheckpointError::FingerprintMismatch { .. })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            decode_checkpoint(&trailing, &spec),
            Err(CheckpointError::Corrupt(_))
        ));

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&magic, &spec),
            Err(CheckpointError::Corrupt(_))
        ));
    }
}
