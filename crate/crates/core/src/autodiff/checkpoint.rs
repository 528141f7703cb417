//! `KTNSR v1` checkpoint files.
//!
//! Layout: the 8-byte magic `KTNSR001`, a little-endian `u64` manifest
//! length, the UTF-8 JSON manifest, then the tensor payload: concatenated
//! little-endian IEEE-754 `f32` values in row-major order. Manifest
//! `byte_offset`s are relative to the start of the payload.

use serde::{Deserialize, Serialize};

use super::graph::ParamStore;
use crate::error::CheckpointError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"KTNSR001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
    #[serde(default = "default_trainable")]
    pub trainable: bool,
}

fn default_trainable() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Free-form model description (stream configs, training stage).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

pub fn encode(store: &ParamStore<f32>, metadata: serde_json::Value) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, entry) in store.iter() {
        let offset = payload.len() as u64;
        for v in entry.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: entry.value.shape().to_vec(),
            byte_offset: offset,
            byte_len: payload.len() as u64 - offset,
            trainable: entry.trainable,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore<f32>, Manifest), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(CheckpointError::Truncated("missing manifest length".into()));
    }
    let json_len = u64::from_le_bytes(rest[..8].try_into().unwrap());
    let rest = &rest[8..];
    if json_len > rest.len() as u64 {
        return Err(CheckpointError::Truncated(format!(
            "manifest needs {json_len} bytes, {} available",
            rest.len()
        )));
    }
    let (json, payload) = rest.split_at(json_len as usize);
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for entry in &manifest.tensors {
        let layout = |detail: String| CheckpointError::Layout {
            name: entry.name.clone(),
            detail,
        };
        if entry.dtype != "f32" {
            return Err(layout(format!("unsupported dtype {}", entry.dtype)));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| layout("shape product overflows".into()))?;
        if count.checked_mul(4) != Some(entry.byte_len) {
            return Err(layout(format!(
                "byte_len {} does not match shape {:?}",
                entry.byte_len, entry.shape
            )));
        }
        if entry.byte_offset != expected_offset {
            return Err(layout(format!(
                "byte_offset {} is not contiguous (expected {expected_offset})",
                entry.byte_offset
            )));
        }
        let end = entry.byte_offset + entry.byte_len;
        if end > payload.len() as u64 {
            return Err(CheckpointError::Truncated(format!(
                "tensor `{}` ends at byte {end}, payload has {}",
                entry.name,
                payload.len()
            )));
        }
        let raw = &payload[entry.byte_offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| layout(e.to_string()))?;
        if store.contains(&entry.name) {
            return Err(layout("duplicate tensor name".into()));
        }
        store.insert(entry.name.clone(), tensor, entry.trainable);
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(CheckpointError::Layout {
            name: String::new(),
            detail: format!(
                "payload has {} bytes, manifest describes {expected_offset}",
                payload.len()
            ),
        });
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "a.weight",
            Tensor::new(vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0e7]).unwrap(),
            true,
        );
        s.insert("a.running_mean", Tensor::from_vec(vec![0.25]), false);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let bytes = encode(&store, serde_json::json!({"stage": 1}));
        let (back, manifest) = decode(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(manifest.metadata["stage"], 1);
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&sample_store(), serde_json::Value::Null);
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated(_)), "{err:?}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&sample_store(), serde_json::Value::Null);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Layout { .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let store = sample_store();
        let bytes = encode(&store, serde_json::Value::Null);
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + json_len]).unwrap();
        let patched = json.replace("\"format_version\":1", "\"format_version\":2");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + json_len..]);
        assert!(matches!(decode(&out), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(decode(b"KVOL0001xxxxxxxx"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(b""), Err(CheckpointError::BadMagic)));
    }
}
