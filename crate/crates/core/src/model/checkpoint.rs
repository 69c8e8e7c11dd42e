//! Self-describing checkpoint container.
//!
//! Layout: `b"TLLM"`, `u32` version, `u32` header length (little-endian),
//! a JSON header holding the model config and a tensor manifest, then the
//! payload. Manifest entries tile the payload in order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TLLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Dense,
    Packed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryDType {
    F32,
    F64,
    /// A packed ternary matrix blob.
    Tpk1,
}

impl From<DType> for EntryDType {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => EntryDType::F32,
            DType::F64 => EntryDType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: EntryDType,
    pub offset: u64,
    pub nbytes: u64,
    pub trainable: bool,
    pub lr_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ContainerKind,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub(crate) fn write_container(header: &CheckpointHeader, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Parses and validates the container framing; returns the header and
/// each entry's payload slice.
pub(crate) fn read_container(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<&[u8]>)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if hlen > body.len() {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload = &body[hlen..];
    let mut cursor = 0u64;
    let mut slices = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != cursor {
            return Err(Error::Format(format!(
                "tensor {}: offset {} does not follow previous tensor (expected {cursor})",
                e.name, e.offset
            )));
        }
        let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= payload.len() as u64);
        let Some(end) = end else {
            return Err(Error::Format(format!("tensor {}: data runs past end of file", e.name)));
        };
        let numel: usize = e.shape.iter().product();
        let expect = match e.dtype {
            EntryDType::F32 => Some(numel * 4),
            EntryDType::F64 => Some(numel * 8),
            EntryDType::Tpk1 => None,
        };
        if let Some(n) = expect {
            if n as u64 != e.nbytes {
                return Err(Error::Format(format!(
                    "tensor {}: {} bytes for shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
        }
        slices.push(&payload[e.offset as usize..end as usize]);
        cursor = end;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::Format(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - cursor
        )));
    }
    Ok((header, slices))
}

pub(crate) fn decode_dense<S: Scalar>(e: &TensorEntry, data: &[u8]) -> Result<Tensor<S>> {
    let values: Vec<S> = match e.dtype {
        EntryDType::F32 => data.chunks_exact(4).map(|c| S::of(f32::read_le(c) as f64)).collect(),
        EntryDType::F64 => data.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect(),
        EntryDType::Tpk1 => return Err(Error::Format(format!("tensor {}: expected dense data", e.name))),
    };
    Tensor::new(&e.shape, values).map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))
}

pub fn encode_checkpoint<S: Scalar>(model: &TransformerModel<S>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let offset = payload.len() as u64;
        p.value.data().iter().for_each(|v| v.write_le(&mut payload));
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: S::DTYPE.into(),
            offset,
            nbytes: payload.len() as u64 - offset,
            trainable: p.trainable,
            lr_multiplier: p.lr_multiplier,
        });
    }
    let header = CheckpointHeader {
        kind: ContainerKind::Dense,
        config: model.config.clone(),
        tensors,
    };
    write_container(&header, &payload)
}

/// Rebuilds a model from checkpoint bytes, converting stored values to `S`.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<TransformerModel<S>> {
    let (header, slices) = read_container(bytes)?;
    if header.kind != ContainerKind::Dense {
        return Err(Error::Format("expected a dense checkpoint, found a packed model".into()));
    }
    let mut model = TransformerModel::<S>::zeros(header.config.clone())?;
    let mut seen = vec![false; model.params.len()];
    for (e, data) in header.tensors.iter().zip(slices) {
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| Error::Format(format!("tensor {}: not part of this model", e.name)))?;
        let value = decode_dense::<S>(e, data)?;
        let p = model.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Format(format!(
                "tensor {}: shape {:?}, model expects {:?}",
                e.name,
                value.shape(),
                p.value.shape()
            )));
        }
        if seen[id] {
            return Err(Error::Format(format!("tensor {}: stored twice", e.name)));
        }
        seen[id] = true;
        p.value = value;
        p.trainable = e.trainable;
        p.lr_multiplier = e.lr_multiplier;
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("tensor {}: missing", model.params.get(id).name)));
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &TransformerModel<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<TransformerModel<S>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{GroupSpec, QuantMode};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 4,
            group_size: GroupSpec::Size(4),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut m = TransformerModel::<f32>::init(small(), 5).unwrap();
        m.quantize(QuantMode::Dlt, GroupSpec::Size(4)).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_offset_names_tensor() {
        let m = TransformerModel::<f32>::init(small(), 5).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let (mut header, slices) = read_container(&bytes).unwrap();
        let payload: Vec<u8> = slices.concat();
        header.tensors[2].offset += 4;
        let bad = write_container(&header, &payload).unwrap();
        let err = decode_checkpoint::<f32>(&bad).unwrap_err();
        let name = header.tensors[2].name.clone();
        assert!(matches!(&err, Error::Format(msg) if msg.contains(&name)), "{err}");
    }

    #[test]
    fn truncated_and_bad_magic() {
        let m = TransformerModel::<f64>::init(small(), 5).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert!(matches!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn widening_load_preserves_values() {
        let m = TransformerModel::<f32>::init(small(), 6).unwrap();
        let wide = decode_checkpoint::<f64>(&encode_checkpoint(&m).unwrap()).unwrap();
        for (a, b) in m.params.iter().zip(wide.params.iter()) {
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| *x as f64 == *y));
        }
    }
}
