//! Inference-only model whose ternary linears run on packed 2-bit weights.

use std::path::Path;

use super::checkpoint::{self, ContainerKind, CheckpointHeader, EntryDType, TensorEntry};
use super::{LinearKind, ModelConfig, TransformerModel, WeightMode};
use crate::error::{Error, Result};
use crate::packed::{OpCounts, PackedTernaryMatrix};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum PackedLinear {
    Dense(Tensor<f32>),
    Ternary(PackedTernaryMatrix),
}

impl PackedLinear {
    /// `x[T×C_i] → [T×C_o]`; only ternary layers contribute op counts.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, OpCounts)> {
        match self {
            PackedLinear::Dense(w) => Ok((tensor::matmul_nt(x, w)?, OpCounts::default())),
            PackedLinear::Ternary(m) => m.linear_tokens(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gain: Tensor<f32>,
    bias: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
struct PackedLayer {
    attn_norm: Norm,
    mlp_norm: Norm,
    linears: Vec<PackedLinear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub config: ModelConfig,
    tok_emb: Tensor<f32>,
    pos_emb: Tensor<f32>,
    layers: Vec<PackedLayer>,
    final_norm: Norm,
    head: Tensor<f32>,
}

/// Freezes a quantized model: in-scope linears become packed matrices,
/// everything else is cast to f32.
pub fn convert_to_packed<S: Scalar>(model: &TransformerModel<S>) -> Result<PackedModel> {
    if !model.is_quantized() {
        return Err(Error::State("cannot pack a full-precision model; quantize it first".into()));
    }
    let dense = |id| model.params.get(id).value.cast::<f32>();
    let norm = |ids: super::NormIds| Norm {
        gain: dense(ids.gain),
        bias: ids.bias.map(dense),
    };
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, ids) in model.layers.iter().enumerate() {
        let mut linears = Vec::with_capacity(6);
        for kind in LinearKind::ALL {
            linears.push(match model.quant_state(l, kind)? {
                Some(q) => PackedLinear::Ternary(PackedTernaryMatrix::from_quant(&q)?),
                None => PackedLinear::Dense(dense(ids.linears[kind as usize].weight)),
            });
        }
        layers.push(PackedLayer {
            attn_norm: norm(ids.attn_norm),
            mlp_norm: norm(ids.mlp_norm),
            linears,
        });
    }
    Ok(PackedModel {
        config: model.config.clone(),
        tok_emb: dense(model.tok_emb),
        pos_emb: dense(model.pos_emb),
        layers,
        final_norm: norm(model.final_norm),
        head: dense(model.head),
    })
}

impl PackedModel {
    fn norm(&self, x: &Tensor<f32>, n: &Norm) -> Result<Tensor<f32>> {
        Ok(tensor::rmsnorm(x, &n.gain, n.bias.as_ref(), self.config.rmsnorm_eps as f32)?.0)
    }

    pub fn linear(&self, layer: usize, kind: LinearKind) -> &PackedLinear {
        &self.layers[layer].linears[kind as usize]
    }

    /// Logits `[batch·seq × vocab]` and the op counts of the ternary layers.
    pub fn forward(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<(Tensor<f32>, OpCounts)> {
        let c = &self.config;
        if seq == 0 || batch == 0 || tokens.len() != batch * seq {
            return Err(Error::Input(format!("{} tokens do not form {batch} sequences of {seq}", tokens.len())));
        }
        if seq > c.max_seq_len {
            return Err(Error::Input(format!("sequence length {seq} exceeds maximum {}", c.max_seq_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let mut x = tensor::embedding(&self.tok_emb, tokens)?;
        x.add_assign(&tensor::embedding(&self.pos_emb, &positions)?);
        let mut counts = OpCounts::default();
        let mut run = |lin: &PackedLinear, input: &Tensor<f32>| -> Result<Tensor<f32>> {
            let (y, n) = lin.apply(input)?;
            counts += n;
            Ok(y)
        };
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        for layer in &self.layers {
            let h = self.norm(&x, &layer.attn_norm)?;
            let q = run(&layer.linears[LinearKind::Q as usize], &h)?;
            let k = run(&layer.linears[LinearKind::K as usize], &h)?;
            let v = run(&layer.linears[LinearKind::V as usize], &h)?;
            let mut rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let r = b * seq..(b + 1) * seq;
                let mut heads = Vec::with_capacity(c.n_heads);
                for hd in 0..c.n_heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let qh = tensor::slice2d(&q, r.clone(), cols.clone())?;
                    let kh = tensor::slice2d(&k, r.clone(), cols.clone())?;
                    let vh = tensor::slice2d(&v, r.clone(), cols)?;
                    let scores = tensor::matmul_nt(&qh, &kh)?.map(|s| s * scale);
                    let p = tensor::softmax_rows(&tensor::causal_mask_fill(&scores, f32::NEG_INFINITY)?);
                    heads.push(tensor::matmul(&p, &vh)?);
                }
                rows.push(tensor::concat_cols(&heads.iter().collect::<Vec<_>>())?);
            }
            let att = tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
            x.add_assign(&run(&layer.linears[LinearKind::O as usize], &att)?);

            let h = self.norm(&x, &layer.mlp_norm)?;
            let up = run(&layer.linears[LinearKind::Up as usize], &h)?.map(tensor::gelu);
            x.add_assign(&run(&layer.linears[LinearKind::Down as usize], &up)?);
        }
        let xn = self.norm(&x, &self.final_norm)?;
        Ok((tensor::matmul_nt(&xn, &self.head)?, counts))
    }

    /// Bytes used by weights: packed blobs plus dense f32 tensors.
    pub fn weight_bytes(&self) -> (usize, usize) {
        let mut packed = 0;
        let mut dense = 4 * (self.tok_emb.numel() + self.pos_emb.numel() + self.head.numel());
        let norm_bytes = |n: &Norm| 4 * (n.gain.numel() + n.bias.as_ref().map_or(0, |b| b.numel()));
        dense += norm_bytes(&self.final_norm);
        for layer in &self.layers {
            dense += norm_bytes(&layer.attn_norm) + norm_bytes(&layer.mlp_norm);
            for lin in &layer.linears {
                match lin {
                    PackedLinear::Dense(w) => dense += 4 * w.numel(),
                    PackedLinear::Ternary(m) => packed += m.serialize().len(),
                }
            }
        }
        (packed, dense)
    }

    fn named_parts(&self) -> Vec<(String, Part<'_>)> {
        let mut parts = vec![
            ("tok_emb".to_string(), Part::Dense(&self.tok_emb)),
            ("pos_emb".to_string(), Part::Dense(&self.pos_emb)),
        ];
        fn norm<'a>(parts: &mut Vec<(String, Part<'a>)>, prefix: String, n: &'a Norm) {
            parts.push((format!("{prefix}.weight"), Part::Dense(&n.gain)));
            if let Some(b) = &n.bias {
                parts.push((format!("{prefix}.bias"), Part::Dense(b)));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            norm(&mut parts, format!("{p}.attn_norm"), &layer.attn_norm);
            norm(&mut parts, format!("{p}.mlp_norm"), &layer.mlp_norm);
            for (kind, lin) in LinearKind::ALL.iter().zip(&layer.linears) {
                let name = format!("{p}.{}.weight", kind.name());
                parts.push((
                    name,
                    match lin {
                        PackedLinear::Dense(w) => Part::Dense(w),
                        PackedLinear::Ternary(m) => Part::Packed(m),
                    },
                ));
            }
        }
        norm(&mut parts, "final_norm".into(), &self.final_norm);
        parts.push(("head.weight".into(), Part::Dense(&self.head)));
        parts
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, part) in self.named_parts() {
            let offset = payload.len() as u64;
            let (shape, dtype) = match part {
                Part::Dense(t) => {
                    t.data().iter().for_each(|v| v.write_le(&mut payload));
                    (t.shape().to_vec(), EntryDType::F32)
                }
                Part::Packed(m) => {
                    payload.extend_from_slice(&m.serialize());
                    (vec![m.rows(), m.cols()], EntryDType::Tpk1)
                }
            };
            tensors.push(TensorEntry {
                name,
                shape,
                dtype,
                offset,
                nbytes: payload.len() as u64 - offset,
                trainable: false,
                lr_multiplier: 1.0,
            });
        }
        let header = CheckpointHeader {
            kind: ContainerKind::Packed,
            config: self.config.clone(),
            tensors,
        };
        checkpoint::write_container(&header, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, slices) = checkpoint::read_container(bytes)?;
        if header.kind != ContainerKind::Packed {
            return Err(Error::Format("expected a packed model, found a dense checkpoint".into()));
        }
        if header.config.weight_mode == WeightMode::Fp {
            return Err(Error::Format("packed model config is not quantized".into()));
        }
        // Start from a zero template of the right geometry, then fill by name.
        let template = TransformerModel::<f32>::zeros(header.config.clone())?;
        let mut model = convert_to_packed(&template)?;
        let expected: Vec<String> = model.named_parts().into_iter().map(|(n, _)| n).collect();
        let names: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
        if names != expected {
            let first = expected
                .iter()
                .zip(names.iter().chain(std::iter::repeat(&"<missing>")))
                .find(|(a, b)| a != b)
                .map_or_else(|| names[expected.len()].to_string(), |(a, _)| a.clone());
            return Err(Error::Format(format!("tensor {first}: missing or out of order")));
        }
        let mut it = header.tensors.iter().zip(slices);
        let mut take = |want_packed: bool, slot: PartMut<'_>| -> Result<()> {
            let (e, data) = it.next().expect("names checked");
            match (slot, want_packed) {
                (PartMut::Dense(target), false) => {
                    let t = checkpoint::decode_dense::<f32>(e, data)?;
                    if t.shape() != target.shape() {
                        return Err(Error::Format(format!(
                            "tensor {}: shape {:?}, expected {:?}",
                            e.name,
                            t.shape(),
                            target.shape()
                        )));
                    }
                    *target = t;
                }
                (PartMut::Packed(target), true) => {
                    if e.dtype != EntryDType::Tpk1 {
                        return Err(Error::Format(format!("tensor {}: expected packed ternary data", e.name)));
                    }
                    let m = PackedTernaryMatrix::deserialize(data).map_err(|err| match err {
                        Error::Corruption(msg) => Error::Corruption(format!("tensor {}: {msg}", e.name)),
                        other => Error::Format(format!("tensor {}: {other}", e.name)),
                    })?;
                    if (m.rows(), m.cols(), m.spec()) != (target.rows(), target.cols(), target.spec()) {
                        return Err(Error::Format(format!("tensor {}: geometry differs from config", e.name)));
                    }
                    *target = m;
                }
                _ => unreachable!(),
            }
            Ok(())
        };
        take(false, PartMut::Dense(&mut model.tok_emb))?;
        take(false, PartMut::Dense(&mut model.pos_emb))?;
        for layer in &mut model.layers {
            for n in [&mut layer.attn_norm, &mut layer.mlp_norm] {
                take(false, PartMut::Dense(&mut n.gain))?;
                if let Some(b) = n.bias.as_mut() {
                    take(false, PartMut::Dense(b))?;
                }
            }
            for lin in &mut layer.linears {
                match lin {
                    PackedLinear::Dense(w) => take(false, PartMut::Dense(w))?,
                    PackedLinear::Ternary(m) => take(true, PartMut::Packed(m))?,
                }
            }
        }
        take(false, PartMut::Dense(&mut model.final_norm.gain))?;
        if let Some(b) = model.final_norm.bias.as_mut() {
            take(false, PartMut::Dense(b))?;
        }
        take(false, PartMut::Dense(&mut model.head))?;
        Ok(model)
    }
}

enum Part<'a> {
    Dense(&'a Tensor<f32>),
    Packed(&'a PackedTernaryMatrix),
}

enum PartMut<'a> {
    Dense(&'a mut Tensor<f32>),
    Packed(&'a mut PackedTernaryMatrix),
}

pub fn save_packed(model: &PackedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.encode()?)?;
    Ok(())
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<PackedModel> {
    PackedModel::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{GroupSpec, QuantMode};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 8,
            group_size: GroupSpec::Size(8),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn fp_model_cannot_be_packed() {
        let m = TransformerModel::<f32>::init(small(), 1).unwrap();
        assert!(matches!(convert_to_packed(&m), Err(Error::State(_))));
    }

    #[test]
    fn packed_logits_match_dequantized_forward() {
        for mode in [QuantMode::Twn, QuantMode::Dlt] {
            let mut m = TransformerModel::<f32>::init(small(), 2).unwrap();
            m.quantize(mode, GroupSpec::Size(8)).unwrap();
            let tokens = [1, 5, 7, 2, 12, 0, 3, 3, 4, 9];
            let want = m.logits(&tokens, 2, 5).unwrap();
            let packed = convert_to_packed(&m).unwrap();
            let (got, counts) = packed.forward(&tokens, 2, 5).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-4, "{mode:?}");
            let groups_per_token: u64 = (0..2)
                .flat_map(|l| LinearKind::ALL.map(|k| (l, k)))
                .map(|(l, k)| match packed.linear(l, k) {
                    PackedLinear::Ternary(t) => t.group_count() as u64,
                    PackedLinear::Dense(_) => 0,
                })
                .sum();
            assert_eq!(counts.muls, 2 * groups_per_token * 10);
        }
    }

    #[test]
    fn partial_scope_keeps_dense_linears() {
        let mut c = small();
        c.quantized_linears = vec![LinearKind::Up, LinearKind::Down];
        let mut m = TransformerModel::<f32>::init(c, 3).unwrap();
        m.quantize(QuantMode::Dlt, GroupSpec::Size(8)).unwrap();
        let p = convert_to_packed(&m).unwrap();
        assert!(matches!(p.linear(0, LinearKind::Q), PackedLinear::Dense(_)));
        assert!(matches!(p.linear(1, LinearKind::Down), PackedLinear::Ternary(_)));
    }

    #[test]
    fn container_roundtrip_and_corruption() {
        let mut m = TransformerModel::<f32>::init(small(), 4).unwrap();
        m.quantize(QuantMode::Dlt, GroupSpec::Size(8)).unwrap();
        let p = convert_to_packed(&m).unwrap();
        let bytes = p.encode().unwrap();
        let back = PackedModel::decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.encode().unwrap(), bytes);
        assert!(matches!(crate::model::decode_checkpoint::<f32>(&bytes), Err(Error::Format(_))));

        // Force the last code byte of the final packed blob to hold `11`.
        let (header, _) = checkpoint::read_container(&bytes).unwrap();
        let last = header.tensors.iter().rev().find(|e| e.dtype == EntryDType::Tpk1).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let pos = 12 + hlen + (last.offset + last.nbytes) as usize - 1;
        let mut bad = bytes.clone();
        bad[pos] |= 0b11;
        let err = PackedModel::decode(&bad).unwrap_err();
        assert!(matches!(&err, Error::Corruption(msg) if msg.contains(&last.name)), "{err}");
    }
}
