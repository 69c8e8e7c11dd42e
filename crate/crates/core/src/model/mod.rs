//! Toy decoder-only transformer used as both teacher (full precision) and
//! student (ternary).
//!
//! Pre-norm residual blocks with RMSNorm, causal multi-head attention,
//! a GELU MLP and learned absolute positions. Linear weights are stored as
//! `[out × in]`. When the model is quantized, each of the six per-layer
//! linears (q, k, v, o, up, down) is replaced on the forward pass by its
//! dequantized ternary weight; embeddings, norms and the head stay full
//! precision.

mod checkpoint;
mod packed_model;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use packed_model::{convert_to_packed, load_packed, save_packed, PackedLinear, PackedModel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore, Parameter};
use crate::quantizer::{self, GroupSpec, QuantMode, SteConfig, TernaryGroupQuant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning-rate multiplier given to DLT scales and shifts.
pub const DLT_LR_MULTIPLIER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Fp,
    Twn,
    Dlt,
}

impl From<QuantMode> for WeightMode {
    fn from(m: QuantMode) -> Self {
        match m {
            QuantMode::Twn => WeightMode::Twn,
            QuantMode::Dlt => WeightMode::Dlt,
        }
    }
}

/// The six linear layers of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Up,
        LinearKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Q => "attn.q",
            LinearKind::K => "attn.k",
            LinearKind::V => "attn.v",
            LinearKind::O => "attn.o",
            LinearKind::Up => "mlp.up",
            LinearKind::Down => "mlp.down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rmsnorm_eps: f64,
    pub norm_bias: bool,
    pub weight_mode: WeightMode,
    pub quantized_linears: Vec<LinearKind>,
    pub group_size: GroupSpec,
    pub ste: SteConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 64,
            rmsnorm_eps: 1e-5,
            norm_bias: false,
            weight_mode: WeightMode::Fp,
            quantized_linears: LinearKind::ALL.to_vec(),
            group_size: GroupSpec::Size(64),
            ste: SteConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rmsnorm_eps > 0.0) {
            return Err(Error::Config("rmsnorm_eps must be positive".into()));
        }
        for kind in &self.quantized_linears {
            let (_, cols) = self.linear_shape(*kind);
            self.group_size
                .group_len(cols)
                .map_err(|e| Error::Config(format!("{}: {e}", kind.name())))?;
        }
        Ok(())
    }

    /// `(out, in)` of a linear layer.
    pub fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        match kind {
            LinearKind::Up => (self.d_ff, self.d_model),
            LinearKind::Down => (self.d_model, self.d_ff),
            _ => (self.d_model, self.d_model),
        }
    }

    pub fn is_quantized(&self, kind: LinearKind) -> bool {
        self.weight_mode != WeightMode::Fp && self.quantized_linears.contains(&kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub alpha: Option<ParamId>,
    pub gamma: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerIds {
    pub attn_norm: NormIds,
    pub mlp_norm: NormIds,
    pub linears: [LinearIds; 6],
}

/// Hidden states and logits of one traced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<S> {
    /// `L + 1` tensors of shape `[tokens × d_model]`: the embedding output
    /// followed by each decoder layer's output.
    pub hidden: Vec<Tensor<S>>,
    pub logits: Tensor<S>,
}

/// Tape handles produced by [`TransformerModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardVars {
    pub logits: Var,
    pub hidden: Vec<Var>,
}

impl ForwardVars {
    pub fn trace<S: Scalar>(&self, tape: &Tape<S>) -> ForwardTrace<S> {
        ForwardTrace {
            hidden: self.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
            logits: tape.value(self.logits).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_norm: NormIds,
    pub head: ParamId,
}

fn layer_prefix(layer: usize) -> String {
    format!("layers.{layer}")
}

impl<S: Scalar> TransformerModel<S> {
    /// Builds the parameter layout with `init` supplying each tensor by
    /// name and shape.
    fn build(config: ModelConfig, mut init: impl FnMut(&str, &[usize]) -> Result<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut add = |params: &mut ParamStore<S>, name: String, shape: &[usize]| -> Result<ParamId> {
            let value = init(&name, shape)?;
            params.insert(Parameter::new(name, value))
        };
        let d = config.d_model;
        let norm = |params: &mut ParamStore<S>, add: &mut dyn FnMut(&mut ParamStore<S>, String, &[usize]) -> Result<ParamId>, prefix: String| -> Result<NormIds> {
            let gain = add(params, format!("{prefix}.weight"), &[d])?;
            let bias = if config.norm_bias {
                Some(add(params, format!("{prefix}.bias"), &[d])?)
            } else {
                None
            };
            Ok(NormIds { gain, bias })
        };

        let tok_emb = add(&mut params, "tok_emb".into(), &[config.vocab_size, d])?;
        let pos_emb = add(&mut params, "pos_emb".into(), &[config.max_seq_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = layer_prefix(l);
            let attn_norm = norm(&mut params, &mut add, format!("{p}.attn_norm"))?;
            let mlp_norm = norm(&mut params, &mut add, format!("{p}.mlp_norm"))?;
            let mut linears = Vec::with_capacity(6);
            for kind in LinearKind::ALL {
                let (rows, cols) = config.linear_shape(kind);
                let base = format!("{p}.{}", kind.name());
                let weight = add(&mut params, format!("{base}.weight"), &[rows, cols])?;
                let (alpha, gamma) = if config.weight_mode == WeightMode::Dlt && config.quantized_linears.contains(&kind) {
                    let g = config.group_size.group_count(rows, cols)?;
                    let a = add(&mut params, format!("{base}.alpha"), &[g])?;
                    let b = add(&mut params, format!("{base}.gamma"), &[g])?;
                    params.get_mut(a).lr_multiplier = DLT_LR_MULTIPLIER;
                    params.get_mut(b).lr_multiplier = DLT_LR_MULTIPLIER;
                    (Some(a), Some(b))
                } else {
                    (None, None)
                };
                linears.push(LinearIds { weight, alpha, gamma });
            }
            layers.push(LayerIds {
                attn_norm,
                mlp_norm,
                linears: linears.try_into().expect("six linears"),
            });
        }
        let final_norm = norm(&mut params, &mut add, "final_norm".into())?;
        let head = add(&mut params, "head.weight".into(), &[config.vocab_size, d])?;
        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        })
    }

    /// Randomly initialized full-precision model: N(0, 0.02) weights, with
    /// residual output projections scaled by `1/√(2L)`; unit norm gains.
    pub fn init(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.weight_mode = WeightMode::Fp;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        Self::build(config, |name, shape| {
            Ok(if name.ends_with("norm.weight") {
                Tensor::full(shape, S::one())
            } else if name.ends_with("norm.bias") {
                Tensor::zeros(shape)
            } else {
                let scale = if name.ends_with("attn.o.weight") || name.ends_with("mlp.down.weight") {
                    resid_scale
                } else {
                    1.0
                };
                Tensor::from_fn(shape, |_| S::of(base.sample(&mut rng) * scale))
            })
        })
    }

    /// Zero-filled model with the layout implied by `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, |_, shape| Ok(Tensor::zeros(shape)))
    }

    pub fn linear(&self, layer: usize, kind: LinearKind) -> LinearIds {
        self.layers[layer].linears[kind as usize]
    }

    pub fn is_quantized(&self) -> bool {
        self.config.weight_mode != WeightMode::Fp
    }

    /// Initializes ternary quantization on every in-scope linear. TWN keeps
    /// no extra parameters (`α*` is refreshed each forward and `γ = 0`);
    /// DLT adds trainable per-group `α`, `γ` initialized by least squares.
    pub fn quantize(&mut self, mode: QuantMode, spec: GroupSpec) -> Result<()> {
        if self.is_quantized() {
            return Err(Error::State("model is already quantized".into()));
        }
        let mut config = self.config.clone();
        config.weight_mode = mode.into();
        config.group_size = spec;
        let mut states = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for kind in LinearKind::ALL {
                if config.quantized_linears.contains(&kind) {
                    let w = &self.params.get(layer.linears[kind as usize].weight).value;
                    let q = TernaryGroupQuant::init(w, spec, mode)?;
                    states.push((format!("{}.{}", layer_prefix(l), kind.name()), q));
                }
            }
        }
        let source = &self.params;
        let rebuilt = Self::build(config, |name, shape| {
            if let Some(p) = source.by_name(name) {
                return Ok(p.value.clone());
            }
            let (base, field) = name.rsplit_once('.').expect("dotted name");
            let q = &states.iter().find(|(n, _)| n == base).expect("quantized linear").1;
            let v = if field == "alpha" { &q.alpha } else { &q.gamma };
            Tensor::new(shape, v.clone())
        })?;
        *self = rebuilt;
        Ok(())
    }

    /// Sets the learning-rate multiplier of every DLT scale and shift.
    pub fn set_quant_lr_multiplier(&mut self, m: f64) {
        for layer in &self.layers {
            for lin in &layer.linears {
                for id in lin.alpha.iter().chain(&lin.gamma) {
                    self.params.get_mut(*id).lr_multiplier = m;
                }
            }
        }
    }

    /// Quantizer state of a linear computed from the current parameters.
    pub fn quant_state(&self, layer: usize, kind: LinearKind) -> Result<Option<TernaryGroupQuant<S>>> {
        if !self.config.is_quantized(kind) {
            return Ok(None);
        }
        let ids = self.linear(layer, kind);
        let w = &self.params.get(ids.weight).value;
        let mode = match self.config.weight_mode {
            WeightMode::Dlt => QuantMode::Dlt,
            _ => QuantMode::Twn,
        };
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut q = TernaryGroupQuant::new(rows, cols, self.config.group_size)?;
        if let (Some(a), Some(g)) = (ids.alpha, ids.gamma) {
            q.alpha.copy_from_slice(self.params.get(a).value.data());
            q.gamma.copy_from_slice(self.params.get(g).value.data());
        }
        q.forward(w, mode)?;
        Ok(Some(q))
    }

    /// The weight a linear actually applies: dequantized when quantized.
    pub fn effective_weight(&self, layer: usize, kind: LinearKind) -> Result<Tensor<S>> {
        Ok(match self.quant_state(layer, kind)? {
            Some(q) => q.dequantize(),
            None => self.params.get(self.linear(layer, kind).weight).value.clone(),
        })
    }

    /// Names of the parameters that are ternarized on the forward pass.
    pub fn quantized_weight_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            for kind in LinearKind::ALL {
                if self.config.is_quantized(kind) {
                    names.push(self.params.get(layer.linears[kind as usize].weight).name.clone());
                }
            }
        }
        names
    }

    /// SHA-256 over every parameter value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter() {
            h.update(p.name.as_bytes());
            buf.clear();
            p.value.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if seq == 0 || batch == 0 || tokens.len() != batch * seq {
            return Err(Error::Input(format!(
                "{} tokens do not form {batch} sequences of {seq}",
                tokens.len()
            )));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds maximum {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn norm(&self, tape: &mut Tape<S>, x: Var, ids: NormIds) -> Result<Var> {
        let gain = tape.param(&self.params, ids.gain);
        let bias = ids.bias.map(|b| tape.param(&self.params, b));
        tape.rmsnorm(x, gain, bias, S::of(self.config.rmsnorm_eps))
    }

    fn linear_weight(&self, tape: &mut Tape<S>, layer: usize, kind: LinearKind) -> Result<Var> {
        let ids = self.linear(layer, kind);
        let w = tape.param(&self.params, ids.weight);
        if !self.config.is_quantized(kind) {
            return Ok(w);
        }
        let dlt = match (ids.alpha, ids.gamma) {
            (Some(a), Some(g)) => Some((tape.param(&self.params, a), tape.param(&self.params, g))),
            _ => None,
        };
        quantizer::quantized_weight(tape, w, dlt, self.config.group_size, self.config.ste)
    }

    fn attention(&self, tape: &mut Tape<S>, q: Var, k: Var, v: Var, batch: usize, seq: usize) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let r = b * seq..(b + 1) * seq;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qh = tape.slice(q, r.clone(), c.clone())?;
                let kh = tape.slice(k, r.clone(), c.clone())?;
                let vh = tape.slice(v, r.clone(), c)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let masked = tape.causal_mask(scores)?;
                let probs = tape.softmax_rows(masked);
                outs.push(tape.matmul(probs, vh)?);
            }
            rows.push(tape.concat_cols(&outs)?);
        }
        tape.concat_rows(&rows)
    }

    /// Records a forward pass over `batch` sequences of `seq` tokens
    /// (flattened row-major). Logits are `[batch·seq × vocab]`.
    pub fn forward(&self, tape: &mut Tape<S>, tokens: &[usize], batch: usize, seq: usize) -> Result<ForwardVars> {
        self.check_tokens(tokens, batch, seq)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok_table = tape.param(&self.params, self.tok_emb);
        let pos_table = tape.param(&self.params, self.pos_emb);
        let tok = tape.embedding(tok_table, tokens)?;
        let pos = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut hidden = vec![x];
        for (l, layer) in self.layers.iter().enumerate() {
            let h = self.norm(tape, x, layer.attn_norm)?;
            let mut proj = [h; 3];
            for (slot, kind) in proj.iter_mut().zip([LinearKind::Q, LinearKind::K, LinearKind::V]) {
                let w = self.linear_weight(tape, l, kind)?;
                *slot = tape.matmul_nt(h, w)?;
            }
            let att = self.attention(tape, proj[0], proj[1], proj[2], batch, seq)?;
            let wo = self.linear_weight(tape, l, LinearKind::O)?;
            let att = tape.matmul_nt(att, wo)?;
            x = tape.add(x, att)?;

            let h = self.norm(tape, x, layer.mlp_norm)?;
            let wu = self.linear_weight(tape, l, LinearKind::Up)?;
            let up = tape.matmul_nt(h, wu)?;
            let up = tape.gelu(up);
            let wd = self.linear_weight(tape, l, LinearKind::Down)?;
            let down = tape.matmul_nt(up, wd)?;
            x = tape.add(x, down)?;
            hidden.push(x);
        }
        let xn = self.norm(tape, x, self.final_norm)?;
        let head = tape.param(&self.params, self.head);
        let logits = tape.matmul_nt(xn, head)?;
        Ok(ForwardVars { logits, hidden })
    }

    /// Untracked forward pass returning the full trace.
    pub fn trace(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<ForwardTrace<S>> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, tokens, batch, seq)?;
        Ok(vars.trace(&tape))
    }

    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<S>> {
        Ok(self.trace(tokens, batch, seq)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
            group_size: GroupSpec::Size(4),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.group_size = GroupSpec::Size(3);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_logit_shape() {
        let m = TransformerModel::<f64>::init(tiny(), 1).unwrap();
        let t = m.trace(&[3], 1, 1).unwrap();
        assert_eq!(t.logits.shape(), &[1, 11]);
        assert_eq!(t.hidden.len(), 3);
        assert!(t.hidden.iter().all(|h| h.shape() == [1, 8]));
    }

    #[test]
    fn zero_model_gives_uniform_logits() {
        let m = TransformerModel::<f64>::zeros(tiny()).unwrap();
        let logits = m.logits(&[1, 2, 3], 1, 3).unwrap();
        let (ce, _) = crate::tensor::softmax_cross_entropy(&logits, &[2, 3, 4]).unwrap();
        assert!((ce - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_outputs_ignore_future_tokens() {
        let m = TransformerModel::<f64>::init(tiny(), 2).unwrap();
        let a = m.logits(&[1, 2, 3, 4, 5], 1, 5).unwrap();
        let b = m.logits(&[1, 2, 3, 9, 0], 1, 5).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn input_errors() {
        let m = TransformerModel::<f64>::init(tiny(), 2).unwrap();
        assert!(matches!(m.logits(&[0; 7], 1, 7), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[11], 1, 1), Err(Error::Input(_))));
    }

    #[test]
    fn quantize_scope_and_state() {
        let fp = TransformerModel::<f64>::init(tiny(), 3).unwrap();
        let mut q = fp.clone();
        q.quantize(QuantMode::Dlt, GroupSpec::Size(4)).unwrap();
        assert!(matches!(q.quantize(QuantMode::Twn, GroupSpec::Size(4)), Err(Error::State(_))));
        for name in ["tok_emb", "pos_emb", "head.weight", "final_norm.weight", "layers.0.attn_norm.weight"] {
            assert_eq!(fp.params.by_name(name).unwrap().value, q.params.by_name(name).unwrap().value);
        }
        let names = q.quantized_weight_names();
        assert_eq!(names.len(), 12);
        assert!(names.iter().all(|n| n.starts_with("layers.")));
        let alpha = q.params.by_name("layers.1.mlp.down.alpha").unwrap();
        assert_eq!(alpha.value.numel(), 8 * 16 / 4);
        assert_eq!(alpha.lr_multiplier, DLT_LR_MULTIPLIER);
    }
}
