//! Ternary weight quantizers.
//!
//! Two schemes share one group geometry and one code alphabet {−1, 0, +1}:
//!
//! * **TWN**: threshold `Δ = 0.7·mean|W|`, scale `α* = Σ T·W / Σ|T|`, no shift.
//! * **DLT**: same threshold and codes, but the per-group scale `α` and a
//!   per-group shift `γ` are trainable, dequantizing as `D = α·T + γ`.
//!
//! Thresholds and codes are always recomputed from the latent float weights
//! on every forward pass.

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grouping of each weight row along the input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "usize", into = "usize")]
pub enum GroupSpec {
    /// One group per output row.
    PerChannel,
    /// Contiguous groups of this many input columns.
    Size(usize),
}

impl From<usize> for GroupSpec {
    fn from(v: usize) -> Self {
        if v == 0 {
            GroupSpec::PerChannel
        } else {
            GroupSpec::Size(v)
        }
    }
}

impl From<GroupSpec> for usize {
    fn from(g: GroupSpec) -> usize {
        match g {
            GroupSpec::PerChannel => 0,
            GroupSpec::Size(n) => n,
        }
    }
}

impl GroupSpec {
    /// Group length for a row of `cols` inputs.
    pub fn group_len(self, cols: usize) -> Result<usize> {
        match self {
            GroupSpec::PerChannel => Ok(cols),
            GroupSpec::Size(0) => Err(Error::Config("group size must be positive".into())),
            GroupSpec::Size(n) if !cols.is_multiple_of(n) => Err(dim_err!(
                "input width {cols} is not a multiple of group size {n}"
            )),
            GroupSpec::Size(n) => Ok(n),
        }
    }

    pub fn groups_per_row(self, cols: usize) -> Result<usize> {
        Ok(cols / self.group_len(cols)?)
    }

    pub fn group_count(self, rows: usize, cols: usize) -> Result<usize> {
        Ok(rows * self.groups_per_row(cols)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightGrad {
    /// `α·g` above the threshold, `g` inside it, `−α·g` below it.
    #[default]
    Paper,
    /// `α·g` outside the threshold band, `g` inside it.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaGrad {
    /// `Σ T_i·g_i`, the derivative of `α·T + γ`.
    #[default]
    Analytic,
    /// `Σ_{|W_i|<Δ} g_i`.
    Paper,
}

/// Straight-through estimator settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SteConfig {
    pub weight_grad: WeightGrad,
    pub alpha_grad: AlphaGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Twn,
    Dlt,
}

/// `Δ = 0.7 · mean|w|`.
pub fn compute_threshold<S: Scalar>(group: &[S]) -> Result<S> {
    if group.is_empty() {
        return Err(Error::Contract("threshold of an empty group".into()));
    }
    let abs_sum: S = group.iter().map(|w| w.abs()).sum();
    Ok(S::of(0.7) * abs_sum / S::of(group.len() as f64))
}

/// Maps each weight to −1, 0 or +1; `|w| == Δ` maps to 0.
pub fn ternarize<S: Scalar>(group: &[S], delta: S) -> Vec<i8> {
    group.iter().map(|&w| ternary_code(w, delta)).collect()
}

#[inline]
pub fn ternary_code<S: Scalar>(w: S, delta: S) -> i8 {
    if w > delta {
        1
    } else if w < -delta {
        -1
    } else {
        0
    }
}

#[inline]
fn code_value<S: Scalar>(c: i8) -> S {
    match c {
        1 => S::one(),
        -1 => -S::one(),
        _ => S::zero(),
    }
}

/// Closed-form least-squares scale given the codes; 0 when every code is 0.
pub fn twn_scale<S: Scalar>(group: &[S], codes: &[i8]) -> S {
    let mut num = S::zero();
    let mut den = 0usize;
    for (&w, &c) in group.iter().zip(codes) {
        num += code_value::<S>(c) * w;
        den += c.unsigned_abs() as usize;
    }
    if den == 0 {
        S::zero()
    } else {
        num / S::of(den as f64)
    }
}

/// Least-squares `(α, γ)` for `w ≈ α·T + γ` with the codes held fixed.
pub fn init_dlt_params<S: Scalar>(group: &[S], codes: &[i8]) -> (S, S) {
    let n = S::of(group.len() as f64);
    let w_mean = group.iter().copied().sum::<S>() / n;
    let t_mean = codes.iter().map(|&c| code_value::<S>(c)).sum::<S>() / n;
    let mut cov = S::zero();
    let mut var = S::zero();
    for (&w, &c) in group.iter().zip(codes) {
        let dt = code_value::<S>(c) - t_mean;
        cov += dt * (w - w_mean);
        var += dt * dt;
    }
    let alpha = if var > S::zero() {
        cov / var
    } else {
        twn_scale(group, codes)
    };
    (alpha, w_mean - alpha * t_mean)
}

/// Per-layer quantization state: codes, thresholds and per-group `(α, γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryGroupQuant<S> {
    pub spec: GroupSpec,
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    pub alpha: Vec<S>,
    pub gamma: Vec<S>,
    pub delta: Vec<S>,
    forwarded: bool,
}

/// Gradients produced by [`TernaryGroupQuant::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrads<S> {
    pub weight: Tensor<S>,
    pub alpha: Vec<S>,
    pub gamma: Vec<S>,
}

impl<S: Scalar> TernaryGroupQuant<S> {
    /// Fresh state with zero scales and shifts.
    pub fn new(rows: usize, cols: usize, spec: GroupSpec) -> Result<Self> {
        let g = spec.group_count(rows, cols)?;
        Ok(Self {
            spec,
            rows,
            cols,
            codes: vec![0; rows * cols],
            alpha: vec![S::zero(); g],
            gamma: vec![S::zero(); g],
            delta: vec![S::zero(); g],
            forwarded: false,
        })
    }

    /// Ternarizes `w` and initializes `(α, γ)`: TWN uses `α*` and `γ = 0`,
    /// DLT the least-squares pair.
    pub fn init(w: &Tensor<S>, spec: GroupSpec, mode: QuantMode) -> Result<Self> {
        let (rows, cols) = matrix_dims(w)?;
        let mut q = Self::new(rows, cols, spec)?;
        q.assign_codes(w)?;
        let glen = spec.group_len(cols)?;
        for g in 0..q.group_count() {
            let range = q.group_range(g, glen);
            let (ws, cs) = (&w.data()[range.clone()], &q.codes[range]);
            match mode {
                QuantMode::Twn => q.alpha[g] = twn_scale(ws, cs),
                QuantMode::Dlt => (q.alpha[g], q.gamma[g]) = init_dlt_params(ws, cs),
            }
        }
        Ok(q)
    }

    pub fn group_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn group_len(&self) -> usize {
        self.cols / (self.alpha.len() / self.rows)
    }

    fn group_range(&self, g: usize, glen: usize) -> std::ops::Range<usize> {
        // groups tile each row contiguously, so group g covers a flat range
        g * glen..(g + 1) * glen
    }

    fn check_shape(&self, t: &Tensor<S>, what: &str) -> Result<()> {
        if t.shape() != [self.rows, self.cols] {
            return Err(dim_err!(
                "{what} shape {:?} does not match quantizer {}x{}",
                t.shape(),
                self.rows,
                self.cols
            ));
        }
        Ok(())
    }

    /// Recomputes thresholds and codes from the latent weights.
    pub fn assign_codes(&mut self, w: &Tensor<S>) -> Result<()> {
        self.check_shape(w, "weight")?;
        let glen = self.group_len();
        for g in 0..self.group_count() {
            let range = self.group_range(g, glen);
            let ws = &w.data()[range.clone()];
            let delta = compute_threshold(ws)?;
            self.delta[g] = delta;
            for (c, &wv) in self.codes[range].iter_mut().zip(ws) {
                *c = ternary_code(wv, delta);
            }
        }
        Ok(())
    }

    /// `D = α·T + γ` from the stored codes.
    pub fn dequantize(&self) -> Tensor<S> {
        let glen = self.group_len();
        Tensor::from_fn(&[self.rows, self.cols], |i| {
            let g = i / glen;
            self.alpha[g] * code_value::<S>(self.codes[i]) + self.gamma[g]
        })
    }

    /// Forward pass: refresh `Δ` and `T` from `w`, then emit `D`. In TWN
    /// mode the scale is also refreshed to `α*` and the shift is zero.
    pub fn forward(&mut self, w: &Tensor<S>, mode: QuantMode) -> Result<Tensor<S>> {
        self.assign_codes(w)?;
        if mode == QuantMode::Twn {
            let glen = self.group_len();
            for g in 0..self.group_count() {
                let range = self.group_range(g, glen);
                self.alpha[g] = twn_scale(&w.data()[range.clone()], &self.codes[range]);
                self.gamma[g] = S::zero();
            }
        }
        self.forwarded = true;
        Ok(self.dequantize())
    }

    /// Straight-through backward pass for `∂L/∂D = upstream`.
    pub fn backward(&self, w: &Tensor<S>, upstream: &Tensor<S>, cfg: SteConfig) -> Result<QuantGrads<S>> {
        if !self.forwarded {
            return Err(Error::State("quantizer backward called before forward".into()));
        }
        self.check_shape(w, "weight")?;
        self.check_shape(upstream, "upstream gradient")?;
        let glen = self.group_len();
        let groups = self.group_count();
        let mut gw = Tensor::zeros(&[self.rows, self.cols]);
        let mut ga = vec![S::zero(); groups];
        let mut gg = vec![S::zero(); groups];
        for g in 0..groups {
            let (alpha, delta) = (self.alpha[g], self.delta[g]);
            let range = self.group_range(g, glen);
            let mut nonzero = false;
            for i in range {
                let (wi, up, code) = (w.data()[i], upstream.data()[i], self.codes[i]);
                gg[g] += up;
                nonzero |= code != 0;
                ga[g] += match cfg.alpha_grad {
                    AlphaGrad::Analytic => code_value::<S>(code) * up,
                    AlphaGrad::Paper if wi.abs() < delta => up,
                    AlphaGrad::Paper => S::zero(),
                };
                gw.data_mut()[i] = match (cfg.weight_grad, code) {
                    (_, 0) => up,
                    (WeightGrad::Paper, -1) => -alpha * up,
                    _ => alpha * up,
                };
            }
            if !nonzero {
                ga[g] = S::zero();
            }
        }
        Ok(QuantGrads {
            weight: gw,
            alpha: ga,
            gamma: gg,
        })
    }
}

fn matrix_dims<S: Scalar>(w: &Tensor<S>) -> Result<(usize, usize)> {
    match *w.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(dim_err!("quantizer expects a matrix, got {:?}", w.shape())),
    }
}

struct TernaryOp<S> {
    weight: Var,
    alpha: Option<Var>,
    gamma: Option<Var>,
    state: TernaryGroupQuant<S>,
    ste: SteConfig,
}

impl<S: Scalar> CustomOp<S> for TernaryOp<S> {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.weight];
        v.extend(self.alpha);
        v.extend(self.gamma);
        v
    }

    fn backward(&self, tape: &Tape<S>, upstream: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let g = self.state.backward(tape.value(self.weight), upstream, self.ste)?;
        let n = g.alpha.len();
        let mut out = vec![Some(g.weight)];
        if self.alpha.is_some() {
            out.push(Some(Tensor::new(&[n], g.alpha)?));
        }
        if self.gamma.is_some() {
            out.push(Some(Tensor::new(&[n], g.gamma)?));
        }
        Ok(out)
    }
}

/// Records the dequantized weight of a ternary layer on the tape.
///
/// DLT takes `α` and `γ` as `[groups]` tape values; TWN derives `α*` from the
/// weights and takes neither.
pub fn quantized_weight<S: Scalar>(
    tape: &mut Tape<S>,
    weight: Var,
    params: Option<(Var, Var)>,
    spec: GroupSpec,
    ste: SteConfig,
) -> Result<Var> {
    let w = tape.value(weight);
    let (rows, cols) = matrix_dims(w)?;
    let mut state = TernaryGroupQuant::new(rows, cols, spec)?;
    let mode = match params {
        Some((a, g)) => {
            let groups = state.group_count();
            if tape.value(a).numel() != groups || tape.value(g).numel() != groups {
                return Err(dim_err!("expected {groups} scales and shifts"));
            }
            state.alpha.copy_from_slice(tape.value(a).data());
            state.gamma.copy_from_slice(tape.value(g).data());
            QuantMode::Dlt
        }
        None => QuantMode::Twn,
    };
    let d = state.forward(tape.value(weight), mode)?;
    Ok(tape.custom(
        d,
        Box::new(TernaryOp {
            weight,
            alpha: params.map(|p| p.0),
            gamma: params.map(|p| p.1),
            state,
            ste,
        }),
    ))
}

/// Descriptive statistics of one weight group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub skewness: f64,
    pub delta: f64,
    pub frac_in_band: f64,
    /// Mean of the weights with `|w| ≤ Δ`; `None` when the band is empty.
    pub mean_of_clipped_band: Option<f64>,
}

pub fn stats_of<S: Scalar>(group: &[S]) -> Result<GroupStats> {
    let delta = compute_threshold(group)?.f64();
    let xs: Vec<f64> = group.iter().map(|v| v.f64()).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let band: Vec<f64> = xs.iter().copied().filter(|x| x.abs() <= delta).collect();
    Ok(GroupStats {
        mean,
        std: m2.sqrt(),
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        skewness,
        delta,
        frac_in_band: band.len() as f64 / n,
        mean_of_clipped_band: (!band.is_empty()).then(|| band.iter().sum::<f64>() / band.len() as f64),
    })
}

/// Per-group statistics of `w` in row-major group order.
pub fn group_stats<S: Scalar>(w: &Tensor<S>, spec: GroupSpec) -> Result<Vec<GroupStats>> {
    let (_, cols) = matrix_dims(w)?;
    let glen = spec.group_len(cols)?;
    w.data().chunks(glen).map(stats_of).collect()
}
