//! Distillation losses and the RMSNorm cosine bound check.
//!
//! Feature losses compare teacher and student hidden-state traces. Traces
//! are the `L+1` hidden states of a forward pass; index 0 is the embedding
//! output and index `l` the output of decoder layer `l`, so the first `L′`
//! distilled layers are trace entries `1..=L′`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Norm below which a token's cosine is defined as 0.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMetric {
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "mse-clamp")]
    MseClamp,
    #[serde(rename = "mse-skip")]
    MseSkip,
    #[serde(rename = "none")]
    None,
}

impl std::str::FromStr for FeatureMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown feature metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Logits-KD coefficient.
    pub epsilon: f64,
    /// Feature-KD coefficient.
    pub delta: f64,
    /// Number of leading decoder layers distilled.
    pub n_feat_layers: usize,
    pub feature_metric: FeatureMetric,
    /// Clamp bound in robust standard deviations of the teacher layer.
    pub clamp_k: f64,
    /// A step is skipped when its feature loss exceeds this multiple of the
    /// running mean.
    pub skip_m: f64,
    pub logits_temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            delta: 10.0,
            n_feat_layers: 1,
            feature_metric: FeatureMetric::Off,
            clamp_k: 5.0,
            skip_m: 5.0,
            logits_temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.delta >= 0.0) {
            return Err(Error::Config("loss coefficients must be nonnegative".into()));
        }
        if self.feature_metric != FeatureMetric::None && !(1..=n_layers).contains(&self.n_feat_layers) {
            return Err(Error::Config(format!(
                "feature layers {} outside 1..={n_layers}",
                self.n_feat_layers
            )));
        }
        if !(self.logits_temperature > 0.0 && self.clamp_k > 0.0 && self.skip_m > 0.0) {
            return Err(Error::Config("temperature, clamp_k and skip_m must be positive".into()));
        }
        Ok(())
    }

    /// Plain label-loss training (no distillation terms).
    pub fn label_only() -> Self {
        Self {
            epsilon: 0.0,
            delta: 0.0,
            feature_metric: FeatureMetric::None,
            ..Self::default()
        }
    }
}

/// Per-step record of the objective `label + ε·logits + δ·feature`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub label: f64,
    pub logits_kd: f64,
    pub feat_kd: f64,
    pub total: f64,
    pub skipped: bool,
}

/// Combines the three loss terms; a skipped or disabled feature term
/// contributes nothing.
pub fn total_loss(label: f64, logits_kd: f64, feat_kd: f64, skipped: bool, cfg: &DistillConfig) -> Result<LossBreakdown> {
    for (name, v) in [("label", label), ("logits", logits_kd), ("feature", feat_kd)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("{name} loss is {v}")));
        }
    }
    let feat_kd = if skipped || cfg.feature_metric == FeatureMetric::None {
        0.0
    } else {
        feat_kd
    };
    Ok(LossBreakdown {
        label,
        logits_kd,
        feat_kd,
        total: label + cfg.epsilon * logits_kd + cfg.delta * feat_kd,
        skipped,
    })
}

/// Per-token cosine similarities; tokens with a near-zero norm get 0 and
/// are counted in the second return value.
pub fn token_cosine<S: Scalar>(teacher: &Tensor<S>, student: &Tensor<S>) -> Result<(Vec<S>, usize)> {
    teacher.same_shape(student, "token_cosine")?;
    let mut degenerate = 0;
    let cos = (0..teacher.rows())
        .map(|i| {
            let (t, s) = (teacher.row(i), student.row(i));
            let tn = t.iter().map(|&v| v * v).sum::<S>().sqrt();
            let sn = s.iter().map(|&v| v * v).sum::<S>().sqrt();
            if tn.f64() < ZERO_NORM || sn.f64() < ZERO_NORM {
                degenerate += 1;
                return S::zero();
            }
            t.iter().zip(s).map(|(&a, &b)| a * b).sum::<S>() / (tn * sn)
        })
        .collect();
    Ok((cos, degenerate))
}

fn check_depth<A, B>(teacher: &[A], student: &[B], l_prime: usize) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(dim_err!("trace depths {} and {} differ", teacher.len(), student.len()));
    }
    if l_prime == 0 || l_prime + 1 > teacher.len() {
        return Err(Error::Config(format!(
            "{l_prime} feature layers requested from a trace of {} hidden states",
            teacher.len()
        )));
    }
    Ok(())
}

/// Mean over the first `L′` layers of the mean over tokens of `1 − cos`.
pub fn off_feature_loss<S: Scalar>(teacher: &[Tensor<S>], student: &[Tensor<S>], l_prime: usize) -> Result<S> {
    check_depth(teacher, student, l_prime)?;
    let mut total = S::zero();
    for l in 1..=l_prime {
        let (cos, _) = token_cosine(&teacher[l], &student[l])?;
        let n = S::of(cos.len() as f64);
        total += cos.iter().map(|&c| S::one() - c).sum::<S>() / n;
    }
    Ok(total / S::of(l_prime as f64))
}

/// Running mean of accepted feature losses, used by the skip variant.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SkipState {
    sum: f64,
    count: usize,
}

impl SkipState {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    /// Decides whether `loss` is an outlier step; accepted losses update
    /// the running mean.
    pub fn should_skip(&mut self, loss: f64, skip_m: f64) -> bool {
        if self.mean().is_some_and(|m| loss > skip_m * m) {
            return true;
        }
        self.sum += loss;
        self.count += 1;
        false
    }
}

/// `1.4826 · median|x − median(x)|`, falling back to the plain standard
/// deviation when more than half of the values coincide.
pub fn robust_std<S: Scalar>(values: &[S]) -> f64 {
    let mut xs: Vec<f64> = values.iter().map(|v| v.f64()).collect();
    let med = median(&mut xs);
    let mut dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&mut dev);
    if mad > 0.0 {
        return 1.4826 * mad;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn clamp_bound<S: Scalar>(teacher_layer: &Tensor<S>, clamp_k: f64) -> S {
    S::of(clamp_k * robust_std(teacher_layer.data()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MseVariant {
    Plain,
    Clamp,
    Skip,
}

/// MSE feature loss over the first `L′` layers. Returns the loss and
/// whether the skip rule fired (in which case the loss is 0).
pub fn mse_feature_loss<S: Scalar>(
    teacher: &[Tensor<S>],
    student: &[Tensor<S>],
    l_prime: usize,
    variant: MseVariant,
    cfg: &DistillConfig,
    skip: &mut SkipState,
) -> Result<(S, bool)> {
    check_depth(teacher, student, l_prime)?;
    let mut total = S::zero();
    for l in 1..=l_prime {
        let (t, s) = (&teacher[l], &student[l]);
        t.same_shape(s, "mse_feature_loss")?;
        let (tc, sc) = match variant {
            MseVariant::Clamp => {
                let b = clamp_bound(t, cfg.clamp_k);
                (t.map(|v| v.max(-b).min(b)), s.map(|v| v.max(-b).min(b)))
            }
            _ => (t.clone(), s.clone()),
        };
        let n = S::of(t.numel() as f64);
        total += tc.data().iter().zip(sc.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n;
    }
    let loss = total / S::of(l_prime as f64);
    if variant == MseVariant::Skip && skip.should_skip(loss.f64(), cfg.skip_m) {
        return Ok((S::zero(), true));
    }
    Ok((loss, false))
}

/// Soft cross-entropy of student logits against teacher soft targets.
pub fn logits_kd_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>, temperature: S) -> Result<S> {
    student.same_shape(teacher, "logits_kd_loss")?;
    let target = tensor::softmax_rows(&teacher.map(|v| v / temperature));
    Ok(tensor::soft_cross_entropy(student, &target, temperature)?.0)
}

struct CosineLossOp<S> {
    student: Var,
    teacher: Tensor<S>,
}

impl<S: Scalar> CustomOp<S> for CosineLossOp<S> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.student]
    }

    fn backward(&self, tape: &Tape<S>, upstream: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let s = tape.value(self.student);
        let t = &self.teacher;
        let scale = upstream.item() / S::of(s.rows() as f64);
        let mut g = Tensor::zeros(s.shape());
        for i in 0..s.rows() {
            let (tr, sr) = (t.row(i), s.row(i));
            let tn = tr.iter().map(|&v| v * v).sum::<S>().sqrt();
            let sn = sr.iter().map(|&v| v * v).sum::<S>().sqrt();
            if tn.f64() < ZERO_NORM || sn.f64() < ZERO_NORM {
                continue;
            }
            let cos = tr.iter().zip(sr).map(|(&a, &b)| a * b).sum::<S>() / (tn * sn);
            let inv = (tn * sn).recip();
            let ss = cos / (sn * sn);
            // d(1 - cos)/ds = -(t / (|t||s|) - cos · s / |s|²)
            for ((gv, &tv), &sv) in g.row_mut(i).iter_mut().zip(tr).zip(sr) {
                *gv = -scale * (tv * inv - ss * sv);
            }
        }
        Ok(vec![Some(g)])
    }
}

fn mean_of_layers<S: Scalar>(tape: &mut Tape<S>, per_layer: Vec<Var>) -> Result<Var> {
    let n = per_layer.len();
    let mut acc = per_layer[0];
    for &v in &per_layer[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, S::of(1.0 / n as f64)))
}

/// Feature-distillation term on the tape. Returns `None` when the metric
/// is disabled or the skip rule fired; the flag reports a skip.
pub fn feature_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &[Tensor<S>],
    student: &[Var],
    cfg: &DistillConfig,
    skip: &mut SkipState,
) -> Result<(Option<Var>, bool)> {
    if cfg.feature_metric == FeatureMetric::None {
        return Ok((None, false));
    }
    let l_prime = cfg.n_feat_layers;
    check_depth(teacher, student, l_prime)?;
    let mut per_layer = Vec::with_capacity(l_prime);
    for l in 1..=l_prime {
        let t = &teacher[l];
        let s = student[l];
        tape.value(s).same_shape(t, "feature loss")?;
        let v = match cfg.feature_metric {
            FeatureMetric::Off => {
                let (cos, _) = token_cosine(t, tape.value(s))?;
                let n = S::of(cos.len() as f64);
                let loss = cos.iter().map(|&c| S::one() - c).sum::<S>() / n;
                tape.custom(
                    Tensor::scalar(loss),
                    Box::new(CosineLossOp {
                        student: s,
                        teacher: t.clone(),
                    }),
                )
            }
            FeatureMetric::MseClamp => {
                let b = clamp_bound(t, cfg.clamp_k);
                let sc = tape.clamp(s, -b, b);
                tape.mse(sc, t.map(|v| v.max(-b).min(b)))?
            }
            FeatureMetric::Mse | FeatureMetric::MseSkip => tape.mse(s, t.clone())?,
            FeatureMetric::None => unreachable!(),
        };
        per_layer.push(v);
    }
    let loss = mean_of_layers(tape, per_layer)?;
    if cfg.feature_metric == FeatureMetric::MseSkip
        && skip.should_skip(tape.value(loss).item().f64(), cfg.skip_m)
    {
        return Ok((None, true));
    }
    Ok((Some(loss), false))
}

/// Logits-distillation term on the tape; the teacher side is constant.
pub fn logits_kd_on_tape<S: Scalar>(tape: &mut Tape<S>, student: Var, teacher: &Tensor<S>, temperature: f64) -> Result<Var> {
    let temp = S::of(temperature);
    let target = tensor::softmax_rows(&teacher.map(|v| v / temp));
    tape.soft_cross_entropy(student, target, temp)
}

/// Result of [`check_theorem1_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Worst `‖y − y_q‖² − ‖a‖²(2 − 2cos)`; nonpositive when the bound holds exactly.
    pub max_violation: f64,
    pub mean_cos: f64,
    pub samples: usize,
    pub holds: bool,
}

/// Allowed slack of the bound check.
pub const BOUND_SLACK: f64 = 1e-6;

/// Checks, for every column `x` of `x_samples`, that with
/// `z = Wx/‖Wx‖`, `z_q = W_q x/‖W_q x‖`, `y = a⊙z + b` and `y_q = a⊙z_q + b`
/// the inequality `‖y − y_q‖² ≤ ‖a‖²·(2 − 2·cos(z, z_q))` holds.
pub fn check_theorem1_bound<S: Scalar>(
    w: &Tensor<S>,
    w_q: &Tensor<S>,
    a: &[S],
    b: &[S],
    x_samples: &Tensor<S>,
) -> Result<BoundReport> {
    w.same_shape(w_q, "bound check")?;
    let rows = w.rows();
    if a.len() != rows || b.len() != rows {
        return Err(dim_err!("norm parameters must have {rows} entries"));
    }
    if x_samples.rows() != w.cols() {
        return Err(dim_err!("samples must have {} rows", w.cols()));
    }
    let wx = tensor::matmul(&w.cast::<f64>(), &x_samples.cast::<f64>())?;
    let wqx = tensor::matmul(&w_q.cast::<f64>(), &x_samples.cast::<f64>())?;
    let a: Vec<f64> = a.iter().map(|v| v.f64()).collect();
    let a_sq: f64 = a.iter().map(|v| v * v).sum();
    let n = x_samples.cols();
    let mut max_violation = f64::NEG_INFINITY;
    let mut cos_sum = 0.0;
    for j in 0..n {
        let col = |m: &Tensor<f64>| (0..rows).map(|i| m.data()[i * n + j]).collect::<Vec<_>>();
        let (u, v) = (col(&wx), col(&wqx));
        let (un, vn) = (norm(&u), norm(&v));
        if un < ZERO_NORM || vn < ZERO_NORM {
            return Err(Error::Sampling(format!("sample {j} maps to a zero vector")));
        }
        let z: Vec<f64> = u.iter().map(|x| x / un).collect();
        let zq: Vec<f64> = v.iter().map(|x| x / vn).collect();
        let cos = z.iter().zip(&zq).map(|(p, q)| p * q).sum::<f64>();
        // b cancels in y - y_q
        let lhs: f64 = (0..rows).map(|i| (a[i] * (z[i] - zq[i])).powi(2)).sum();
        let rhs = a_sq * (2.0 - 2.0 * cos);
        max_violation = max_violation.max(lhs - rhs);
        cos_sum += cos;
    }
    Ok(BoundReport {
        max_violation,
        mean_cos: cos_sum / n as f64,
        samples: n,
        holds: max_violation <= BOUND_SLACK,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs [`check_theorem1_bound`] on `n` standard Gaussian inputs, redrawing
/// any input that maps to a (near) zero vector up to `retries` times.
pub fn check_theorem1_sampled<S: Scalar, R: Rng>(
    w: &Tensor<S>,
    w_q: &Tensor<S>,
    a: &[S],
    b: &[S],
    n: usize,
    retries: usize,
    rng: &mut R,
) -> Result<BoundReport> {
    let cols = w.cols();
    let mut samples = Vec::with_capacity(cols * n);
    let wf = w.cast::<f64>();
    let wqf = w_q.cast::<f64>();
    for _ in 0..n {
        let mut attempt = 0;
        let x = loop {
            let x: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
            let xt = Tensor::new(&[cols, 1], x.clone())?;
            let ok = [&wf, &wqf]
                .iter()
                .all(|m| tensor::matmul(m, &xt).map(|y| y.sum_sq().sqrt() >= ZERO_NORM).unwrap_or(false));
            if ok {
                break x;
            }
            attempt += 1;
            if attempt > retries {
                return Err(Error::Sampling(format!("no nondegenerate sample after {retries} retries")));
            }
        };
        samples.push(x);
    }
    let x = Tensor::<S>::from_fn(&[cols, n], |i| S::of(samples[i % n][i / n]));
    check_theorem1_bound(w, w_q, a, b, &x)
}
