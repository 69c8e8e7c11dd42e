//! Training loop: warmup + cosine schedule, AdamW, global-norm clipping,
//! distillation losses, perplexity evaluation and metric logs.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{sample_batch, Corpus};
use crate::distill::{self, DistillConfig, FeatureMetric, LossBreakdown, SkipState};
use crate::error::{Error, Result};
use crate::model::{TransformerModel, WeightMode};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub dlt_lr_multiplier: f64,
    /// Steps between validation evaluations; `0` evaluates only at the end.
    pub eval_interval: usize,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            seq_len: 32,
            total_steps: 10_000,
            warmup_steps: 500,
            final_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            seed: 0,
            dlt_lr_multiplier: 0.1,
            eval_interval: 100,
            distill: DistillConfig::default(),
        }
    }
}

/// Step budget of the short ablation runs.
pub const ABLATION_STEPS: usize = 2000;

impl TrainConfig {
    /// Defaults with the shortened ablation budget.
    pub fn ablation() -> Self {
        Self {
            total_steps: ABLATION_STEPS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0 && self.grad_clip_norm >= 0.0 && self.dlt_lr_multiplier > 0.0) {
            return Err(Error::Config("optimizer constants out of range".into()));
        }
        Ok(())
    }

    /// Learning rate at `step ∈ [0, total_steps]`: linear warmup from 0,
    /// then cosine decay to `final_lr_fraction · lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let f = self.final_lr_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Per-model hyperparameters from the reference training table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePreset {
    Opt125m,
    Opt1_3b,
    Opt2_7b,
    Opt6_7b,
    Llama7b,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PresetValues {
    pub lr: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub n_feat_layers: usize,
}

impl ScalePreset {
    pub const ALL: [ScalePreset; 5] = [
        ScalePreset::Opt125m,
        ScalePreset::Opt1_3b,
        ScalePreset::Opt2_7b,
        ScalePreset::Opt6_7b,
        ScalePreset::Llama7b,
    ];

    pub fn values(self) -> PresetValues {
        let (lr, delta, n_feat_layers) = match self {
            ScalePreset::Opt125m => (1e-4, 10.0, 6),
            ScalePreset::Opt1_3b => (5e-5, 10.0, 18),
            ScalePreset::Opt2_7b => (1e-4, 10.0, 18),
            ScalePreset::Opt6_7b => (5e-5, 10.0, 18),
            ScalePreset::Llama7b => (1e-4, 5.0, 18),
        };
        PresetValues {
            lr,
            epsilon: 0.001,
            delta,
            n_feat_layers,
        }
    }

    /// Training config with this preset's values applied to the defaults.
    pub fn train_config(self) -> TrainConfig {
        let v = self.values();
        let mut c = TrainConfig {
            lr: v.lr,
            ..TrainConfig::default()
        };
        c.distill.epsilon = v.epsilon;
        c.distill.delta = v.delta;
        c.distill.n_feat_layers = v.n_feat_layers;
        c
    }
}

/// AdamW with per-parameter learning-rate multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, param: usize) -> Option<&[S]> {
        self.m.get(param).map(Vec::as_slice)
    }

    /// Applies one update to every trainable parameter with effective
    /// rate `lr · lr_multiplier`. Non-finite gradients abort the step
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && !p.grad.all_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient in {}", p.name)));
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![S::zero(); p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let eps = S::of(self.eps);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let rate = lr * p.lr_multiplier;
            let step_size = S::of(rate / bc1);
            let decay = S::of(1.0 - rate * self.weight_decay);
            let inv_bc2 = S::of(1.0 / bc2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w = *w * decay - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global norm is at most `max_norm` (`0`
/// disables). Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = S::of(max_norm / norm);
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// `exp` of the mean next-token NLL over windows of `seq_len` starting
/// every `stride` tokens. Overlapping windows only score positions not
/// scored by an earlier window. Windows are run `batch` at a time.
pub fn evaluate_perplexity<S: Scalar>(
    model: &TransformerModel<S>,
    stream: &[usize],
    seq_len: usize,
    stride: usize,
    batch: usize,
) -> Result<f64> {
    if seq_len == 0 || stride == 0 || stride > seq_len || batch == 0 {
        return Err(Error::Config(format!("bad evaluation windowing: seq_len {seq_len}, stride {stride}")));
    }
    if stream.len() <= seq_len {
        return Err(Error::Input(format!(
            "evaluation stream of {} tokens is too short for windows of {seq_len}",
            stream.len()
        )));
    }
    let starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + seq_len < stream.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in starts.chunks(batch) {
        let mut inputs = Vec::with_capacity(chunk.len() * seq_len);
        let mut targets = Vec::with_capacity(chunk.len() * seq_len);
        for &s in chunk {
            inputs.extend_from_slice(&stream[s..s + seq_len]);
            targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
        }
        let logits = model.logits(&inputs, chunk.len(), seq_len)?;
        let nll = tensor::token_nll(&logits, &targets)?;
        for (w, &s) in chunk.iter().enumerate() {
            let fresh = if s == 0 { seq_len } else { stride };
            for v in &nll[(w + 1) * seq_len - fresh..(w + 1) * seq_len] {
                total += v;
                count += 1;
            }
        }
    }
    Ok((total / count as f64).exp())
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub label: f64,
    pub logits_kd: f64,
    pub feat_kd: f64,
    pub total: f64,
    pub skipped: bool,
    pub grad_norm: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub final_val_ppl: f64,
}

fn needs_teacher(d: &DistillConfig) -> bool {
    d.epsilon > 0.0 || (d.delta > 0.0 && d.feature_metric != FeatureMetric::None)
}

fn run<S: Scalar>(
    student: &mut TransformerModel<S>,
    teacher: Option<&TransformerModel<S>>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.seq_len > student.config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} exceeds model max_seq_len {}",
            cfg.seq_len, student.config.max_seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::from_config(cfg);
    let mut skip = SkipState::default();
    let d = &cfg.distill;
    let mut rows = Vec::with_capacity(cfg.total_steps);
    let mut final_val_ppl = f64::NAN;
    for step in 1..=cfg.total_steps {
        let (batch, next) = sample_batch(&corpus.train, cfg.batch_size, cfg.seq_len, rng)?;
        rng = next;
        let teacher_trace = match teacher {
            Some(t) => Some(t.trace(&batch.inputs, batch.batch, batch.seq_len)?),
            None => None,
        };

        let mut tape = Tape::new();
        let vars = student.forward(&mut tape, &batch.inputs, batch.batch, batch.seq_len)?;
        let label = tape.cross_entropy(vars.logits, &batch.targets)?;
        let mut total = label;
        let mut logits_val = 0.0;
        let mut feat_val = 0.0;
        let mut skipped = false;
        if let Some(tt) = &teacher_trace {
            if d.epsilon > 0.0 {
                let lk = distill::logits_kd_on_tape(&mut tape, vars.logits, &tt.logits, d.logits_temperature)?;
                logits_val = tape.value(lk).item().f64();
                let term = tape.scale(lk, S::of(d.epsilon));
                total = tape.add(total, term)?;
            }
            if d.delta > 0.0 && d.feature_metric != FeatureMetric::None {
                let (fk, was_skipped) = distill::feature_loss_on_tape(&mut tape, &tt.hidden, &vars.hidden, d, &mut skip)?;
                skipped = was_skipped;
                if let Some(fk) = fk {
                    feat_val = tape.value(fk).item().f64();
                    let term = tape.scale(fk, S::of(d.delta));
                    total = tape.add(total, term)?;
                }
            }
        }
        let label_val = tape.value(label).item().f64();
        let breakdown: LossBreakdown = distill::total_loss(label_val, logits_val, feat_val, skipped, d)
            .map_err(|e| Error::Divergence(format!("step {step}: {e}")))?;

        student.params.zero_grad();
        tape.backward(total, &mut student.params)?;
        let grad_norm = clip_grad_norm(&mut student.params, cfg.grad_clip_norm);
        let lr = cfg.lr_at(step);
        opt.step(&mut student.params, lr)
            .map_err(|e| Error::Divergence(format!("step {step}: {e}")))?;

        let eval_now = step == cfg.total_steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0);
        let val_ppl = if eval_now {
            let ppl = evaluate_perplexity(student, &corpus.val, cfg.seq_len, cfg.seq_len, cfg.batch_size)?;
            final_val_ppl = ppl;
            Some(ppl)
        } else {
            None
        };
        let row = MetricsRow {
            step,
            lr,
            label: breakdown.label,
            logits_kd: breakdown.logits_kd,
            feat_kd: breakdown.feat_kd,
            total: breakdown.total,
            skipped: breakdown.skipped,
            grad_norm,
            val_ppl,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(TrainOutcome { rows, final_val_ppl })
}

/// Trains a full-precision model on the label loss alone.
pub fn train_fp<S: Scalar>(
    model: &mut TransformerModel<S>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    if model.is_quantized() {
        return Err(Error::State("full-precision training needs an unquantized model".into()));
    }
    let mut cfg = cfg.clone();
    cfg.distill = DistillConfig::label_only();
    run(model, None, corpus, &cfg, on_row)
}

/// Quantization-aware training of `student` with optional distillation
/// from a frozen full-precision `teacher`. On divergence the error is
/// returned before the offending update, so `student` keeps its last good
/// parameters.
pub fn train_qat<S: Scalar>(
    student: &mut TransformerModel<S>,
    teacher: &TransformerModel<S>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    if !student.is_quantized() {
        return Err(Error::State("student must be quantized before QAT".into()));
    }
    if teacher.config.weight_mode != WeightMode::Fp {
        return Err(Error::State("teacher must be full precision".into()));
    }
    let mut shape = teacher.config.clone();
    shape.weight_mode = student.config.weight_mode;
    shape.group_size = student.config.group_size;
    shape.ste = student.config.ste;
    shape.quantized_linears = student.config.quantized_linears.clone();
    if shape != student.config {
        return Err(Error::Config("teacher and student architectures differ".into()));
    }
    cfg.distill.validate(student.config.n_layers)?;
    student.set_quant_lr_multiplier(cfg.dlt_lr_multiplier);
    let teacher = needs_teacher(&cfg.distill).then_some(teacher);
    run(student, teacher, corpus, cfg, on_row)
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_jsonl(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Parameter;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.0);
        assert_abs_diff_eq!(c.lr_at(c.warmup_steps), c.lr, epsilon = 1e-18);
        assert_abs_diff_eq!(c.lr_at(c.total_steps), 0.1 * c.lr, epsilon = 1e-18);
        let mut prev = f64::INFINITY;
        for s in c.warmup_steps..=c.total_steps {
            let lr = c.lr_at(s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn validation_rejects_bad_schedule() {
        let c = TrainConfig {
            warmup_steps: 10,
            total_steps: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    fn scalar_store(mult: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(Parameter::new("w", Tensor::scalar(0.5)).with_lr_multiplier(mult)).unwrap();
        s
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut s = scalar_store(1.0);
        s.get_mut(0).grad = Tensor::scalar(1.0);
        let mut opt = AdamW::<f64>::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, 1e-3).unwrap();
        assert_abs_diff_eq!(s.get(0).value.item(), 0.5 - 1e-3 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_decays_moments() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::<f64>::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.get(0).value.item(), 0.5);
        assert_eq!(opt.first_moment(0).unwrap()[0], 0.0);

        s.get_mut(0).grad = Tensor::scalar(1.0);
        opt.step(&mut s, 1e-3).unwrap();
        let m = opt.first_moment(0).unwrap()[0];
        s.get_mut(0).grad = Tensor::scalar(0.0);
        opt.step(&mut s, 1e-3).unwrap();
        assert_abs_diff_eq!(opt.first_moment(0).unwrap()[0], 0.9 * m, epsilon = 1e-18);
    }

    #[test]
    fn multiplier_scales_update() {
        let mut a = scalar_store(1.0);
        let mut b = scalar_store(0.1);
        for s in [&mut a, &mut b] {
            s.get_mut(0).grad = Tensor::scalar(0.3);
            AdamW::<f64>::new(0.9, 0.999, 1e-8, 0.0).step(s, 1e-2).unwrap();
        }
        let da = a.get(0).value.item() - 0.5;
        let db = b.get(0).value.item() - 0.5;
        assert_abs_diff_eq!(da, 10.0 * db, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut s = scalar_store(1.0);
        s.get_mut(0).grad = Tensor::scalar(f64::NAN);
        let mut opt = AdamW::<f64>::new(0.9, 0.999, 1e-8, 0.0);
        assert!(matches!(opt.step(&mut s, 1e-3), Err(Error::Divergence(_))));
        assert_eq!(s.get(0).value.item(), 0.5);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::<f64>::new();
        s.insert(Parameter::new("a", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap())).unwrap();
        s.get_mut(0).grad = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert_abs_diff_eq!(s.grad_norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn hyperparameter_snapshot() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.total_steps, 10_000);
        assert_eq!(c.warmup_steps, 500);
        assert_eq!(c.final_lr_fraction, 0.1);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
        assert_eq!(c.weight_decay, 0.0);
        assert_eq!(c.dlt_lr_multiplier, 0.1);
        assert_eq!(c.grad_clip_norm, 1.0);
        assert_eq!(c.distill.epsilon, 0.001);
        assert_eq!(c.distill.delta, 10.0);
        assert_eq!(TrainConfig::ablation().total_steps, 2000);
        let deltas: Vec<f64> = ScalePreset::ALL.iter().map(|p| p.values().delta).collect();
        assert_eq!(deltas, [10.0, 10.0, 10.0, 10.0, 5.0]);
        let lrs: Vec<f64> = ScalePreset::ALL.iter().map(|p| p.values().lr).collect();
        assert_eq!(lrs, [1e-4, 5e-5, 1e-4, 5e-5, 1e-4]);
        let layers: Vec<usize> = ScalePreset::ALL.iter().map(|p| p.values().n_feat_layers).collect();
        assert_eq!(layers, [6, 18, 18, 18, 18]);
        assert!(ScalePreset::ALL.iter().all(|p| p.values().epsilon == 0.001));
    }
}
