//! Central finite-difference checks in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ternary_llm::distill::{self, DistillConfig, FeatureMetric, SkipState};
use ternary_llm::gradcheck::finite_diff_check;
use ternary_llm::model::{ModelConfig, TransformerModel};
use ternary_llm::quantizer::{self, AlphaGrad, GroupSpec, QuantMode, SteConfig};
use ternary_llm::{ParamStore, Parameter, Result, Tape, Tensor, Var};

const SMOOTH_TOL: f64 = 1e-6;
const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn store(params: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in params {
        s.insert(Parameter::new(name, t)).unwrap();
    }
    s
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element receives a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(randn(&mut rng, &shape, 1.0));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn assert_fd(
    mut s: ParamStore<f64>,
    tol: f64,
    mut f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
) {
    let n = s.len();
    let report = finite_diff_check(&mut s, None, H, |tape, st| {
        let vars: Vec<Var> = (0..n).map(|i| tape.param(st, i)).collect();
        f(tape, &vars)
    })
    .unwrap();
    assert!(report.checked > 0);
    assert!(
        report.max_rel_err <= tol,
        "max rel err {} at {}[{}]",
        report.max_rel_err,
        report.worst_param,
        report.worst_index
    );
}

fn unary(op: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, input: Tensor<f64>) {
    assert_fd(store(vec![("x", input)]), SMOOTH_TOL, |t, v| {
        let y = op(t, v[0])?;
        weighted_sum(t, y, 1)
    });
}

#[test]
fn matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[4, 5], 1.0);
    let bt = randn(&mut rng, &[5, 4], 1.0);
    assert_fd(store(vec![("a", a.clone()), ("b", b)]), SMOOTH_TOL, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 2)
    });
    assert_fd(store(vec![("a", a), ("b", bt)]), SMOOTH_TOL, |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
}

#[test]
fn elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, &[2, 3], 1.0);
    let b = randn(&mut rng, &[2, 3], 1.0);
    for which in 0..3 {
        assert_fd(store(vec![("a", a.clone()), ("b", b.clone())]), SMOOTH_TOL, |t, v| {
            let y = match which {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weighted_sum(t, y, 4)
        });
    }
}

#[test]
fn elementwise_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[3, 4], 1.0);
    let positive = x.map(|v| v.abs() + 0.5);
    // keep relu and clamp inputs away from their kinks
    let kinked = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    unary(|t, v| Ok(t.scale(v, -1.7)), x.clone());
    unary(|t, v| Ok(t.exp(v)), x.clone());
    unary(|t, v| t.log(v), positive);
    unary(|t, v| Ok(t.relu(v)), kinked.clone());
    unary(|t, v| Ok(t.gelu(v)), x.clone());
    unary(|t, v| Ok(t.clamp(v, -0.8, 0.9)), kinked.map(|v| if (v.abs() - 0.85).abs() < 0.1 { v * 0.5 } else { v }));
    unary(|t, v| t.transpose(v), x.clone());
    unary(|t, v| t.slice(v, 1..3, 0..2), x.clone());
    unary(|t, v| Ok(t.softmax_rows(v)), x.clone());
    unary(
        |t, v| {
            let m = t.causal_mask(v)?;
            Ok(t.softmax_rows(m))
        },
        randn(&mut rng, &[4, 4], 1.0),
    );
    unary(|t, v| Ok(t.sum(v)), x.clone());
    unary(|t, v| Ok(t.mean(v)), x);
}

#[test]
fn concat_and_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(&mut rng, &[2, 3], 1.0);
    let b = randn(&mut rng, &[1, 3], 1.0);
    let c = randn(&mut rng, &[2, 2], 1.0);
    assert_fd(store(vec![("a", a.clone()), ("b", b)]), SMOOTH_TOL, |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weighted_sum(t, y, 5)
    });
    assert_fd(store(vec![("a", a), ("c", c)]), SMOOTH_TOL, |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weighted_sum(t, y, 6)
    });
    let table = randn(&mut rng, &[5, 3], 1.0);
    assert_fd(store(vec![("table", table)]), SMOOTH_TOL, |t, v| {
        let y = t.embedding(v[0], &[4, 1, 4, 0])?;
        weighted_sum(t, y, 7)
    });
}

#[test]
fn rmsnorm_with_and_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[3, 6], 1.0);
    let g = randn(&mut rng, &[6], 1.0);
    let b = randn(&mut rng, &[6], 1.0);
    assert_fd(store(vec![("x", x.clone()), ("g", g.clone()), ("b", b)]), SMOOTH_TOL, |t, v| {
        let y = t.rmsnorm(v[0], v[1], Some(v[2]), 1e-5)?;
        weighted_sum(t, y, 8)
    });
    assert_fd(store(vec![("x", x), ("g", g)]), SMOOTH_TOL, |t, v| {
        let y = t.rmsnorm(v[0], v[1], None, 1e-5)?;
        weighted_sum(t, y, 9)
    });
}

#[test]
fn classification_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = randn(&mut rng, &[4, 5], 1.0);
    let target_logits = randn(&mut rng, &[4, 5], 1.0);
    assert_fd(store(vec![("z", logits.clone())]), SMOOTH_TOL, |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]));
    for temp in [1.0, 2.5] {
        let target = ternary_llm::tensor::softmax_rows(&target_logits.map(|v| v / temp));
        assert_fd(store(vec![("z", logits.clone())]), SMOOTH_TOL, |t, v| {
            t.soft_cross_entropy(v[0], target.clone(), temp)
        });
    }
    let goal = randn(&mut rng, &[4, 5], 1.0);
    assert_fd(store(vec![("z", logits)]), SMOOTH_TOL, |t, v| t.mse(v[0], goal.clone()));
}

fn dlt_fixture(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let spec = GroupSpec::Size(4);
    let w = randn(rng, &[3, 8], 0.5);
    let q = ternary_llm::TernaryGroupQuant::init(&w, spec, QuantMode::Dlt).unwrap();
    let alpha = Tensor::new(&[q.group_count()], q.alpha.clone()).unwrap();
    let gamma = Tensor::new(&[q.group_count()], q.gamma.clone()).unwrap();
    let x = randn(rng, &[5, 8], 1.0);
    (w, alpha, gamma, x)
}

#[test]
fn dlt_scale_and_shift_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w, alpha, gamma, x) = dlt_fixture(&mut rng);
    let mut s = store(vec![("w", w), ("alpha", alpha), ("gamma", gamma)]);
    s.get_mut(0).trainable = false;
    let ste = SteConfig::default();
    let report = finite_diff_check(&mut s, Some(&[1, 2]), H, |t, st| {
        let (w, a, g) = (t.param(st, 0), t.param(st, 1), t.param(st, 2));
        let d = quantizer::quantized_weight(t, w, Some((a, g)), GroupSpec::Size(4), ste)?;
        let xv = t.constant(x.clone());
        let y = t.matmul_nt(xv, d)?;
        weighted_sum(t, y, 10)
    })
    .unwrap();
    assert!(report.max_rel_err <= TOL, "{report:?}");
}

#[test]
fn paper_alpha_rule_is_not_the_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w, alpha, gamma, x) = dlt_fixture(&mut rng);
    let mut s = store(vec![("w", w), ("alpha", alpha), ("gamma", gamma)]);
    s.get_mut(0).trainable = false;
    let ste = SteConfig {
        alpha_grad: AlphaGrad::Paper,
        ..SteConfig::default()
    };
    let report = finite_diff_check(&mut s, Some(&[1]), H, |t, st| {
        let (w, a, g) = (t.param(st, 0), t.param(st, 1), t.param(st, 2));
        let d = quantizer::quantized_weight(t, w, Some((a, g)), GroupSpec::Size(4), ste)?;
        let xv = t.constant(x.clone());
        let y = t.matmul_nt(xv, d)?;
        weighted_sum(t, y, 10)
    })
    .unwrap();
    assert!(report.max_rel_err > 1e-2);
}

fn hidden_pair(rng: &mut ChaCha8Rng, layers: usize) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let t: Vec<_> = (0..=layers).map(|_| randn(rng, &[4, 6], 1.0)).collect();
    let s: Vec<_> = (0..=layers).map(|_| randn(rng, &[4, 6], 1.0)).collect();
    (t, s)
}

#[test]
fn feature_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (teacher, student) = hidden_pair(&mut rng, 2);
    for metric in [FeatureMetric::Off, FeatureMetric::Mse, FeatureMetric::MseClamp] {
        let cfg = DistillConfig {
            n_feat_layers: 2,
            feature_metric: metric,
            clamp_k: 50.0,
            ..DistillConfig::default()
        };
        let params: Vec<(&str, Tensor<f64>)> = vec![("h0", student[0].clone()), ("h1", student[1].clone()), ("h2", student[2].clone())];
        assert_fd(store(params), SMOOTH_TOL, |t, v| {
            let (loss, _) = distill::feature_loss_on_tape(t, &teacher, v, &cfg, &mut SkipState::default())?;
            Ok(loss.expect("feature loss"))
        });
    }
}

#[test]
fn logits_distillation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let student = randn(&mut rng, &[3, 7], 1.0);
    let teacher = randn(&mut rng, &[3, 7], 2.0);
    for temp in [1.0, 3.0] {
        assert_fd(store(vec![("z", student.clone())]), SMOOTH_TOL, |t, v| {
            distill::logits_kd_on_tape(t, v[0], &teacher, temp)
        });
    }
}

#[test]
fn model_total_loss_wrt_scales_shifts_and_norms() {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 6,
        norm_bias: true,
        group_size: GroupSpec::Size(8),
        ..ModelConfig::default()
    };
    let teacher = TransformerModel::<f64>::init(cfg, 11).unwrap();
    let mut student = teacher.clone();
    student.quantize(QuantMode::Dlt, GroupSpec::Size(8)).unwrap();
    // move off the least-squares point so the scale gradients are not tiny
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in student.params.iter_mut() {
        if p.name.ends_with(".alpha") || p.name.ends_with(".gamma") || p.name.contains("norm") {
            for v in p.value.data_mut() {
                *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
    let targets = [1, 4, 1, 5, 9, 2, 6, 5, 3, 5];
    let trace = teacher.trace(&tokens, 2, 5).unwrap();
    let dcfg = DistillConfig {
        epsilon: 0.5,
        delta: 2.0,
        n_feat_layers: 2,
        ..DistillConfig::default()
    };
    let ids: Vec<usize> = student
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.ends_with(".alpha") || p.name.ends_with(".gamma") || p.name.contains("norm"))
        .map(|(i, _)| i)
        .collect();
    let model = student.clone();
    let report = finite_diff_check(&mut student.params, Some(&ids), 1e-6, |tape, st| {
        let mut m = model.clone();
        m.params = st.clone();
        let vars = m.forward(tape, &tokens, 2, 5)?;
        let label = tape.cross_entropy(vars.logits, &targets)?;
        let lk = distill::logits_kd_on_tape(tape, vars.logits, &trace.logits, 1.0)?;
        let (fk, _) = distill::feature_loss_on_tape(tape, &trace.hidden, &vars.hidden, &dcfg, &mut SkipState::default())?;
        let lk = tape.scale(lk, dcfg.epsilon);
        let fk = tape.scale(fk.expect("feature loss"), dcfg.delta);
        let total = tape.add(label, lk)?;
        tape.add(total, fk)
    })
    .unwrap();
    assert!(report.checked > 100);
    assert!(report.max_rel_err <= TOL, "{report:?}");
}
