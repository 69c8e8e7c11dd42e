use proptest::prelude::*;
use ternary_llm::model::{LinearKind, ModelConfig, TransformerModel};
use ternary_llm::quantizer::{compute_threshold, init_dlt_params, ternarize, twn_scale, GroupSpec, QuantMode};
use ternary_llm::TernaryGroupQuant;

fn sq_err(w: &[f64], codes: &[i8], alpha: f64, gamma: f64) -> f64 {
    w.iter().zip(codes).map(|(&x, &c)| (x - alpha * c as f64 - gamma).powi(2)).sum()
}

/// Minimizes `Σ(w − αT)²` over α by successively refined grids.
fn grid_argmin(w: &[f64], codes: &[i8]) -> f64 {
    let (mut lo, mut hi) = (0.0, 2.0 * w.iter().fold(0.0f64, |m, x| m.max(x.abs())) + 1e-9);
    let mut best = 0.0;
    for _ in 0..4 {
        let step = (hi - lo) / 1000.0;
        let mut best_err = f64::INFINITY;
        for i in 0..=1000 {
            let a = lo + step * i as f64;
            let e = sq_err(w, codes, a, 0.0);
            if e < best_err {
                best_err = e;
                best = a;
            }
        }
        (lo, hi) = ((best - step).max(0.0), best + step);
    }
    best
}

fn group() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 1..=16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn twn_scale_matches_grid_search(w in group()) {
        let codes = ternarize(&w, compute_threshold(&w).unwrap());
        let got = twn_scale(&w, &codes);
        if codes.iter().all(|&c| c == 0) {
            prop_assert_eq!(got, 0.0);
        } else {
            prop_assert!((got - grid_argmin(&w, &codes)).abs() <= 1e-4);
        }
    }

    #[test]
    fn scale_and_shift_never_worse_than_scale_alone(w in group()) {
        let codes = ternarize(&w, compute_threshold(&w).unwrap());
        let (a, g) = init_dlt_params(&w, &codes);
        let twn = sq_err(&w, &codes, twn_scale(&w, &codes), 0.0);
        prop_assert!(sq_err(&w, &codes, a, g) <= twn + 1e-12 * (1.0 + twn));
    }

    #[test]
    fn scale_and_shift_solve_normal_equations(w in group()) {
        let codes = ternarize(&w, compute_threshold(&w).unwrap());
        let n = w.len() as f64;
        let st: f64 = codes.iter().map(|&c| c as f64).sum();
        let stt: f64 = codes.iter().map(|&c| (c as f64).powi(2)).sum();
        let stw: f64 = codes.iter().zip(&w).map(|(&c, x)| c as f64 * x).sum();
        let sw: f64 = w.iter().sum();
        let det = stt * n - st * st;
        prop_assume!(det.abs() > 1e-6);
        let alpha = (stw * n - st * sw) / det;
        let gamma = (stt * sw - st * stw) / det;
        let (a, g) = init_dlt_params(&w, &codes);
        prop_assert!((a - alpha).abs() <= 1e-9 * (1.0 + alpha.abs()));
        prop_assert!((g - gamma).abs() <= 1e-9 * (1.0 + gamma.abs()));
    }

    #[test]
    fn codes_follow_threshold_rule(w in group()) {
        let delta = compute_threshold(&w).unwrap();
        for (&x, c) in w.iter().zip(ternarize(&w, delta)) {
            let want = if x > delta { 1 } else if x < -delta { -1 } else { 0 };
            prop_assert_eq!(c, want);
        }
    }
}

#[test]
fn dlt_init_beats_twn_on_every_model_layer() {
    let cfg = ModelConfig {
        d_model: 64,
        d_ff: 128,
        group_size: GroupSpec::Size(32),
        ..ModelConfig::default()
    };
    let fp = TransformerModel::<f64>::init(cfg, 21).unwrap();
    let mut twn = fp.clone();
    twn.quantize(QuantMode::Twn, GroupSpec::Size(32)).unwrap();
    let mut dlt = fp.clone();
    dlt.quantize(QuantMode::Dlt, GroupSpec::Size(32)).unwrap();
    for l in 0..fp.config.n_layers {
        for kind in LinearKind::ALL {
            let w = &fp.params.get(fp.linear(l, kind).weight).value;
            let err = |m: &TransformerModel<f64>| {
                let d = m.effective_weight(l, kind).unwrap();
                w.data().iter().zip(d.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            };
            assert!(err(&dlt) <= err(&twn), "layer {l} {kind:?}");
        }
    }
}

#[test]
fn immediate_twn_eval_is_round_to_ternary() {
    let cfg = ModelConfig {
        d_model: 32,
        d_ff: 64,
        group_size: GroupSpec::Size(16),
        ..ModelConfig::default()
    };
    let fp = TransformerModel::<f64>::init(cfg, 4).unwrap();
    let mut q = fp.clone();
    q.quantize(QuantMode::Twn, GroupSpec::Size(16)).unwrap();
    let w = &fp.params.get(fp.linear(1, LinearKind::Up).weight).value;
    let rtn = TernaryGroupQuant::init(w, GroupSpec::Size(16), QuantMode::Twn).unwrap().dequantize();
    assert_eq!(q.effective_weight(1, LinearKind::Up).unwrap(), rtn);
}
