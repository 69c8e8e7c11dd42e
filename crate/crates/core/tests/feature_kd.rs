use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ternary_llm::distill::{mse_feature_loss, off_feature_loss, DistillConfig, MseVariant, SkipState};
use ternary_llm::Tensor;

fn traces(t: &[&[f64]], s: &[&[f64]]) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let input = Tensor::zeros(&[t.len(), t[0].len()]);
    (
        vec![input.clone(), Tensor::from_rows(t).unwrap()],
        vec![input, Tensor::from_rows(s).unwrap()],
    )
}

fn mse(t: &[Tensor<f64>], s: &[Tensor<f64>]) -> f64 {
    mse_feature_loss(t, s, 1, MseVariant::Plain, &DistillConfig::default(), &mut SkipState::default())
        .unwrap()
        .0
}

#[test]
fn outlier_moves_mse_but_not_cosine_loss() {
    let (t0, s0) = traces(&[&[1.0, 2.0], &[3.0, 4.0]], &[&[1.01, 2.0], &[3.0, 3.98]]);
    let (t1, s1) = traces(&[&[1e6, 2.0], &[3.0, 4.0]], &[&[0.9e6, 2.0], &[3.0, 3.98]]);
    let off_change = (off_feature_loss(&t1, &s1, 1).unwrap() - off_feature_loss(&t0, &s0, 1).unwrap()).abs();
    let mse_change = (mse(&t1, &s1) - mse(&t0, &s0)).abs();
    assert!(off_change < 1e-3, "{off_change}");
    assert!(mse_change > 1e3, "{mse_change}");
}

#[test]
fn cosine_loss_ignores_per_token_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..50 {
        let t: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[5, 8], |_| rng.sample(StandardNormal))).collect();
        let s: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[5, 8], |_| rng.sample(StandardNormal))).collect();
        let base = off_feature_loss(&t, &s, 2).unwrap();
        let scaled: Vec<Tensor<f64>> = s
            .iter()
            .map(|h| {
                let c: Vec<f64> = (0..5).map(|_| rng.random_range(1e-3..1e3)).collect();
                Tensor::from_fn(&[5, 8], |i| h.data()[i] * c[i / 8])
            })
            .collect();
        assert!((off_feature_loss(&t, &scaled, 2).unwrap() - base).abs() <= 1e-6);
    }
}
