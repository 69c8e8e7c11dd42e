use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ternary_llm::distill::{check_theorem1_sampled, BOUND_SLACK};
use ternary_llm::quantizer::{GroupSpec, QuantMode};
use ternary_llm::{TernaryGroupQuant, Tensor};

#[test]
fn normalized_output_error_is_bounded_by_cosine_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut instances = 0;
    let mut worst = f64::NEG_INFINITY;
    while instances < 1000 {
        let rows = rng.random_range(2..24);
        let cols = 4 * rng.random_range(1..8);
        let w = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.sample(StandardNormal));
        let mode = if instances % 2 == 0 { QuantMode::Twn } else { QuantMode::Dlt };
        let w_q = TernaryGroupQuant::init(&w, GroupSpec::Size(4), mode).unwrap().dequantize();
        let a: Vec<f64> = (0..rows).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let b: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        let report = check_theorem1_sampled(&w, &w_q, &a, &b, 1, 10, &mut rng).unwrap();
        worst = worst.max(report.max_violation);
        assert!(report.holds, "violation {}", report.max_violation);
        instances += 1;
    }
    assert!(worst <= BOUND_SLACK);
}
