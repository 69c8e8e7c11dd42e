use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ternary_llm::quantizer::{GroupSpec, QuantMode};
use ternary_llm::tensor::matmul;
use ternary_llm::{PackedTernaryMatrix, TernaryGroupQuant, Tensor};

fn random_packed(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spec: GroupSpec) -> PackedTernaryMatrix {
    let w = Tensor::<f32>::from_fn(&[rows, cols], |_| 0.05 * rng.sample::<f32, _>(StandardNormal) + 0.01);
    let q = TernaryGroupQuant::init(&w, spec, QuantMode::Dlt).unwrap();
    PackedTernaryMatrix::from_quant(&q).unwrap()
}

#[test]
fn packed_kernel_matches_dense_dequantized_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let specs = [GroupSpec::PerChannel, GroupSpec::Size(32), GroupSpec::Size(64), GroupSpec::Size(128)];
    let mut worst = 0f32;
    for case in 0..100 {
        let spec = specs[case % specs.len()];
        let m = random_packed(&mut rng, 128, 128, spec);
        let tokens = 1 + case % 8;
        let x = Tensor::<f32>::from_fn(&[128, tokens], |_| rng.sample(StandardNormal));
        let (y, counts) = m.ternary_linear_counted(&x).unwrap();
        let dense = matmul(&m.dequantize(), &x).unwrap();
        worst = worst.max(y.max_abs_diff(&dense));
        assert_eq!(counts.muls, 2 * (m.group_count() * tokens) as u64);
        assert_eq!(counts, m.op_counts(tokens));
    }
    assert!(worst <= 1e-5, "max abs diff {worst}");
}

#[test]
fn per_channel_layer_uses_two_muls_per_output_per_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let m = random_packed(&mut rng, 48, 96, GroupSpec::PerChannel);
    assert_eq!(m.op_counts(1).muls, 2 * 48);
}

fn codes_and_dims() -> impl Strategy<Value = (usize, usize, Vec<i8>)> {
    (1usize..12, prop::sample::select(vec![4usize, 8, 12, 16]))
        .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(prop::sample::select(vec![-1i8, 0, 1]), r * c)))
}

proptest! {
    #[test]
    fn pack_serialize_roundtrip((rows, cols, codes) in codes_and_dims(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GroupSpec::Size(4);
        let g = spec.group_count(rows, cols).unwrap();
        let alpha: Vec<f32> = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let gamma: Vec<f32> = (0..g).map(|_| rng.random_range(-0.1..0.1)).collect();
        let m = PackedTernaryMatrix::pack(&codes, rows, cols, &alpha, &gamma, spec).unwrap();
        prop_assert_eq!(m.unpack(), codes);
        let bytes = m.serialize();
        let back = PackedTernaryMatrix::deserialize(&bytes).unwrap();
        prop_assert_eq!(back.serialize(), bytes);
        prop_assert_eq!(back, m);
    }
}
