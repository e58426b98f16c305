use fastemit::model::{ModelConfig, Parameters};
use fastemit::selftest::{model_gradient, model_gradient_error, random_model_case};
use proptest::prelude::*;

fn config(dim: usize, vocab: usize, endpointer: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: dim,
        encoder_dim: dim,
        predictor_dim: (dim + 1).min(8),
        joint_dim: dim.max(2) - 1,
        vocab_size: vocab,
        endpointer,
        seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backprop_matches_finite_differences(
        dim in 2usize..=8,
        vocab in 2usize..=5,
        frames in 1usize..=5,
        labels in 0usize..=3,
        endpointer in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = config(dim, vocab, endpointer);
        let (params, x, y) = random_model_case(&cfg, frames, labels, 0.5, seed);
        let err = model_gradient_error(&params, &x, &y);
        prop_assert!(err <= 1e-5, "relative error {err:e}");
    }

    #[test]
    fn parameter_gradient_is_affine_in_lambda(seed in any::<u64>(), lambda in 0.0f64..0.2) {
        let cfg = config(4, 3, true);
        let (params, x, y) = random_model_case(&cfg, 4, 2, 0.5, seed);
        let g0 = model_gradient(&params, &x, &y, 0.0);
        let g1 = model_gradient(&params, &x, &y, 1.0);
        let g = model_gradient(&params, &x, &y, lambda);
        let scale = g0.norm().max(g1.norm()).max(1e-12);
        for ((a, b0), b1) in g.as_slice().iter().zip(g0.as_slice()).zip(g1.as_slice()) {
            let expected = b0 + lambda * (b1 - b0);
            prop_assert!((a - expected).abs() <= 1e-12 * scale);
        }
    }
}

#[test]
fn default_init_gradient_matches_finite_differences() {
    let cfg = config(8, 4, true);
    let (_, x, y) = random_model_case(&cfg, 6, 3, 0.5, 11);
    let params = Parameters::init(&cfg).unwrap();
    assert!(model_gradient_error(&params, &x, &y) <= 1e-5);
}
