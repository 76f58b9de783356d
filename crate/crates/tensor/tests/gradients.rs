use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenfill_tensor::gradcheck::{check, max_rel_err, op_suite};
use tokenfill_tensor::Tensor;

/// Step for the suite. At 1e-3, f32 rounding of the outputs alone puts even
/// linear ops near the 1e-3 tolerance; 5e-3 sits near the f32 optimum for
/// central differences.
const SUITE_STEP: f32 = 5e-3;

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let results = op_suite(4, SUITE_STEP, &mut rng).unwrap();
    assert!(results.len() >= 100, "only {} cases", results.len());
    let failures: Vec<_> = results.iter().filter(|r| !(r.rel_err < 1e-3)).collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn conv_weight_grad_of_summed_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng).to_param();
    let reports = check(|t| Ok(t[0].conv2d(&t[1], None, 1, 1)?.sum()), &[x, w], 1e-3, &mut rng).unwrap();
    assert!(max_rel_err(&reports) < 1e-3);
}
