//! Analytic gradients against central finite differences.

use diversefl_core::nn::{init_model, sgd_step, BatchView, Model, ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    spec: ModelSpec,
    theta: ParamVector,
    features: Vec<f64>,
    labels: Vec<usize>,
    l2: f64,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let input = rng.random_range(1..=5);
    let hidden = rng.random_range(0..=2);
    let classes = rng.random_range(2..=4);
    let mut sizes = vec![input];
    for _ in 0..hidden {
        sizes.push(rng.random_range(2..=5));
    }
    sizes.push(classes);
    let spec = ModelSpec::new(sizes, rng.random()).unwrap();
    let mut theta = init_model(&spec);
    // Non-zero biases so hidden units sit away from their kinks.
    for v in theta.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let m = rng.random_range(1..=6);
    let features = (0..m * input).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..m).map(|_| rng.random_range(0..classes)).collect();
    let l2 = if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(0.0..0.05)
    };
    Case {
        spec,
        theta,
        features,
        labels,
        l2,
    }
}

fn loss(case: &Case, theta: &ParamVector) -> f64 {
    let batch = BatchView::new(&case.features, &case.labels, case.spec.input_dim());
    case.spec.loss_and_grad(theta, batch, case.l2).unwrap().loss
}

/// Largest coordinate error, relative to `max(1, |analytic|, |numeric|)`.
fn worst_error(case: &Case) -> f64 {
    let batch = BatchView::new(&case.features, &case.labels, case.spec.input_dim());
    let analytic = case.spec.loss_and_grad(&case.theta, batch, case.l2).unwrap().gradient;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..case.theta.len() {
        let mut plus = case.theta.clone();
        plus[k] += h;
        let mut minus = case.theta.clone();
        minus[k] -= h;
        let numeric = (loss(case, &plus) - loss(case, &minus)) / (2.0 * h);
        let scale = 1f64.max(analytic[k].abs()).max(numeric.abs());
        worst = worst.max((analytic[k] - numeric).abs() / scale);
    }
    worst
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    for case_id in 0..100 {
        let case = random_case(&mut rng);
        let err = worst_error(&case);
        assert!(
            err <= 1e-4,
            "case {case_id} ({:?}): error {err:e}",
            case.spec.layer_sizes
        );
    }
}

#[test]
fn small_step_does_not_increase_batch_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case_id in 0..50 {
        let case = random_case(&mut rng);
        let batch = BatchView::new(&case.features, &case.labels, case.spec.input_dim());
        let g = case.spec.loss_and_grad(&case.theta, batch, case.l2).unwrap();
        assert!(g.loss >= 0.0);
        let next = sgd_step(&case.theta, &g.gradient, 1e-3).unwrap();
        let after = loss(&case, &next);
        assert!(after <= g.loss + 1e-15, "case {case_id}: {} -> {after}", g.loss);
    }
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let case = random_case(&mut rng);
    let batch = BatchView::new(&case.features, &case.labels, case.spec.input_dim());
    let a = case.spec.loss_and_grad(&case.theta, batch, case.l2).unwrap();
    let b = case.spec.loss_and_grad(&case.theta, batch, case.l2).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(a
        .gradient
        .iter()
        .zip(b.gradient.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(init_model(&case.spec), init_model(&case.spec));
}
