use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salf::data::{Dataset, Targets};
use salf::error::Error;
use salf::nn::{
    apply_local_step, backward, backward_with_loss, evaluate, forward_loss, init_params, LayerwiseParams, ModelSpec,
    PartialGradient,
};

fn random_params(spec: &ModelSpec, seed: u64, scale: f64) -> LayerwiseParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = spec
        .block_sizes()
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .collect();
    LayerwiseParams::new(blocks).unwrap()
}

fn class_batch(dim: usize, n: usize, classes: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(dim, x, Targets::Classes { labels, num_classes: classes }).unwrap()
}

fn value_batch(dim: usize, n: usize, binary: bool, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n)
        .map(|_| if binary { rng.random_range(0..2) as f64 } else { rng.random_range(-2.0..2.0) })
        .collect();
    Dataset::new(dim, x, Targets::Values(y)).unwrap()
}

/// Central differences with step 1e-5 (1 + |w_i|); rtol 1e-4 plus a tiny
/// absolute floor for coordinates whose gradient is numerically zero.
fn check_gradient(spec: &ModelSpec, params: &LayerwiseParams<f64>, batch: &Dataset<f64>) {
    let grad = backward(spec, params, batch, 1).unwrap().into_full().unwrap();
    let sizes = params.block_sizes();
    let flat = params.to_flat();
    let g = grad.to_flat();
    for i in 0..flat.len() {
        let h = 1e-5 * (1.0 + flat[i].abs());
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fp = forward_loss(spec, &LayerwiseParams::from_flat(&plus, &sizes).unwrap(), batch).unwrap();
        let fm = forward_loss(spec, &LayerwiseParams::from_flat(&minus, &sizes).unwrap(), batch).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        let tol = 1e-4 * fd.abs().max(g[i].abs()) + 1e-8;
        assert!((fd - g[i]).abs() <= tol, "{:?} coordinate {i}: analytic {} vs fd {fd}", spec.kind, g[i]);
    }
}

fn small_cnn() -> ModelSpec {
    let mut spec = ModelSpec::cnn_small(2, 3, 4);
    spec.layer_dims = vec![16, 1, 2, 3, 4, 3];
    spec
}

#[test]
fn gradients_match_finite_differences_on_every_kind() {
    let lin = ModelSpec::linear(vec![2, 3], 0.1);
    check_gradient(&lin, &random_params(&lin, 1, 1.0), &value_batch(5, 7, false, 2));
    let log = ModelSpec::logistic(vec![3, 1, 2], 0.05);
    check_gradient(&log, &random_params(&log, 3, 1.0), &value_batch(6, 9, true, 4));
    let mut mlp = ModelSpec::mlp(vec![5, 4, 3, 3]);
    mlp.l2_coeff = 0.01;
    check_gradient(&mlp, &random_params(&mlp, 5, 0.8), &class_batch(5, 6, 3, 6));
    let cnn = small_cnn();
    check_gradient(&cnn, &random_params(&cnn, 7, 0.5), &class_batch(256, 3, 3, 8));
}

#[test]
fn squared_error_head_on_class_targets() {
    let mut mlp = ModelSpec::mlp(vec![4, 3, 2]);
    mlp.output = Some(salf::nn::OutputKind::SquaredError);
    check_gradient(&mlp, &random_params(&mlp, 9, 0.8), &class_batch(4, 5, 2, 10));
}

#[test]
fn truncation_never_changes_computed_blocks() {
    let cases: Vec<(ModelSpec, Dataset<f64>)> = vec![
        (ModelSpec::linear(vec![2, 2, 1, 3], 0.1), value_batch(8, 5, false, 1)),
        (ModelSpec::mlp(vec![6, 5, 4, 3]), class_batch(6, 4, 3, 2)),
        (small_cnn(), class_batch(256, 2, 3, 3)),
    ];
    for (spec, batch) in cases {
        let params = random_params(&spec, 11, 0.7);
        let full = backward(&spec, &params, &batch, 1).unwrap();
        for d in 1..=spec.num_layers() + 1 {
            let part = backward(&spec, &params, &batch, d).unwrap();
            assert_eq!(part.depth(), d);
            assert_eq!(part.blocks(), &full.blocks()[d - 1..]);
        }
    }
}

#[test]
fn depth_past_output_is_empty() {
    let spec = ModelSpec::mlp(vec![3, 2, 2]);
    let params = init_params::<f64>(&spec, 1).unwrap();
    let g = backward(&spec, &params, &class_batch(3, 2, 2, 1), 3).unwrap();
    assert!(g.blocks().is_empty());
    assert_eq!(g.depth(), 3);
    assert!(matches!(backward(&spec, &params, &class_batch(3, 2, 2, 1), 4), Err(Error::Contract(_))));
    assert!(matches!(backward(&spec, &params, &class_batch(3, 2, 2, 1), 0), Err(Error::Contract(_))));
}

#[test]
fn init_is_deterministic_and_sized() {
    let spec = ModelSpec::mlp(vec![4, 3, 2]);
    let a = init_params::<f64>(&spec, 7).unwrap();
    let b = init_params::<f64>(&spec, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params::<f64>(&spec, 8).unwrap());
    let lin = init_params::<f64>(&ModelSpec::linear(vec![5], 0.1), 3).unwrap();
    assert_eq!(lin.total_dim(), 5);
    let big = init_params::<f64>(&ModelSpec::mlp(vec![784, 128, 64, 10]), 1).unwrap();
    assert_eq!(big.block_sizes(), vec![784 * 128 + 128, 128 * 64 + 64, 64 * 10 + 10]);
    let bound = (6.0_f64 / (784.0 + 128.0)).sqrt();
    assert!(big.block(0)[..784 * 128].iter().all(|w| w.abs() < bound));
    assert!(big.block(0)[784 * 128..].iter().all(|&b| b == 0.0));
    assert!(matches!(init_params::<f64>(&ModelSpec::mlp(vec![4, 0, 2]), 1), Err(Error::Config(_))));
}

#[test]
fn zero_weights_give_symmetric_losses() {
    let log = ModelSpec::logistic(vec![2], 1.0);
    let zeros = LayerwiseParams::zeros(&log.block_sizes()).unwrap();
    let balanced = Dataset::new(2, vec![1.0, 2.0, -1.0, 0.5], Targets::Values(vec![1.0, 0.0])).unwrap();
    let loss: f64 = forward_loss(&log, &zeros, &balanced).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-15);

    let mlp = ModelSpec::mlp(vec![784, 128, 64, 10]);
    let zeros = LayerwiseParams::zeros(&mlp.block_sizes()).unwrap();
    let sample = class_batch(784, 1, 10, 5);
    let loss: f64 = forward_loss(&mlp, &zeros, &sample).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-14);
}

#[test]
fn regularized_least_squares_optimum() {
    // x = (1, t) for t in {0, 1, 2}, y = (1, 2, 4); the stationary point of
    // mean ½r² + l2/2 |w|² solves (XᵀX/3 + l2 I) w = Xᵀy/3.
    let l2 = 1e-3;
    let spec = ModelSpec::linear(vec![1, 1], l2);
    let data = Dataset::new(2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0], Targets::Values(vec![1.0, 2.0, 4.0])).unwrap();
    let (a, b, c) = (1.0 + l2, 1.0, 5.0 / 3.0 + l2);
    let (r0, r1) = (7.0 / 3.0, 10.0 / 3.0);
    let det = a * c - b * b;
    let w = [(c * r0 - b * r1) / det, (a * r1 - b * r0) / det];
    let params = LayerwiseParams::new(vec![vec![w[0]], vec![w[1]]]).unwrap();
    let g = backward(&spec, &params, &data, 1).unwrap().into_full().unwrap();
    assert!(g.norm_sq() < 1e-24);
    let resid: f64 = [(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)]
        .iter()
        .map(|&(t, y)| (w[0] + w[1] * t - y).powi(2) / 2.0)
        .sum();
    let loss = forward_loss(&spec, &params, &data).unwrap();
    assert!((loss - (resid / 3.0 + l2 / 2.0 * (w[0] * w[0] + w[1] * w[1]))).abs() < 1e-14);
}

#[test]
fn logistic_gradient_closed_form() {
    let l2 = 0.2;
    let spec = ModelSpec::logistic(vec![2], l2);
    let w = [0.3, -0.7];
    let params = LayerwiseParams::new(vec![w.to_vec()]).unwrap();
    let xs = [[1.0, 2.0], [-0.5, 1.5]];
    let ys = [1.0, 0.0];
    let data = Dataset::new(2, xs.concat(), Targets::Values(ys.to_vec())).unwrap();
    let g = backward(&spec, &params, &data, 1).unwrap();
    for j in 0..2 {
        let mut expect = 0.0;
        for s in 0..2 {
            let z: f64 = xs[s][0] * w[0] + xs[s][1] * w[1];
            expect += (1.0 / (1.0 + (-z).exp()) - ys[s]) * xs[s][j] / 2.0;
        }
        expect += l2 * w[j];
        assert!((g.blocks()[0][j] - expect).abs() < 1e-15);
    }
}

#[test]
fn shape_and_numeric_errors() {
    let spec = ModelSpec::mlp(vec![3, 2]);
    let params = init_params::<f64>(&spec, 1).unwrap();
    assert!(matches!(forward_loss(&spec, &params, &class_batch(4, 2, 2, 1)), Err(Error::Shape(_))));
    let empty = Dataset::new(3, vec![], Targets::Classes { labels: vec![], num_classes: 2 }).unwrap();
    assert!(matches!(forward_loss(&spec, &params, &empty), Err(Error::Shape(_))));
    let huge = LayerwiseParams::new(vec![vec![f64::INFINITY; 8]]).unwrap();
    assert!(matches!(forward_loss(&spec, &huge, &class_batch(3, 2, 2, 1)), Err(Error::Numeric(_))));
}

#[test]
fn evaluate_agrees_with_forward_loss() {
    let spec = ModelSpec::mlp(vec![5, 4, 3]);
    let params = random_params(&spec, 3, 0.9);
    let data = class_batch(5, 613, 3, 4);
    let e = evaluate(&spec, &params, &data).unwrap();
    let l = forward_loss(&spec, &params, &data).unwrap();
    assert!((e.loss - l).abs() < 1e-12);
    let acc = e.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(evaluate(&spec, &params, &data).unwrap(), e);
}

#[test]
fn local_step_rejects_partial_gradients() {
    let spec = ModelSpec::mlp(vec![3, 2, 2]);
    let params = init_params::<f64>(&spec, 1).unwrap();
    let (_, g) = backward_with_loss(&spec, &params, &class_batch(3, 4, 2, 1), 2).unwrap();
    assert!(matches!(apply_local_step(&params, &g, 0.1), Err(Error::Contract(_))));
    let g = PartialGradient::full(LayerwiseParams::zeros(&spec.block_sizes()).unwrap(), 4);
    assert_eq!(apply_local_step(&params, &g, 0.1).unwrap(), params);
}

#[test]
fn f32_models_run() {
    let spec = ModelSpec::mlp(vec![3, 4, 2]);
    let params = init_params::<f32>(&spec, 2).unwrap();
    let x: Vec<f32> = vec![0.1, 0.5, -0.3, 0.9, 0.0, 0.2];
    let data = Dataset::new(3, x, Targets::Classes { labels: vec![0, 1], num_classes: 2 }).unwrap();
    let (loss, g) = backward_with_loss(&spec, &params, &data, 1).unwrap();
    assert!(loss.is_finite());
    assert_eq!(g.blocks().len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn truncation_consistency_random_mlps(
        widths in prop::collection::vec(1usize..6, 3..6),
        seed in any::<u64>(),
        n in 1usize..5,
    ) {
        let spec = ModelSpec::mlp(widths.clone());
        let params = random_params(&spec, seed, 1.0);
        let batch = class_batch(widths[0], n, *widths.last().unwrap(), seed ^ 1);
        let full = backward(&spec, &params, &batch, 1).unwrap();
        for d in 1..=spec.num_layers() + 1 {
            let part = backward(&spec, &params, &batch, d).unwrap();
            prop_assert_eq!(part.blocks(), &full.blocks()[d - 1..]);
        }
    }

    #[test]
    fn passes_are_pure(seed in any::<u64>()) {
        let spec = ModelSpec::logistic(vec![2, 2], 0.3);
        let params = random_params(&spec, seed, 2.0);
        let batch = value_batch(4, 6, true, seed);
        let a = backward_with_loss(&spec, &params, &batch, 1).unwrap();
        let b = backward_with_loss(&spec, &params, &batch, 1).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }
}
