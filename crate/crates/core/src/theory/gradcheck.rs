use rand::Rng;

use super::report::{CheckRecord, Relation, Report};
use crate::data::{Dataset, Targets};
use crate::error::Result;
use crate::nn::{backward, forward_loss, LayerwiseParams, ModelKind, ModelSpec};
use crate::rng::{stream, Purpose};

/// Central-difference tolerance: `|fd - g| <= RTOL max(|fd|, |g|) + ATOL`.
pub const GRADIENT_RTOL: f64 = 1e-4;
pub const GRADIENT_ATOL: f64 = 1e-8;

/// Largest tolerance-normalized discrepancy between the analytic gradient
/// and central differences over every coordinate; at most 1 means agreement.
pub fn gradient_discrepancy(spec: &ModelSpec, params: &LayerwiseParams<f64>, batch: &Dataset<f64>) -> Result<f64> {
    let g = backward(spec, params, batch, 1)?.into_full()?.to_flat();
    let sizes = params.block_sizes();
    let flat = params.to_flat();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let h = 1e-5 * (1.0 + flat[i].abs());
        let mut w = flat.clone();
        w[i] = flat[i] + h;
        let fp = forward_loss(spec, &LayerwiseParams::from_flat(&w, &sizes)?, batch)?;
        w[i] = flat[i] - h;
        let fm = forward_loss(spec, &LayerwiseParams::from_flat(&w, &sizes)?, batch)?;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / (GRADIENT_RTOL * fd.abs().max(g[i].abs()) + GRADIENT_ATOL));
    }
    Ok(worst)
}

fn small_models() -> Vec<ModelSpec> {
    let mut cnn = ModelSpec::cnn_small(2, 3, 4);
    cnn.layer_dims = vec![16, 1, 2, 3, 4, 3];
    vec![ModelSpec::linear(vec![3, 2], 0.1), ModelSpec::logistic(vec![2, 3], 0.1), ModelSpec::mlp(vec![5, 4, 3, 3]), cnn]
}

/// Finite-difference check of backpropagation on a small instance of every
/// model kind with random parameters and data.
pub fn verify_gradients(seed: u64) -> Result<Report> {
    let mut report = Report::new("gradients");
    for (k, spec) in small_models().into_iter().enumerate() {
        let mut rng = stream(seed, Purpose::Probe, 0x6ad, k as u64);
        let params = LayerwiseParams::new(
            spec.block_sizes().iter().map(|&n| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).collect(),
        )?;
        let (dim, n) = (spec.input_dim(), 6);
        let x = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = match spec.kind {
            ModelKind::LinearL2 => Targets::Values((0..n).map(|_| rng.random_range(-2.0..2.0)).collect()),
            ModelKind::LogisticL2 => Targets::Values((0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect()),
            ModelKind::Mlp | ModelKind::CnnSmall => {
                let c = spec.output_dim();
                Targets::Classes { labels: (0..n).map(|_| rng.random_range(0..c)).collect(), num_classes: c }
            }
        };
        let batch = Dataset::new(dim, x, targets)?;
        let worst = gradient_discrepancy(&spec, &params, &batch)?;
        report.push(
            CheckRecord::new(format!("{:?}.fd_discrepancy", spec.kind), worst, Relation::AtMost, 1.0)
                .with_detail(format!("rtol {GRADIENT_RTOL:e}, atol {GRADIENT_ATOL:e}, {} parameters", params.total_dim())),
        );
    }
    Ok(report)
}
