use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TheoryConstants;
use crate::data::{Dataset, FederatedDataset};
use crate::error::{Error, Result};
use crate::nn::{forward_loss, full_gradient, init_params, LayerwiseParams, ModelKind, ModelSpec};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// Mini-batch size of the stochastic gradients being bounded.
    pub batch_size: usize,
    pub probe_points: usize,
    pub samples_per_probe: usize,
    /// Multiplier on the empirical `G^2`.
    pub g_safety: f64,
    /// Gradient-norm stopping tolerance for the minimizations.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            batch_size: 1,
            probe_points: 10,
            samples_per_probe: 1000,
            g_safety: 1.5,
            tolerance: 1e-10,
            max_iterations: 2_000_000,
        }
    }
}

/// Constants together with the oracle solution they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexAnalysis {
    pub constants: TheoryConstants,
    pub w_opt: LayerwiseParams<f64>,
    /// Global objective at `w_opt`.
    pub f_opt: f64,
    /// `min F_u` per client.
    pub local_minima: Vec<f64>,
}

/// Curvature bounds `(lambda_min, lambda_max)` of one client's objective.
fn curvature(spec: &ModelSpec, shard: &Dataset<f64>) -> (f64, f64) {
    let (n, dim) = (shard.len(), shard.dim());
    let x = DMatrix::from_row_slice(n, dim, shard.features());
    let gram = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let lo = eig.min().max(0.0);
    let hi = eig.max().max(0.0);
    let l2 = spec.l2_coeff;
    match spec.kind {
        ModelKind::LinearL2 => (lo + l2, hi + l2),
        // sigmoid'' <= 1/4; the data term can be arbitrarily flat far out
        _ => (l2, hi / 4.0 + l2),
    }
}

/// Gradient descent with step `1/smoothness` until the gradient norm falls
/// below `tolerance`.
pub fn minimize(
    spec: &ModelSpec,
    data: &Dataset<f64>,
    start: &LayerwiseParams<f64>,
    smoothness: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<LayerwiseParams<f64>> {
    let step = 1.0 / smoothness;
    let mut w = start.clone();
    for _ in 0..max_iterations {
        let g = full_gradient(spec, &w, data)?;
        if g.norm_sq().sqrt() <= tolerance {
            return Ok(w);
        }
        let blocks = w
            .blocks()
            .iter()
            .zip(g.blocks())
            .map(|(wb, gb)| wb.iter().zip(gb).map(|(a, b)| a - step * b).collect())
            .collect();
        w = LayerwiseParams::new(blocks)?;
    }
    Err(Error::Numeric(format!(
        "gradient descent did not reach gradient norm {tolerance} in {max_iterations} iterations"
    )))
}

/// Per-client `(sigma_u^2, max E|g|^2)` over the probe points: mean squared
/// deviation of mini-batch gradients from the full local gradient, and their
/// mean squared norm. Maximized over probes.
pub fn gradient_moments(
    spec: &ModelSpec,
    data: &FederatedDataset<f64>,
    probes: &[LayerwiseParams<f64>],
    batch_size: usize,
    samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if probes.is_empty() || samples == 0 || batch_size == 0 {
        return Err(crate::error::config("gradient moments need probes, samples and a batch size"));
    }
    let mut sigma = vec![0.0_f64; data.num_clients()];
    let mut g_sq = 0.0_f64;
    for (k, w) in probes.iter().enumerate() {
        for (u, shard) in data.shards().iter().enumerate() {
            let full = full_gradient(spec, w, shard)?;
            let mut rng = stream(seed, Purpose::Probe, k as u64, u as u64);
            let (mut dev, mut norm) = (0.0, 0.0);
            for _ in 0..samples {
                let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..shard.len())).collect();
                let g = full_gradient(spec, w, &shard.gather(&idx))?;
                dev += g.dist_sq(&full);
                norm += g.norm_sq();
            }
            sigma[u] = sigma[u].max(dev / samples as f64);
            g_sq = g_sq.max(norm / samples as f64);
        }
    }
    Ok((sigma, g_sq))
}

/// Constants for a convex model on `data`, plus `w_opt` and the minima.
///
/// Probe points interpolate between `w_opt` and fresh initializations drawn
/// with seeds `probe_seed..`, so they cover the region a run starting from
/// such an initialization travels through.
pub fn analyze_convex(
    spec: &ModelSpec,
    data: &FederatedDataset<f64>,
    probe_seed: u64,
    opts: &EstimateOptions,
) -> Result<ConvexAnalysis> {
    if !spec.is_convex() {
        return Err(Error::Unsupported(format!(
            "{:?} is not strongly convex; rho_c and rho_s are only estimated for linear-l2 and logistic-l2",
            spec.kind
        )));
    }
    spec.validate()?;
    let (mut rho_c, mut rho_s) = (f64::INFINITY, 0.0_f64);
    for shard in data.shards() {
        let (lo, hi) = curvature(spec, shard);
        rho_c = rho_c.min(lo);
        rho_s = rho_s.max(hi);
    }
    let zero = LayerwiseParams::zeros(&spec.block_sizes())?;
    let union = data.union();
    let w_opt = minimize(spec, &union, &zero, rho_s, opts.tolerance, opts.max_iterations)?;
    let f_opt = forward_loss(spec, &w_opt, &union)?;
    let local_minima = data
        .shards()
        .iter()
        .map(|s| {
            let w = minimize(spec, s, &w_opt, rho_s, opts.tolerance, opts.max_iterations)?;
            forward_loss(spec, &w, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma_gap = f_opt - local_minima.iter().sum::<f64>() / local_minima.len() as f64;

    let n = opts.probe_points.max(1);
    let probes = (0..n)
        .map(|k| {
            let init = init_params::<f64>(spec, probe_seed + k as u64)?;
            let a = if n == 1 { 1.0 } else { k as f64 / (n - 1) as f64 };
            let blocks = w_opt
                .blocks()
                .iter()
                .zip(init.blocks())
                .map(|(o, i)| o.iter().zip(i).map(|(o, i)| o + a * (i - o)).collect())
                .collect();
            LayerwiseParams::new(blocks)
        })
        .collect::<Result<Vec<_>>>()?;
    let (sigma_sq, g_sq) = gradient_moments(spec, data, &probes, opts.batch_size, opts.samples_per_probe, probe_seed)?;
    let constants = TheoryConstants::new(rho_c, rho_s, sigma_sq, opts.g_safety * g_sq, gamma_gap, spec.num_layers())?;
    Ok(ConvexAnalysis { constants, w_opt, f_opt, local_minima })
}

/// [`analyze_convex`] with default options, returning only the constants.
pub fn estimate_constants(spec: &ModelSpec, data: &FederatedDataset<f64>, probe_seed: u64) -> Result<TheoryConstants> {
    analyze_convex(spec, data, probe_seed, &EstimateOptions::default()).map(|a| a.constants)
}
