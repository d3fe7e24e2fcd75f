//! Assumption constants, the convergence bound, and Monte Carlo checks of
//! the participation law, unbiasedness and variance results.

mod convergence;
mod estimate;
mod gradcheck;
mod lemmas;
mod report;

pub use convergence::{gap_curve, verify_theorem1, GapCurve, Theorem1Options, Theorem1Outcome};
pub use estimate::{analyze_convex, estimate_constants, gradient_moments, minimize, ConvexAnalysis, EstimateOptions};
pub use gradcheck::{gradient_discrepancy, verify_gradients, GRADIENT_ATOL, GRADIENT_RTOL};
pub use lemmas::{builtin_fixtures, verify_lemma1, verify_lemma2, verify_lemma3, Fixture};
pub use report::{CheckRecord, Relation, Report};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub rho_c: f64,
    pub rho_s: f64,
    /// Per-client stochastic gradient variance bounds.
    pub sigma_sq: Vec<f64>,
    pub g_sq: f64,
    /// Heterogeneity gap `F(w_opt) - mean_u min F_u`.
    pub gamma_gap: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub b: f64,
    pub c: f64,
    pub clients: usize,
    pub num_layers: usize,
}

/// `gamma = max(8 kappa, 1)`.
pub fn schedule_gamma(rho_c: f64, rho_s: f64) -> f64 {
    (8.0 * rho_s / rho_c).max(1.0)
}

/// `eta_t = 2 / (rho_c (gamma + t))`.
pub fn theorem1_step(t: usize, rho_c: f64, rho_s: f64) -> f64 {
    2.0 / (rho_c * (schedule_gamma(rho_c, rho_s) + t as f64))
}

/// `4 U L G^2 / (U - 1) * (1 + a^U) / (1 - a^U)` with `a = 1 - 1/(L+1)`.
pub fn c_constant(clients: usize, num_layers: usize, g_sq: f64) -> Result<f64> {
    if clients < 2 || num_layers == 0 {
        return Err(config("the variance constant needs U >= 2 and L >= 1"));
    }
    let (u, l) = (clients as f64, num_layers as f64);
    let a_u = (1.0 - 1.0 / (l + 1.0)).powi(clients as i32);
    Ok(4.0 * u * l * g_sq / (u - 1.0) * (1.0 + a_u) / (1.0 - a_u))
}

/// Right-hand side of the SALF variance bound for one round.
pub fn lemma3_bound(eta: f64, clients: usize, num_layers: usize, g_sq: f64) -> Result<f64> {
    Ok(eta * eta * c_constant(clients, num_layers, g_sq)?)
}

impl TheoryConstants {
    pub fn new(
        rho_c: f64,
        rho_s: f64,
        sigma_sq: Vec<f64>,
        g_sq: f64,
        gamma_gap: f64,
        num_layers: usize,
    ) -> Result<Self> {
        let clients = sigma_sq.len();
        if !(rho_c > 0.0) || !(rho_s >= rho_c) || !rho_s.is_finite() {
            return Err(config(format!("need rho_s >= rho_c > 0, got rho_c = {rho_c}, rho_s = {rho_s}")));
        }
        if sigma_sq.iter().any(|s| !(*s >= 0.0)) || !(g_sq >= 0.0) {
            return Err(config("variance and norm constants must be nonnegative"));
        }
        // minimization tolerance can leave a tiny negative gap
        let gamma_gap = gamma_gap.max(0.0);
        let u = clients as f64;
        let b = sigma_sq.iter().sum::<f64>() / (u * u) + 6.0 * rho_s * gamma_gap;
        let c = c_constant(clients, num_layers, g_sq)?;
        Ok(Self {
            rho_c,
            rho_s,
            sigma_sq,
            g_sq,
            gamma_gap,
            kappa: rho_s / rho_c,
            gamma: schedule_gamma(rho_c, rho_s),
            b,
            c,
            clients,
            num_layers,
        })
    }
}

/// Step size at round `t >= 1`.
pub fn step_size(t: usize, constants: &TheoryConstants) -> f64 {
    2.0 / (constants.rho_c * (constants.gamma + t as f64))
}

/// Optimality-gap bound at round `t >= 1` given `E|w_1 - w_opt|^2`.
pub fn bound_at(t: usize, constants: &TheoryConstants, init_dist_sq: f64) -> f64 {
    let k = constants;
    k.kappa / (k.gamma + t as f64 - 1.0)
        * (2.0 * (k.b + k.c) / k.rho_c + k.rho_c * k.gamma / 2.0 * init_dist_sq)
}
