use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

use super::report::{CheckRecord, Relation, Report};
use super::lemma3_bound;
use crate::aggregation::{aggregate_salf, aggregate_vanilla, UnbiasingConstants};
use crate::data::{Dataset, Targets};
use crate::error::{config, Error, Result};
use crate::nn::{full_gradient, init_params, LayerwiseParams, ModelSpec, PartialGradient};
use crate::rng::{stream, Purpose};
use crate::straggler::{draw_depths, StragglerModel};

/// Draws are split into this many independent chunks; the split is fixed so
/// results do not depend on the worker count.
const MC_CHUNKS: usize = 64;

/// Chi-square and total-variation comparison of `|U^l|` with
/// `Bin(U, l/(L+1))` over `n_draws` uniform-depth rounds.
pub fn verify_lemma1(clients: usize, num_layers: usize, n_draws: usize, seed: u64) -> Result<Report> {
    if n_draws == 0 {
        return Err(config("lemma1 needs at least one draw"));
    }
    let law = StragglerModel::UniformDepth;
    let hist = (0..n_draws)
        .into_par_iter()
        .fold(
            || vec![vec![0u64; clients + 1]; num_layers],
            |mut h, i| {
                let draw = draw_depths(&law, clients, num_layers, i + 1, seed).expect("validated arguments");
                for (l, &c) in draw.participant_counts().iter().enumerate() {
                    h[l][c] += 1;
                }
                h
            },
        )
        .reduce(
            || vec![vec![0u64; clients + 1]; num_layers],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                }
                a
            },
        );
    let mut report = Report::new("lemma1");
    let n = n_draws as f64;
    for (li, counts) in hist.iter().enumerate() {
        let l = li + 1;
        let prob = l as f64 / (num_layers + 1) as f64;
        let bin = Binomial::new(prob, clients as u64).map_err(|e| Error::Numeric(e.to_string()))?;
        let pmf: Vec<f64> = (0..=clients as u64).map(|k| bin.pmf(k)).collect();
        let tv = 0.5 * counts.iter().zip(&pmf).map(|(&c, &p)| (c as f64 / n - p).abs()).sum::<f64>();
        let (chi2, dof) = pooled_chi_square(counts, &pmf, n);
        let p_value = if dof == 0 { 1.0 } else { 1.0 - ChiSquared::new(dof as f64).map_err(|e| Error::Numeric(e.to_string()))?.cdf(chi2) };
        let mean = counts.iter().enumerate().map(|(k, &c)| k as f64 * c as f64).sum::<f64>() / n;
        report.push(
            CheckRecord::new(format!("layer{l}.tv"), tv, Relation::Below, 0.01)
                .with_detail(format!("mean |U^l| = {mean:.4}, binomial mean {:.4}", clients as f64 * prob)),
        );
        report.push(
            CheckRecord::new(format!("layer{l}.chi2_p"), p_value, Relation::Above, 0.001)
                .with_detail(format!("chi2 = {chi2:.3} on {dof} dof")),
        );
    }
    Ok(report)
}

/// Pools adjacent bins until each expected count is at least 5.
fn pooled_chi_square(counts: &[u64], pmf: &[f64], n: f64) -> (f64, usize) {
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let (mut obs, mut exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(pmf) {
        obs += c as f64;
        exp += p * n;
        if exp >= 5.0 {
            groups.push((obs, exp));
            obs = 0.0;
            exp = 0.0;
        }
    }
    if exp > 0.0 || obs > 0.0 {
        match groups.last_mut() {
            Some(last) => {
                last.0 += obs;
                last.1 += exp;
            }
            None => groups.push((obs, exp)),
        }
    }
    let stat = groups.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum();
    (stat, groups.len().saturating_sub(1))
}

/// Frozen round: global parameters, each client's full gradient on its
/// frozen mini-batch, a step size and a declared bound `G^2` on the
/// gradients' squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub name: String,
    pub params: LayerwiseParams<f64>,
    pub grads: Vec<LayerwiseParams<f64>>,
    pub eta: f64,
    pub g_sq: f64,
}

impl Fixture {
    pub fn new(name: impl Into<String>, params: LayerwiseParams<f64>, grads: Vec<LayerwiseParams<f64>>, eta: f64, g_sq: f64) -> Result<Self> {
        let name = name.into();
        if grads.is_empty() {
            return Err(Error::Fixture(format!("{name}: no client gradients")));
        }
        if !(eta > 0.0) {
            return Err(Error::Fixture(format!("{name}: step size must be positive")));
        }
        for (u, g) in grads.iter().enumerate() {
            if !g.same_shape(&params) {
                return Err(Error::Fixture(format!("{name}: gradient of client {u} does not match the parameters")));
            }
            let norm = g.norm_sq();
            if norm > g_sq * (1.0 + 1e-12) {
                return Err(Error::Fixture(format!(
                    "{name}: client {u} has squared gradient norm {norm} above declared G^2 = {g_sq}"
                )));
            }
        }
        Ok(Self { name, params, grads, eta, g_sq })
    }

    /// Gradients rescaled so that the largest squared norm equals `g_sq`.
    pub fn normalized(name: impl Into<String>, params: LayerwiseParams<f64>, grads: Vec<LayerwiseParams<f64>>, eta: f64, g_sq: f64) -> Result<Self> {
        let max = grads.iter().map(LayerwiseParams::norm_sq).fold(0.0, f64::max);
        let grads = if max > 0.0 {
            let s = (g_sq / max).sqrt();
            grads.iter().map(|g| g.scaled(s)).collect()
        } else {
            grads
        };
        Self::new(name, params, grads, eta, g_sq)
    }

    /// Full gradients of `spec` at fresh parameters on per-client frozen batches.
    pub fn from_model(name: &str, spec: &ModelSpec, clients: usize, batch: usize, eta: f64, g_sq: f64, seed: u64) -> Result<Self> {
        let params = init_params::<f64>(spec, seed)?;
        let k = spec.output_dim();
        let grads = (0..clients)
            .map(|u| {
                let mut rng = stream(seed, Purpose::Probe, 1, u as u64);
                let x = (0..batch * spec.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let labels = (0..batch).map(|_| rng.random_range(0..k)).collect();
                let data = Dataset::new(spec.input_dim(), x, Targets::Classes { labels, num_classes: k })?;
                full_gradient(spec, &params, &data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::normalized(name, params, grads, eta, g_sq)
    }

    pub fn clients(&self) -> usize {
        self.grads.len()
    }

    pub fn num_layers(&self) -> usize {
        self.params.num_layers()
    }

    fn full_grads(&self) -> Vec<PartialGradient<f64>> {
        self.grads.iter().map(|g| PartialGradient::full(g.clone(), 1)).collect()
    }

    fn target(&self) -> Result<LayerwiseParams<f64>> {
        aggregate_vanilla(&self.params, &self.full_grads(), self.eta)
    }

    /// SALF outcome for uniform-depth draw `i`.
    fn salf_draw(&self, full: &[PartialGradient<f64>], p: &UnbiasingConstants<f64>, i: usize, seed: u64) -> Result<Vec<f64>> {
        let draw = draw_depths(&StragglerModel::UniformDepth, self.clients(), self.num_layers(), i + 1, seed)?;
        let partial = full
            .iter()
            .zip(&draw.depths)
            .map(|(g, &d)| g.truncate(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(aggregate_salf(&self.params, &partial, self.eta, p)?.to_flat())
    }

    /// Runs `f` over all draws in fixed chunks and returns per-chunk results in order.
    fn monte_carlo<A: Send>(
        &self,
        n_draws: usize,
        seed: u64,
        init: impl Fn() -> A + Sync,
        step: impl Fn(&mut A, &[f64]) + Sync,
    ) -> Result<Vec<A>> {
        if n_draws == 0 {
            return Err(config("Monte Carlo checks need at least one draw"));
        }
        let full = self.full_grads();
        let p = UnbiasingConstants::<f64>::uniform(self.clients(), self.num_layers());
        let chunk = n_draws.div_ceil(MC_CHUNKS);
        (0..MC_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let mut acc = init();
                for i in c * chunk..((c + 1) * chunk).min(n_draws) {
                    step(&mut acc, &self.salf_draw(&full, &p, i, seed)?);
                }
                Ok(acc)
            })
            .collect()
    }
}

/// Per-coordinate running mean and squared deviation (Welford), mergeable.
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn merge(mut self, o: &Moments) -> Self {
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        for j in 0..self.mean.len() {
            let d = o.mean[j] - self.mean[j];
            self.m2[j] += o.m2[j] + d * d * self.n * o.n / n;
            self.mean[j] += d * o.n / n;
        }
        self.n = n;
        self
    }
}

/// Monte Carlo mean of the SALF model against the FedAvg model, per
/// coordinate, in units of its standard error.
pub fn verify_lemma2(fixture: &Fixture, n_draws: usize, seed: u64) -> Result<Report> {
    let target = fixture.target()?.to_flat();
    let dim = target.len();
    let parts = fixture.monte_carlo(n_draws, seed, || Moments::new(dim), |m, x| m.push(x))?;
    let m = parts.iter().fold(Moments::new(dim), |acc, p| acc.merge(p));
    let n = m.n;
    let mut max_z: f64 = 0.0;
    let mut max_dev: f64 = 0.0;
    let mut se_at_max = 0.0;
    for j in 0..dim {
        let dev = (m.mean[j] - target[j]).abs();
        let se = (m.m2[j] / (n - 1.0).max(1.0) / n).sqrt();
        // deviations at rounding level carry no statistical signal
        let z = if dev <= 1e-12 * (1.0 + target[j].abs()) {
            0.0
        } else if se > 0.0 {
            dev / se
        } else {
            f64::INFINITY
        };
        max_dev = max_dev.max(dev);
        if z >= max_z {
            max_z = z;
            se_at_max = se;
        }
    }
    let mut report = Report::new("lemma2");
    report.push(
        CheckRecord::new(format!("{}.max_z", fixture.name), max_z, Relation::AtMost, 4.0).with_detail(format!(
            "max |mean - target| = {max_dev:.3e}, standard error at worst coordinate {se_at_max:.3e}, {n_draws} draws"
        )),
    );
    Ok(report)
}

/// Empirical `E|w_salf - w_fedavg|^2` against the variance bound.
pub fn verify_lemma3(fixture: &Fixture, n_draws: usize, seed: u64) -> Result<Report> {
    let target = fixture.target()?.to_flat();
    let bound = lemma3_bound(fixture.eta, fixture.clients(), fixture.num_layers(), fixture.g_sq)?;
    let parts = fixture.monte_carlo(
        n_draws,
        seed,
        || 0.0,
        |acc, x| *acc += x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
    )?;
    let emp = parts.iter().sum::<f64>() / n_draws as f64;
    let mut report = Report::new("lemma3");
    report.push(
        CheckRecord::new(format!("{}.variance", fixture.name), emp, Relation::AtMost, bound)
            .with_detail(format!("slack = {:.6e}", bound - emp)),
    );
    Ok(report)
}

/// Three frozen rounds: `U=2, L=2`, `U=30, L=4` (random gradients) and an
/// `U=8` MLP with three layers (gradients of a real loss).
pub fn builtin_fixtures(seed: u64) -> Result<Vec<Fixture>> {
    let random = |name: &str, clients: usize, sizes: &[usize], salt: u64| -> Result<Fixture> {
        let mut rng = stream(seed, Purpose::Probe, 0, salt);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let params = LayerwiseParams::new(sizes.iter().map(|&n| draw(n)).collect())?;
        let grads = (0..clients)
            .map(|_| LayerwiseParams::new(sizes.iter().map(|&n| draw(n)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Fixture::normalized(name, params, grads, 0.1, 1.0)
    };
    Ok(vec![
        random("u2_l2", 2, &[3, 2], 1)?,
        random("u30_l4", 30, &[4, 3, 3, 2], 2)?,
        Fixture::from_model("u8_mlp", &ModelSpec::mlp(vec![6, 5, 4, 3]), 8, 16, 0.05, 1.0, seed)?,
    ])
}
