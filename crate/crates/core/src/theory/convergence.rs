use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{analyze_convex, EstimateOptions};
use super::report::{CheckRecord, Relation, Report};
use super::{bound_at, TheoryConstants};
use crate::aggregation::AggregatorKind;
use crate::data::TaskKind;
use crate::engine::{run_round, DataSource, EngineState, ExperimentConfig, ExperimentData, LrSchedule};
use crate::error::{config, Result};
use crate::nn::{forward_loss, LayerwiseParams, ModelSpec};
use crate::straggler::StragglerModel;

/// Synthetic strongly convex setup for checking the convergence bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Theorem1Options {
    pub task: TaskKind,
    pub clients: usize,
    pub dim: usize,
    /// Number of coefficient blocks `L`; the dimension is split as evenly as
    /// possible, earlier blocks taking the remainder.
    pub blocks: usize,
    pub n_per_client: usize,
    pub heterogeneity: f64,
    pub noise_sd: f64,
    pub l2_coeff: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub probe_seed: u64,
    /// Log-log slope is fitted over rounds in this closed range.
    pub fit_range: (usize, usize),
    pub slope_tolerance: f64,
}

impl Default for Theorem1Options {
    fn default() -> Self {
        Self {
            task: TaskKind::Linear,
            clients: 10,
            dim: 20,
            blocks: 4,
            n_per_client: 200,
            heterogeneity: 0.5,
            noise_sd: 0.5,
            l2_coeff: 0.5,
            batch_size: 4,
            rounds: 2000,
            seeds: (1..=20).collect(),
            data_seed: 0,
            probe_seed: 1000,
            fit_range: (200, 2000),
            slope_tolerance: 0.2,
        }
    }
}

impl Theorem1Options {
    pub fn model(&self, blocks: usize) -> Result<ModelSpec> {
        if blocks == 0 || blocks > self.dim {
            return Err(config(format!("cannot split dimension {} into {blocks} blocks", self.dim)));
        }
        let sizes = (0..blocks).map(|i| self.dim / blocks + usize::from(i < self.dim % blocks)).collect();
        Ok(match self.task {
            TaskKind::Linear => ModelSpec::linear(sizes, self.l2_coeff),
            TaskKind::Logistic => ModelSpec::logistic(sizes, self.l2_coeff),
        })
    }

    /// SALF with uniform depths and the theorem's step sizes.
    pub fn config(&self, blocks: usize, rho_c: f64, rho_s: f64) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            model: self.model(blocks)?,
            data: DataSource::Synthetic {
                task: self.task,
                n_per_client: self.n_per_client,
                dim: self.dim,
                heterogeneity: self.heterogeneity,
                noise_sd: self.noise_sd,
                seed: Some(self.data_seed),
            },
            clients: self.clients,
            rounds: self.rounds,
            aggregator: AggregatorKind::salf(),
            stragglers: StragglerModel::UniformDepth,
            lr: LrSchedule::Theorem1 { rho_c, rho_s },
            batch_size: self.batch_size,
            eval_every: 0,
            seed: 0,
            record_timing: false,
        })
    }
}

/// Mean over seeds of `F(w_t) - F(w_opt)` for `t = 1..=rounds`, where `w_t`
/// is the model entering round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub mean_gap: Vec<f64>,
    /// `mean |w_1 - w_opt|^2` over seeds.
    pub init_dist_sq: f64,
}

pub fn gap_curve(
    config: &ExperimentConfig,
    data: &ExperimentData,
    seeds: &[u64],
    w_opt: &LayerwiseParams<f64>,
    f_opt: f64,
) -> Result<GapCurve> {
    if seeds.is_empty() {
        return Err(crate::error::config("gap curve needs at least one seed"));
    }
    let union = data.train.union();
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            let mut state = EngineState::new(&cfg)?;
            let d0 = state.params.dist_sq(w_opt);
            let mut gaps = Vec::with_capacity(cfg.rounds);
            for _ in 0..cfg.rounds {
                gaps.push(forward_loss(&cfg.model, &state.params, &union)? - f_opt);
                state = run_round(state, &cfg, data)?.0;
            }
            Ok((d0, gaps))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let mut mean_gap = vec![0.0; config.rounds];
    for (_, gaps) in &runs {
        mean_gap.iter_mut().zip(gaps).for_each(|(m, g)| *m += g / n);
    }
    let init_dist_sq = runs.iter().map(|(d, _)| d).sum::<f64>() / n;
    Ok(GapCurve { mean_gap, init_dist_sq })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Outcome {
    pub constants: TheoryConstants,
    pub f_opt: f64,
    pub curve: GapCurve,
    pub bound: Vec<f64>,
    pub slope: f64,
    pub report: Report,
}

/// Least-squares slope of `ln gap` against `ln t` on 64 log-spaced rounds.
fn log_log_slope(gap: &[f64], lo: usize, hi: usize) -> f64 {
    let mut ts: Vec<usize> = (0..64)
        .map(|i| ((lo as f64).ln() + (hi as f64 / lo as f64).ln() * i as f64 / 63.0).exp().round() as usize)
        .collect();
    ts.dedup();
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .filter(|&&t| t >= 1 && t <= gap.len() && gap[t - 1] > 0.0)
        .map(|&t| ((t as f64).ln(), gap[t - 1].ln()))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Estimates the constants, runs SALF from every seed and compares the mean
/// optimality gap with the bound at every round.
pub fn verify_theorem1(opts: &Theorem1Options) -> Result<Theorem1Outcome> {
    if opts.fit_range.0 < 1 || opts.fit_range.0 >= opts.fit_range.1 || opts.fit_range.1 > opts.rounds {
        return Err(config(format!("fit range {:?} must lie within 1..={}", opts.fit_range, opts.rounds)));
    }
    let model = opts.model(opts.blocks)?;
    let probe_cfg = opts.config(opts.blocks, 1.0, 1.0)?;
    let data = ExperimentData::load(&probe_cfg)?;
    let est = EstimateOptions { batch_size: opts.batch_size, ..EstimateOptions::default() };
    let analysis = analyze_convex(&model, &data.train, opts.probe_seed, &est)?;
    let k = analysis.constants.clone();
    let cfg = opts.config(opts.blocks, k.rho_c, k.rho_s)?;
    let curve = gap_curve(&cfg, &data, &opts.seeds, &analysis.w_opt, analysis.f_opt)?;
    let bound: Vec<f64> = (1..=opts.rounds).map(|t| bound_at(t, &k, curve.init_dist_sq)).collect();
    let (worst_t, worst) = curve
        .mean_gap
        .iter()
        .zip(&bound)
        .enumerate()
        .map(|(i, (g, b))| (i + 1, g / b))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let slope = log_log_slope(&curve.mean_gap, opts.fit_range.0, opts.fit_range.1);
    let mut report = Report::new("theorem1");
    report.push(
        CheckRecord::new("gap_over_bound.max", worst, Relation::AtMost, 1.0)
            .with_detail(if worst <= 1.0 {
                format!("bound satisfied at all t in 1..={}; tightest at t = {worst_t}", opts.rounds)
            } else {
                format!("bound violated at t = {worst_t}")
            }),
    );
    report.push(
        CheckRecord::new("loglog_slope.deviation", (slope + 1.0).abs(), Relation::AtMost, opts.slope_tolerance).with_detail(
            format!("slope {slope:.4} over t in [{}, {}], {} seeds", opts.fit_range.0, opts.fit_range.1, opts.seeds.len()),
        ),
    );
    Ok(Theorem1Outcome { constants: k, f_opt: analysis.f_opt, curve, bound, slope, report })
}
