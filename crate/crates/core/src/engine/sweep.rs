use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{run_experiment_with_data, DataSource, ExperimentConfig, ExperimentData};
use crate::aggregation::AggregatorKind;
use crate::error::{config, Result};
use crate::straggler::StragglerModel;

/// Grid of aggregator x straggler fraction x seed over a base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub methods: Vec<AggregatorKind>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.fractions.is_empty() || self.seeds.is_empty() {
            return Err(config("sweep grid is empty: methods, fractions and seeds must each be nonempty"));
        }
        self.base.validate()
    }

    /// Config of one cell. The data partition is pinned to the base seed so
    /// every cell trains on the same shards.
    pub fn cell_config(&self, method: AggregatorKind, fraction: f64, seed: u64) -> ExperimentConfig {
        let mut c = self.base.clone();
        let data_seed = Some(self.base.data_seed());
        match &mut c.data {
            DataSource::Mnist { seed, .. } | DataSource::Synthetic { seed, .. } => *seed = data_seed,
        }
        c.aggregator = method;
        c.stragglers = StragglerModel::FixedFraction { q: fraction };
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub fraction: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation over the successful seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStat {
    pub fraction: f64,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub runs: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub stats: Vec<SweepStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub fractions: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }

    pub fn mean(&self, method: &str, fraction: f64) -> Option<f64> {
        let row = self.rows.iter().find(|r| r.method == method)?;
        row.stats.iter().find(|s| s.fraction == fraction)?.mean
    }
}

/// Runs every cell; a failing cell is recorded and the sweep carries on.
/// Vanilla FedAvg ignores stragglers, so it runs once per seed.
pub fn sweep(spec: &SweepSpec, data: &ExperimentData) -> Result<SweepResult> {
    spec.validate()?;
    let mut vanilla: BTreeMap<u64, std::result::Result<Option<f64>, String>> = BTreeMap::new();
    let mut cells = Vec::new();
    for &method in &spec.methods {
        for &q in &spec.fractions {
            for &seed in &spec.seeds {
                let cfg = spec.cell_config(method, q, seed);
                let run = || run_experiment_with_data(&cfg, data).map(|r| r.final_accuracy()).map_err(|e| e.to_string());
                let outcome = if method == AggregatorKind::VanillaFa {
                    vanilla.entry(seed).or_insert_with(run).clone()
                } else {
                    run()
                };
                let (accuracy, error) = match outcome {
                    Ok(a) => (a, None),
                    Err(e) => (None, Some(e)),
                };
                cells.push(SweepCell { method: method.name().to_string(), fraction: q, seed, accuracy, error });
            }
        }
    }
    let rows = spec
        .methods
        .iter()
        .map(|m| SweepRow {
            method: m.name().to_string(),
            stats: spec
                .fractions
                .iter()
                .map(|&q| {
                    let mine: Vec<&SweepCell> = cells.iter().filter(|c| c.method == m.name() && c.fraction == q).collect();
                    let acc: Vec<f64> = mine.iter().filter_map(|c| c.accuracy).collect();
                    let failures = mine.iter().filter(|c| c.error.is_some()).count();
                    let (mean, sd) = mean_sd(&acc);
                    SweepStat { fraction: q, mean, sd, runs: acc.len(), failures }
                })
                .collect(),
        })
        .collect();
    Ok(SweepResult { fractions: spec.fractions.clone(), cells, rows })
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (Some(mean), Some(sd))
}
