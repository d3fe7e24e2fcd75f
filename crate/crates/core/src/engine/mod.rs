//! Round-by-round execution: broadcast, parallel truncated local passes,
//! barrier, aggregation, evaluation.

mod config;
mod sweep;

pub use config::{DataSource, ExperimentConfig, LrSchedule};
pub use sweep::{sweep, SweepCell, SweepResult, SweepRow, SweepSpec};

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_async, aggregate_drop, aggregate_salf, aggregate_vanilla, compute_p, AggregatorKind, AsyncQueue, Unbiasing,
    UnbiasingConstants,
};
use crate::data::{load_mnist, make_synthetic_convex, partition_uniform, Dataset, FederatedDataset};
use crate::error::{config as config_err, Error, Result};
use crate::nn::{backward_with_loss, evaluate, forward_loss, init_params, Evaluation, LayerwiseParams, PartialGradient};
use crate::rng::{stream, Purpose};
use crate::straggler::{draw_depths, DepthDraw};

/// Client shards plus the set used for evaluation.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: FederatedDataset<f64>,
    /// Held-out data; synthetic tasks evaluate on the union of the shards.
    pub eval: Dataset<f64>,
}

impl ExperimentData {
    /// Loads or generates the data a config asks for. MNIST needs
    /// `data.dir` to be set (the CLI fills it from the environment).
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        match &config.data {
            DataSource::Mnist { dir, .. } => {
                let dir = dir.as_deref().ok_or_else(|| {
                    config_err("MNIST data directory not set; expected the IDX files train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte")
                })?;
                Self::mnist(Path::new(dir), config.clients, config.data_seed())
            }
            DataSource::Synthetic { .. } => {
                let spec = config.synthetic_spec().expect("synthetic source");
                let train = make_synthetic_convex::<f64>(&spec)?;
                let eval = train.union();
                Ok(Self { train, eval })
            }
        }
    }

    pub fn mnist(dir: &Path, clients: usize, seed: u64) -> Result<Self> {
        let m = load_mnist::<f64>(dir)?;
        let train = partition_uniform(&m.train, clients, seed)?;
        Ok(Self { train, eval: m.test })
    }
}

/// Everything that carries over between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    /// Index of the next round, starting at 1.
    pub round: usize,
    pub params: LayerwiseParams<f64>,
    pub queue: AsyncQueue<f64>,
    pub p: UnbiasingConstants<f64>,
}

impl EngineState {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let l = config.model.num_layers();
        let p = match config.aggregator {
            AggregatorKind::Salf { unbiasing: Unbiasing::FromLaw } => {
                compute_p(&config.resolved_stragglers(), config.clients, l)?
            }
            _ => UnbiasingConstants::zero(l),
        };
        Ok(Self { round: 1, params: init_params(&config.model, config.seed)?, queue: AsyncQueue::new(), p })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `|U^l|` for `l = 1..=L`.
    pub participants: Vec<usize>,
    pub stragglers: usize,
    /// Mean mini-batch loss over all clients at the broadcast model.
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub eta: f64,
    /// Only filled when `record_timing` is set, since it breaks bitwise
    /// reproducibility of the records.
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub final_params: LayerwiseParams<f64>,
    pub final_eval: Option<Evaluation>,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_eval.and_then(|e| e.accuracy)
    }
}

/// Depths for round `state.round`; vanilla FedAvg has no deadline, so every
/// client completes.
pub fn round_depths(state: &EngineState, config: &ExperimentConfig) -> Result<DepthDraw> {
    let l = config.model.num_layers();
    if config.aggregator == AggregatorKind::VanillaFa {
        return Ok(DepthDraw { round: state.round, num_layers: l, depths: vec![1; config.clients] });
    }
    draw_depths(&config.resolved_stragglers(), config.clients, l, state.round, config.seed)
}

pub fn run_round(state: EngineState, config: &ExperimentConfig, data: &ExperimentData) -> Result<(EngineState, RoundRecord)> {
    let draw = round_depths(&state, config)?;
    run_round_with_depths(state, config, data, &draw)
}

/// One round with the given depths.
pub fn run_round_with_depths(
    state: EngineState,
    config: &ExperimentConfig,
    data: &ExperimentData,
    draw: &DepthDraw,
) -> Result<(EngineState, RoundRecord)> {
    let round = state.round;
    with_round(round, || {
        let started = config.record_timing.then(Instant::now);
        let l = config.model.num_layers();
        if draw.depths.len() != config.clients || draw.num_layers != l || data.train.num_clients() != config.clients {
            return Err(Error::Shape("depth draw or data does not match the configured clients and layers".into()));
        }
        let eta = config.lr.eta(round);
        let drop = config.aggregator == AggregatorKind::DropStragglers;
        let updates = (0..config.clients)
            .into_par_iter()
            .map(|u| {
                let shard = data.train.shard(u);
                let mut rng = stream(config.seed, Purpose::Batch, round as u64, u as u64);
                let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..shard.len())).collect();
                let batch = shard.gather(&idx);
                let d = draw.depths[u];
                // dropped stragglers and clients reaching no layer only report their loss
                if d > l || (drop && d > 1) {
                    let loss = forward_loss(&config.model, &state.params, &batch)?;
                    return Ok((loss, PartialGradient::empty(l, batch.len())));
                }
                backward_with_loss(&config.model, &state.params, &batch, d)
            })
            .collect::<Result<Vec<_>>>()?;
        let train_loss = updates.iter().map(|(loss, _)| loss).sum::<f64>() / config.clients as f64;
        let grads: Vec<PartialGradient<f64>> = updates.into_iter().map(|(_, g)| g).collect();

        let EngineState { params, queue, p, .. } = state;
        let (params, queue) = match config.aggregator {
            AggregatorKind::VanillaFa => (aggregate_vanilla(&params, &grads, eta)?, queue),
            AggregatorKind::DropStragglers => (aggregate_drop(&params, &grads, eta)?, queue),
            AggregatorKind::Salf { .. } => (aggregate_salf(&params, &grads, eta, &p)?, queue),
            AggregatorKind::AsyncDelayed => aggregate_async(&params, &grads, eta, round, queue)?,
        };

        let due = config.eval_every > 0 && (round % config.eval_every == 0 || round == config.rounds);
        let eval = if due { Some(evaluate(&config.model, &params, &data.eval)?) } else { None };
        let record = RoundRecord {
            round,
            participants: draw.participant_counts(),
            stragglers: draw.straggler_count(),
            train_loss,
            eval_loss: eval.map(|e| e.loss),
            eval_accuracy: eval.and_then(|e| e.accuracy),
            eta,
            wall_ms: started.map(|s| s.elapsed().as_secs_f64() * 1e3),
        };
        Ok((EngineState { round: round + 1, params, queue, p }, record))
    })
}

fn with_round<R>(round: usize, f: impl FnOnce() -> Result<R>) -> Result<R> {
    f().map_err(|e| Error::Round { round, source: Box::new(e) })
}

/// Loads the data and runs all rounds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let data = ExperimentData::load(config)?;
    run_experiment_with_data(config, &data)
}

pub fn run_experiment_with_data(config: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentResult> {
    let mut state = EngineState::new(config)?;
    let mut records = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let (next, record) = run_round(state, config, data)?;
        state = next;
        records.push(record);
    }
    let final_eval = match records.last() {
        Some(r) if r.eval_loss.is_some() => Some(Evaluation { loss: r.eval_loss.unwrap_or_default(), accuracy: r.eval_accuracy }),
        _ => Some(evaluate(&config.model, &state.params, &data.eval)?),
    };
    Ok(ExperimentResult { records, final_params: state.params, final_eval })
}
