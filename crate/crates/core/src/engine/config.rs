use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::data::{SyntheticSpec, TaskKind};
use crate::error::{config, Result};
use crate::nn::{ModelKind, ModelSpec};
use crate::straggler::StragglerModel;
use crate::theory::theorem1_step;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// IID random partition of the MNIST training set; evaluation on the
    /// test set.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        /// Partition seed; the run seed when unset.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Synthetic {
        task: TaskKind,
        n_per_client: usize,
        dim: usize,
        #[serde(default)]
        heterogeneity: f64,
        #[serde(default)]
        noise_sd: f64,
        /// Generator seed; the run seed when unset.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { eta: f64 },
    /// `2 / (rho_c (gamma + t))` with `gamma = max(8 rho_s / rho_c, 1)`.
    Theorem1 { rho_c: f64, rho_s: f64 },
}

impl LrSchedule {
    pub fn eta(&self, round: usize) -> f64 {
        match *self {
            LrSchedule::Constant { eta } => eta,
            LrSchedule::Theorem1 { rho_c, rho_s } => theorem1_step(round, rho_c, rho_s),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { eta } if !(eta > 0.0 && eta.is_finite()) => {
                Err(config(format!("constant learning rate must be positive, got {eta}")))
            }
            LrSchedule::Theorem1 { rho_c, rho_s } if !(rho_c > 0.0 && rho_s >= rho_c && rho_s.is_finite()) => {
                Err(config(format!("theorem1 schedule needs rho_s >= rho_c > 0, got {rho_c}, {rho_s}")))
            }
            _ => Ok(()),
        }
    }
}

fn default_batch_size() -> usize {
    64
}

fn default_eval_every() -> usize {
    5
}

fn default_stragglers() -> StragglerModel {
    StragglerModel::FixedFraction { q: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    pub clients: usize,
    pub rounds: usize,
    pub aggregator: AggregatorKind,
    #[serde(default = "default_stragglers")]
    pub stragglers: StragglerModel,
    pub lr: LrSchedule,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Evaluate every this many rounds and after the last; 0 disables
    /// per-round evaluation.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.clients == 0 {
            return Err(config("clients must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(config("rounds must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be at least 1"));
        }
        self.lr.validate()?;
        self.resolved_stragglers().validate(self.model.num_layers())?;
        match &self.data {
            DataSource::Mnist { .. } => {
                if self.model.input_dim() != 784 || self.model.output_dim() != 10 {
                    return Err(config("MNIST models need 784 inputs and 10 outputs"));
                }
            }
            DataSource::Synthetic { task, dim, .. } => {
                let expected = match task {
                    TaskKind::Linear => ModelKind::LinearL2,
                    TaskKind::Logistic => ModelKind::LogisticL2,
                };
                if self.model.kind != expected {
                    return Err(config(format!("a {task:?} synthetic task needs a {expected:?} model")));
                }
                if self.model.input_dim() != *dim {
                    return Err(config(format!(
                        "model input dimension {} does not match synthetic dim {dim}",
                        self.model.input_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Straggler model with deadline costs filled in from the architecture.
    pub fn resolved_stragglers(&self) -> StragglerModel {
        self.stragglers.resolve(&self.model.block_sizes())
    }

    pub fn data_seed(&self) -> u64 {
        match self.data {
            DataSource::Mnist { seed, .. } | DataSource::Synthetic { seed, .. } => seed.unwrap_or(self.seed),
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataSource::Synthetic { task, n_per_client, dim, heterogeneity, noise_sd, .. } => Some(SyntheticSpec {
                task: *task,
                clients: self.clients,
                n_per_client: *n_per_client,
                dim: *dim,
                heterogeneity: *heterogeneity,
                noise_sd: *noise_sd,
                seed: self.data_seed(),
            }),
            DataSource::Mnist { .. } => None,
        }
    }
}
