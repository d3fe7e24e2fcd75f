//! Per-client, per-round backpropagation depths.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::rng::{stream, Purpose};

/// Log-uniform client speed on `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedLaw {
    pub min: f64,
    pub max: f64,
}

impl Default for SpeedLaw {
    fn default() -> Self {
        Self { min: 1.0, max: 1.0 }
    }
}

impl SpeedLaw {
    fn cdf(&self, s: f64) -> f64 {
        if self.min == self.max {
            return if s >= self.min { 1.0 } else { 0.0 };
        }
        ((s.ln() - self.min.ln()) / (self.max.ln() - self.min.ln())).clamp(0.0, 1.0)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            return self.min;
        }
        rng.random_range(self.min.ln()..self.max.ln()).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StragglerModel {
    /// Every depth i.i.d. uniform on `1..=L+1`.
    UniformDepth,
    /// A fresh `ceil(qU)`-subset of clients per round draws uniform depths;
    /// everyone else has depth 1.
    FixedFraction { q: f64 },
    /// Depth is the earliest layer whose cumulative backward cost (from the
    /// output layer down) fits within `t_max` at the client's speed.
    /// Empty `layer_costs` means "proportional to parameter counts", filled
    /// in by [`StragglerModel::resolve`].
    Deadline {
        t_max: f64,
        #[serde(default)]
        layer_costs: Vec<f64>,
        #[serde(default)]
        speed: SpeedLaw,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthDraw {
    pub round: usize,
    pub num_layers: usize,
    /// 1-based depth per client; `L + 1` means nothing was computed.
    pub depths: Vec<usize>,
}

/// Layer costs proportional to parameter counts, normalized to sum 1.
pub fn costs_from_block_sizes(block_sizes: &[usize]) -> Vec<f64> {
    let total: usize = block_sizes.iter().sum();
    block_sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

fn stragglers_for(q: f64, clients: usize) -> usize {
    ((q * clients as f64 - 1e-9).ceil().max(0.0) as usize).min(clients)
}

impl StragglerModel {
    /// Fills deadline layer costs from the model's block sizes if unset.
    pub fn resolve(&self, block_sizes: &[usize]) -> Self {
        match self {
            StragglerModel::Deadline { t_max, layer_costs, speed } if layer_costs.is_empty() => StragglerModel::Deadline {
                t_max: *t_max,
                layer_costs: costs_from_block_sizes(block_sizes),
                speed: *speed,
            },
            other => other.clone(),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match self {
            StragglerModel::UniformDepth => Ok(()),
            StragglerModel::FixedFraction { q } => {
                if !(0.0..=1.0).contains(q) {
                    return Err(config(format!("straggler fraction q = {q} outside [0, 1]")));
                }
                Ok(())
            }
            StragglerModel::Deadline { t_max, layer_costs, speed } => {
                if !(*t_max > 0.0) || !t_max.is_finite() {
                    return Err(config("deadline t_max must be positive and finite"));
                }
                if layer_costs.len() != num_layers {
                    return Err(config(format!(
                        "deadline needs {num_layers} layer costs, got {}",
                        layer_costs.len()
                    )));
                }
                if layer_costs.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
                    return Err(config("layer costs must be positive and finite"));
                }
                if !(speed.min > 0.0) || !(speed.max >= speed.min) || !speed.max.is_finite() {
                    return Err(config("speed law needs 0 < min <= max"));
                }
                Ok(())
            }
        }
    }

    /// Per-client probability that layer `l` (1-based) is not reached,
    /// `P[d > l]`.
    pub fn survival(&self, l: usize, clients: usize, num_layers: usize) -> f64 {
        let uniform_tail = 1.0 - l as f64 / (num_layers + 1) as f64;
        match self {
            StragglerModel::UniformDepth => uniform_tail,
            StragglerModel::FixedFraction { q } => {
                stragglers_for(*q, clients) as f64 / clients as f64 * uniform_tail
            }
            StragglerModel::Deadline { t_max, layer_costs, speed } => {
                if l > num_layers {
                    return 0.0;
                }
                // d > l  <=>  cost(l..=L) / speed > t_max  <=>  speed < cost / t_max
                let cost: f64 = layer_costs[l - 1..].iter().sum();
                speed.cdf_strict(cost / t_max)
            }
        }
    }

    fn deadline_depth(t_max: f64, layer_costs: &[f64], speed: f64) -> usize {
        let l = layer_costs.len();
        let budget = t_max * speed * (1.0 + 1e-12);
        let mut cum = 0.0;
        let mut depth = l + 1;
        for d in (1..=l).rev() {
            cum += layer_costs[d - 1];
            if cum > budget {
                break;
            }
            depth = d;
        }
        depth
    }
}

impl SpeedLaw {
    /// `P[speed < s]`; the law is continuous unless `min == max`.
    fn cdf_strict(&self, s: f64) -> f64 {
        if self.min == self.max {
            return if self.min * (1.0 + 1e-12) < s { 1.0 } else { 0.0 };
        }
        self.cdf(s)
    }
}

/// Depths for round `round`; a pure function of its arguments.
pub fn draw_depths(model: &StragglerModel, clients: usize, num_layers: usize, round: usize, seed: u64) -> Result<DepthDraw> {
    if clients == 0 || num_layers == 0 {
        return Err(config("need at least one client and one layer"));
    }
    model.validate(num_layers)?;
    let uniform = |u: usize| stream(seed, Purpose::Depth, round as u64, u as u64).random_range(1..=num_layers + 1);
    let depths = match model {
        StragglerModel::UniformDepth => (0..clients).map(uniform).collect(),
        StragglerModel::FixedFraction { q } => {
            let k = stragglers_for(*q, clients);
            let mut depths = vec![1; clients];
            let mut rng = stream(seed, Purpose::StragglerSubset, round as u64, 0);
            for u in sample(&mut rng, clients, k) {
                depths[u] = uniform(u);
            }
            depths
        }
        StragglerModel::Deadline { t_max, layer_costs, speed } => (0..clients)
            .map(|u| {
                let s = speed.sample(&mut stream(seed, Purpose::Speed, round as u64, u as u64));
                StragglerModel::deadline_depth(*t_max, layer_costs, s)
            })
            .collect(),
    };
    Ok(DepthDraw { round, num_layers, depths })
}

impl DepthDraw {
    /// `|U^l|` for `l = 1..=L`.
    pub fn participant_counts(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_layers + 2];
        for &d in &self.depths {
            hist[d] += 1;
        }
        (1..=self.num_layers)
            .scan(0, |acc, l| {
                *acc += hist[l];
                Some(*acc)
            })
            .collect()
    }

    /// Number of clients that did not finish the full backward pass.
    pub fn straggler_count(&self) -> usize {
        self.depths.iter().filter(|&&d| d > 1).count()
    }
}

/// `U^l = {u : d_u <= l}` for `l = 1..=L`, as 0-based client indices.
pub fn participant_sets(draw: &DepthDraw) -> Vec<Vec<usize>> {
    (1..=draw.num_layers)
        .map(|l| (0..draw.depths.len()).filter(|&u| draw.depths[u] <= l).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_sets() {
        let draw = DepthDraw { round: 1, num_layers: 4, depths: vec![1, 3, 5] };
        assert_eq!(participant_sets(&draw), vec![vec![0], vec![0], vec![0, 1], vec![0, 1]]);
        assert_eq!(draw.participant_counts(), vec![1, 1, 2, 2]);
        let none = DepthDraw { round: 1, num_layers: 2, depths: vec![3, 3] };
        assert!(participant_sets(&none).iter().all(Vec::is_empty));
    }

    #[test]
    fn zero_fraction_means_full_updates() {
        let d = draw_depths(&StragglerModel::FixedFraction { q: 0.0 }, 30, 3, 7, 1).unwrap();
        assert!(d.depths.iter().all(|&x| x == 1));
    }

    #[test]
    fn fraction_subset_size() {
        assert_eq!(stragglers_for(0.9, 30), 27);
        assert_eq!(stragglers_for(0.3, 30), 9);
        assert_eq!(stragglers_for(0.7, 30), 21);
        assert_eq!(stragglers_for(0.25, 10), 3);
        assert_eq!(stragglers_for(1.0, 10), 10);
    }

    #[test]
    fn generous_deadline_has_no_stragglers() {
        let m = StragglerModel::Deadline { t_max: 1.0, layer_costs: costs_from_block_sizes(&[7, 13, 3]), speed: SpeedLaw::default() };
        for round in 1..20 {
            assert!(draw_depths(&m, 8, 3, round, 5).unwrap().depths.iter().all(|&d| d == 1));
        }
        assert_eq!(m.survival(1, 8, 3), 0.0);
    }

    #[test]
    fn deadline_depth_is_minimal_fitting_layer() {
        let costs = [0.5, 0.3, 0.2];
        assert_eq!(StragglerModel::deadline_depth(0.1, &costs, 1.0), 4);
        assert_eq!(StragglerModel::deadline_depth(0.2, &costs, 1.0), 3);
        assert_eq!(StragglerModel::deadline_depth(0.6, &costs, 1.0), 2);
        assert_eq!(StragglerModel::deadline_depth(0.6, &costs, 2.0), 1);
    }

    #[test]
    fn validation() {
        assert!(StragglerModel::FixedFraction { q: 1.5 }.validate(2).is_err());
        let m = StragglerModel::Deadline { t_max: 0.0, layer_costs: vec![1.0], speed: SpeedLaw::default() };
        assert!(m.validate(1).is_err());
        let m = StragglerModel::Deadline { t_max: 1.0, layer_costs: vec![], speed: SpeedLaw::default() };
        assert!(m.validate(2).is_err());
        assert_eq!(m.resolve(&[1, 3]), StragglerModel::Deadline { t_max: 1.0, layer_costs: vec![0.25, 0.75], speed: SpeedLaw::default() });
    }
}
