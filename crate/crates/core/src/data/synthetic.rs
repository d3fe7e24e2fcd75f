use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, FederatedDataset, Targets};
use crate::error::{config, Result};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Linear,
    Logistic,
}

/// Per-client linear (or thresholded linear) data with a controllable gap
/// between the clients' ground-truth coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub clients: usize,
    pub n_per_client: usize,
    pub dim: usize,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub noise_sd: f64,
    pub seed: u64,
}

fn normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.n_per_client == 0 || self.dim == 0 {
            return Err(config("synthetic task needs positive clients, n_per_client and dim"));
        }
        if !(self.heterogeneity >= 0.0) || !(self.noise_sd >= 0.0) {
            return Err(config("heterogeneity and noise_sd must be nonnegative"));
        }
        Ok(())
    }

    /// Shared coefficients and each client's shifted coefficients.
    pub fn ground_truth(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let theta0 = normal_vec(&mut stream(self.seed, Purpose::Synthetic, 0, 0), self.dim);
        let thetas = (0..self.clients)
            .map(|u| {
                let mut delta = normal_vec(&mut stream(self.seed, Purpose::Synthetic, 1, u as u64), self.dim);
                let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                delta.iter_mut().for_each(|d| *d /= norm);
                theta0.iter().zip(&delta).map(|(t, d)| t + self.heterogeneity * d).collect()
            })
            .collect();
        (theta0, thetas)
    }
}

/// Generates `clients` shards of `y = x·θ_u + noise` with standard normal
/// features; logistic tasks threshold the response at zero into `{0, 1}`.
pub fn make_synthetic_convex<T: Real>(spec: &SyntheticSpec) -> Result<FederatedDataset<T>> {
    spec.validate()?;
    let (_, thetas) = spec.ground_truth();
    let shards = thetas
        .iter()
        .enumerate()
        .map(|(u, theta)| {
            let mut rng = stream(spec.seed, Purpose::Synthetic, 2, u as u64);
            let mut features = Vec::with_capacity(spec.n_per_client * spec.dim);
            let mut ys = Vec::with_capacity(spec.n_per_client);
            for _ in 0..spec.n_per_client {
                let x = normal_vec(&mut rng, spec.dim);
                let eps: f64 = rng.sample(StandardNormal);
                let y = x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + spec.noise_sd * eps;
                ys.push(match spec.task {
                    TaskKind::Linear => T::lit(y),
                    TaskKind::Logistic => {
                        if y > 0.0 {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                });
                features.extend(x.into_iter().map(T::lit));
            }
            Dataset::new(spec.dim, features, Targets::Values(ys))
        })
        .collect::<Result<Vec<_>>>()?;
    FederatedDataset::new(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: f64) -> SyntheticSpec {
        SyntheticSpec { task: TaskKind::Linear, clients: 2, n_per_client: 50, dim: 3, heterogeneity: h, noise_sd: 0.1, seed: 1 }
    }

    #[test]
    fn deterministic() {
        let a = make_synthetic_convex::<f64>(&spec(0.5)).unwrap();
        let b = make_synthetic_convex::<f64>(&spec(0.5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_clients(), 2);
        assert_eq!(a.shard_len(), 50);
    }

    #[test]
    fn zero_heterogeneity_shares_coefficients() {
        let (theta0, thetas) = spec(0.0).ground_truth();
        assert!(thetas.iter().all(|t| t == &theta0));
        let (theta0, thetas) = spec(1.0).ground_truth();
        for t in &thetas {
            let dist: f64 = t.iter().zip(&theta0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!((dist - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_labels_are_binary() {
        let mut s = spec(0.3);
        s.task = TaskKind::Logistic;
        let d = make_synthetic_convex::<f64>(&s).unwrap();
        match d.shard(0).targets() {
            Targets::Values(v) => assert!(v.iter().all(|&y| y == 0.0 || y == 1.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn rejects_empty_task() {
        let mut s = spec(0.0);
        s.dim = 0;
        assert!(make_synthetic_convex::<f64>(&s).is_err());
    }
}
