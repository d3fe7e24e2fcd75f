//! Server update rules.
//!
//! Clients send gradient blocks; the server rebuilds each participant's local
//! block `w^l - eta * g_u^l` and averages those in client order. All rules
//! share that averaging, so they agree bitwise wherever they coincide.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::nn::{LayerwiseParams, PartialGradient};
use crate::scalar::Scalar;
use crate::straggler::StragglerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unbiasing {
    /// `p_l` derived from the straggler model.
    #[default]
    FromLaw,
    /// `p_l = 0` for every layer.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AggregatorKind {
    VanillaFa,
    DropStragglers,
    Salf {
        #[serde(default)]
        unbiasing: Unbiasing,
    },
    AsyncDelayed,
}

impl AggregatorKind {
    pub fn salf() -> Self {
        AggregatorKind::Salf { unbiasing: Unbiasing::FromLaw }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::VanillaFa => "vanilla-fa",
            AggregatorKind::DropStragglers => "drop-stragglers",
            AggregatorKind::Salf { unbiasing: Unbiasing::FromLaw } => "salf",
            AggregatorKind::Salf { unbiasing: Unbiasing::Zero } => "salf-p0",
            AggregatorKind::AsyncDelayed => "async-delayed",
        }
    }
}

/// `p_l`, the probability that layer `l` gets no update in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasingConstants<T> {
    pub p: Vec<T>,
}

impl<T: Scalar> UnbiasingConstants<T> {
    pub fn zero(num_layers: usize) -> Self {
        Self { p: vec![T::zero(); num_layers] }
    }

    /// `(1 - l/(L+1))^U`, evaluated in `T`.
    pub fn uniform(clients: usize, num_layers: usize) -> Self {
        let denom = T::from_count(num_layers + 1);
        let p = (1..=num_layers)
            .map(|l| {
                let base = T::from_count(num_layers + 1 - l) / denom;
                (0..clients).fold(T::one(), |acc, _| acc * base)
            })
            .collect();
        Self { p }
    }

    fn check(self) -> Result<Self> {
        if let Some(l) = self.p.iter().position(|&p| p >= T::one()) {
            return Err(config(format!("layer {} can never be updated (p = 1)", l + 1)));
        }
        Ok(self)
    }
}

/// Unbiasing constants for a depth law: exact for uniform depths, otherwise
/// `P[d > l]^U` assuming independent clients.
pub fn compute_p<T: Scalar>(law: &StragglerModel, clients: usize, num_layers: usize) -> Result<UnbiasingConstants<T>> {
    if clients == 0 || num_layers == 0 {
        return Err(config("need at least one client and one layer"));
    }
    law.validate(num_layers)?;
    let consts = match law {
        StragglerModel::UniformDepth => UnbiasingConstants::uniform(clients, num_layers),
        _ => {
            let p = (1..=num_layers)
                .map(|l| {
                    let v = law.survival(l, clients, num_layers).powi(clients as i32);
                    T::from_f64(v).ok_or_else(|| Error::Numeric(format!("p_{l} = {v} not representable")))
                })
                .collect::<Result<_>>()?;
            UnbiasingConstants { p }
        }
    };
    consts.check()
}

/// Mean of `w - eta * g` over the given gradient blocks, in order.
fn mean_local<'a, T: Scalar>(w: &[T], grads: impl Iterator<Item = &'a [T]>, eta: T) -> Option<Vec<T>> {
    let mut acc = vec![T::zero(); w.len()];
    let mut count = 0usize;
    for g in grads {
        for ((a, &wi), &gi) in acc.iter_mut().zip(w).zip(g) {
            *a += wi - eta * gi;
        }
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let c = T::from_count(count);
    for a in &mut acc {
        *a = *a / c;
    }
    Some(acc)
}

fn check_all<T: Scalar>(params: &LayerwiseParams<T>, grads: &[PartialGradient<T>]) -> Result<()> {
    grads.iter().try_for_each(|g| g.check_against(params))
}

/// Layer-wise mean of local blocks over every gradient covering the layer;
/// layers nobody covers keep their value.
fn layerwise_mean<T: Scalar>(params: &LayerwiseParams<T>, grads: &[&PartialGradient<T>], eta: T) -> Result<LayerwiseParams<T>> {
    let blocks = (0..params.num_layers())
        .map(|i| {
            let w = params.block(i);
            mean_local(w, grads.iter().filter_map(|g| g.layer(i)), eta).unwrap_or_else(|| w.to_vec())
        })
        .collect();
    LayerwiseParams::new(blocks)
}

/// FedAvg over full gradients from every client.
pub fn aggregate_vanilla<T: Scalar>(params: &LayerwiseParams<T>, grads: &[PartialGradient<T>], eta: T) -> Result<LayerwiseParams<T>> {
    if grads.is_empty() {
        return Err(Error::Contract("vanilla aggregation needs at least one gradient".into()));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_full()) {
        return Err(Error::Contract(format!("vanilla aggregation got a partial gradient of depth {}", g.depth())));
    }
    check_all(params, grads)?;
    layerwise_mean(params, &grads.iter().collect::<Vec<_>>(), eta)
}

/// FedAvg over the clients that finished the full pass; others are ignored.
pub fn aggregate_drop<T: Scalar>(params: &LayerwiseParams<T>, grads: &[PartialGradient<T>], eta: T) -> Result<LayerwiseParams<T>> {
    check_all(params, grads)?;
    let done: Vec<_> = grads.iter().filter(|g| g.is_full()).collect();
    if done.is_empty() {
        return Ok(params.clone());
    }
    layerwise_mean(params, &done, eta)
}

/// Layer-wise aggregation with `p_l` debiasing.
pub fn aggregate_salf<T: Scalar>(
    params: &LayerwiseParams<T>,
    grads: &[PartialGradient<T>],
    eta: T,
    p: &UnbiasingConstants<T>,
) -> Result<LayerwiseParams<T>> {
    if p.p.len() != params.num_layers() {
        return Err(Error::Shape(format!(
            "{} unbiasing constants for {} layers",
            p.p.len(),
            params.num_layers()
        )));
    }
    if let Some(l) = p.p.iter().position(|&v| v >= T::one() || v < T::zero()) {
        return Err(config(format!("unbiasing constant for layer {} outside [0, 1)", l + 1)));
    }
    check_all(params, grads)?;
    let blocks = (0..params.num_layers())
        .map(|i| {
            let w = params.block(i);
            let Some(mean) = mean_local(w, grads.iter().filter_map(|g| g.layer(i)), eta) else {
                return w.to_vec();
            };
            let pl = p.p[i];
            if pl == T::zero() {
                return mean;
            }
            let scale = T::one() - pl;
            mean.iter().zip(w).map(|(&m, &wi)| (m - pl * wi) / scale).collect()
        })
        .collect();
    LayerwiseParams::new(blocks)
}

/// A straggler's truncated update waiting for its release round.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingAsyncUpdate<T> {
    pub client: usize,
    pub submitted: usize,
    /// `submitted + 2 * depth`.
    pub release_round: usize,
    pub grad: PartialGradient<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsyncQueue<T> {
    pending: Vec<PendingAsyncUpdate<T>>,
}

impl<T> Default for AsyncQueue<T> {
    fn default() -> Self {
        Self { pending: Vec::new() }
    }
}

impl<T> AsyncQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending(&self) -> &[PendingAsyncUpdate<T>] {
        &self.pending
    }
}

/// Completers are averaged now; each partial update (depth `d` in `2..=L`)
/// joins the average of round `round + 2d`, applied to the model of that
/// round with that round's step size. Empty updates are discarded.
///
/// `grads[u]` belongs to client `u`.
pub fn aggregate_async<T: Scalar>(
    params: &LayerwiseParams<T>,
    grads: &[PartialGradient<T>],
    eta: T,
    round: usize,
    queue: AsyncQueue<T>,
) -> Result<(LayerwiseParams<T>, AsyncQueue<T>)> {
    check_all(params, grads)?;
    let (released, mut kept): (Vec<_>, Vec<_>) = queue.pending.into_iter().partition(|e| e.release_round <= round);
    let mut contributors: Vec<&PartialGradient<T>> = grads.iter().filter(|g| g.is_full()).collect();
    contributors.extend(released.iter().map(|e| &e.grad));
    for e in &released {
        e.grad.check_against(params)?;
    }
    let next = layerwise_mean(params, &contributors, eta)?;
    for (client, g) in grads.iter().enumerate() {
        if g.depth() > 1 && g.depth() <= g.num_layers() {
            kept.push(PendingAsyncUpdate { client, submitted: round, release_round: round + 2 * g.depth(), grad: g.clone() });
        }
    }
    Ok((next, AsyncQueue { pending: kept }))
}
