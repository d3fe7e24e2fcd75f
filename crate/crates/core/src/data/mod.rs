//! Datasets and their federated partitioning.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_mnist, parse_idx_images, parse_idx_labels, read_idx_images, read_idx_labels, MnistData, MNIST_FILES};
pub use partition::{partition_indices, partition_uniform};
pub use synthetic::{make_synthetic_convex, SyntheticSpec, TaskKind};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Supervision attached to each sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    /// Class indices in `0..num_classes`.
    Classes { labels: Vec<usize>, num_classes: usize },
    /// Real-valued targets (regression values, or 0/1 for logistic models).
    Values(Vec<T>),
}

impl<T: Copy> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum TargetView<'a, T> {
    Classes(&'a [usize], usize),
    Values(&'a [T]),
}

/// Borrowed contiguous rows of a dataset.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Batch<'a, T> {
    pub x: &'a [T],
    pub n: usize,
    pub dim: usize,
    pub targets: TargetView<'a, T>,
}

/// Row-major feature matrix with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    dim: usize,
    features: Vec<T>,
    targets: Targets<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(dim: usize, features: Vec<T>, targets: Targets<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if features.len() != dim * targets.len() {
            return Err(Error::Shape(format!(
                "{} features do not form {} rows of dimension {dim}",
                features.len(),
                targets.len()
            )));
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(bad) = labels.iter().find(|&&c| c >= *num_classes) {
                return Err(Error::Shape(format!("label {bad} outside 0..{num_classes}")));
            }
        }
        Ok(Self { dim, features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn targets(&self) -> &Targets<T> {
        &self.targets
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Values(_) => None,
        }
    }

    /// New dataset holding rows `idx` in the given order (repeats allowed).
    pub fn gather(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            features,
            targets: self.targets.gather(idx),
        }
    }

    pub(crate) fn view(&self, range: std::ops::Range<usize>) -> Batch<'_, T> {
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => TargetView::Classes(&labels[range.clone()], *num_classes),
            Targets::Values(v) => TargetView::Values(&v[range.clone()]),
        };
        Batch {
            x: &self.features[range.start * self.dim..range.end * self.dim],
            n: range.len(),
            dim: self.dim,
            targets,
        }
    }

    pub(crate) fn as_batch(&self) -> Batch<'_, T> {
        self.view(0..self.len())
    }

    /// Contiguous rows `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let idx: Vec<usize> = range.collect();
        self.gather(&idx)
    }

    /// Row-wise concatenation of datasets sharing dimension and target kind.
    pub fn concat(parts: &[Dataset<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero datasets".into()))?;
        let mut features = Vec::new();
        let mut targets = match &first.targets {
            Targets::Classes { num_classes, .. } => Targets::Classes {
                labels: Vec::new(),
                num_classes: *num_classes,
            },
            Targets::Values(_) => Targets::Values(Vec::new()),
        };
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::Shape("datasets differ in feature dimension".into()));
            }
            features.extend_from_slice(&p.features);
            match (&mut targets, &p.targets) {
                (Targets::Classes { labels, num_classes }, Targets::Classes { labels: l, num_classes: k })
                    if num_classes == k =>
                {
                    labels.extend_from_slice(l)
                }
                (Targets::Values(v), Targets::Values(w)) => v.extend_from_slice(w),
                _ => return Err(Error::Shape("datasets differ in target kind".into())),
            }
        }
        Ok(Self { dim: first.dim, features, targets })
    }
}

/// `U` equally sized client shards.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset<T> {
    shards: Vec<Dataset<T>>,
}

impl<T: Real> FederatedDataset<T> {
    pub fn new(shards: Vec<Dataset<T>>) -> Result<Self> {
        let first = shards
            .first()
            .ok_or_else(|| crate::error::config("federated dataset needs at least one shard"))?;
        for s in &shards {
            if s.len() != first.len() {
                return Err(crate::error::config("client shards must have equal cardinality"));
            }
            if s.dim() != first.dim() {
                return Err(Error::Shape("client shards differ in feature dimension".into()));
            }
        }
        if first.is_empty() {
            return Err(crate::error::config("client shards must be nonempty"));
        }
        Ok(Self { shards })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[Dataset<T>] {
        &self.shards
    }

    pub fn shard(&self, u: usize) -> &Dataset<T> {
        &self.shards[u]
    }

    pub fn shard_len(&self) -> usize {
        self.shards[0].len()
    }

    pub fn feature_dim(&self) -> usize {
        self.shards[0].dim()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.shards[0].num_classes()
    }

    /// All client data as one dataset, shard by shard.
    pub fn union(&self) -> Dataset<T> {
        Dataset::concat(&self.shards).expect("shards share a layout")
    }
}
