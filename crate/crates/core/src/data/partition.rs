use rand::seq::SliceRandom;

use super::{Dataset, FederatedDataset};
use crate::error::{config, Result};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;

/// Random balanced split of `0..n` into `clients` disjoint index sets.
///
/// The `n % clients` samples left over after shuffling are dropped so that
/// every shard has exactly `n / clients` members.
pub fn partition_indices(n: usize, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(config("number of clients must be positive"));
    }
    if clients > n {
        return Err(config(format!("cannot split {n} samples across {clients} clients")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Purpose::Partition, n as u64, clients as u64));
    let per = n / clients;
    Ok(idx[..per * clients].chunks(per).map(<[usize]>::to_vec).collect())
}

/// IID partition of `dataset` into `clients` equally sized shards.
pub fn partition_uniform<T: Real>(dataset: &Dataset<T>, clients: usize, seed: u64) -> Result<FederatedDataset<T>> {
    let parts = partition_indices(dataset.len(), clients, seed)?;
    FederatedDataset::new(parts.iter().map(|p| dataset.gather(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;
    use proptest::prelude::*;

    #[test]
    fn too_many_clients() {
        assert!(partition_indices(3, 4, 0).is_err());
        assert!(partition_indices(3, 0, 0).is_err());
    }

    #[test]
    fn mnist_sized_split() {
        let parts = partition_indices(60_000, 30, 1).unwrap();
        assert_eq!(parts.len(), 30);
        assert!(parts.iter().all(|p| p.len() == 2000));
    }

    #[test]
    fn single_client_is_a_permutation() {
        let d = Dataset::<f64>::new(1, (0..10).map(f64::from).collect(), Targets::Values((0..10).map(f64::from).collect())).unwrap();
        let fed = partition_uniform(&d, 1, 5).unwrap();
        let mut got: Vec<f64> = fed.shard(0).features().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, d.features());
    }

    proptest! {
        #[test]
        fn partition_is_bijection_onto_kept(n in 1usize..400, u in 1usize..40, seed in any::<u64>()) {
            prop_assume!(u <= n);
            let parts = partition_indices(n, u, seed).unwrap();
            prop_assert_eq!(parts.len(), u);
            prop_assert!(parts.iter().all(|p| p.len() == n / u));
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            let before = all.len();
            all.dedup();
            prop_assert_eq!(all.len(), before);
            prop_assert_eq!(before, n - n % u);
            prop_assert_eq!(parts, partition_indices(n, u, seed).unwrap());
        }
    }
}
