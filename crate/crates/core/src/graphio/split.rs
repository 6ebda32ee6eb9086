use serde::{Deserialize, Serialize};

use super::{GraphDataset, ENV_ID, ENV_OOD};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Train/validation/test node sets plus an optional OOD test set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default)]
    pub ood_test: Option<Vec<usize>>,
}

/// Ratios used for the standard node-classification protocol.
pub const STANDARD_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);
/// Ratios used for the in-distribution part of OOD datasets.
pub const OOD_RATIOS: (f64, f64, f64) = (0.5, 0.25, 0.25);

impl Split {
    /// Checks bounds and pairwise disjointness.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let sets = [
            ("train", Some(&self.train)),
            ("val", Some(&self.val)),
            ("test", Some(&self.test)),
            ("ood_test", self.ood_test.as_ref()),
        ];
        for (name, set) in sets {
            for &i in set.into_iter().flatten() {
                if i >= n {
                    return Err(Error::Structural(format!("{name} index {i} >= n={n}")));
                }
                if seen[i] {
                    return Err(Error::Structural(format!("node {i} appears in two splits")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

fn floor_count(ratio: f64, n: usize) -> usize {
    // Guards against 0.6 * 10 landing on 5.999...
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Random split of `indices` with sizes `⌊ratio·n⌋`; the rounding remainder
/// of the covered total goes to train.
pub fn split_indices(
    indices: &[usize],
    ratios: (f64, f64, f64),
    rng: &mut SeededRng,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total_ratio = tr + va + te;
    if total_ratio > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total_ratio} > 1")));
    }
    let n = indices.len();
    let n_val = floor_count(va, n);
    let n_test = floor_count(te, n);
    let covered = floor_count(total_ratio, n);
    let n_train = covered.saturating_sub(n_val + n_test);

    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..n_train + n_val + n_test].to_vec();
    Ok((train, val, test))
}

/// Split of all `n` nodes.
pub fn make_split(n: usize, ratios: (f64, f64, f64), rng: &mut SeededRng) -> Result<Split> {
    let all: Vec<usize> = (0..n).collect();
    let (train, val, test) = split_indices(&all, ratios, rng)?;
    Ok(Split {
        train,
        val,
        test,
        ood_test: None,
    })
}

/// Split honoring the dataset's environments: in-distribution nodes are
/// split with `ratios`, shifted nodes all go to `ood_test`. Datasets without
/// environments fall back to [`make_split`].
pub fn make_env_split(ds: &GraphDataset, ratios: (f64, f64, f64), rng: &mut SeededRng) -> Result<Split> {
    if ds.environment.is_none() {
        return make_split(ds.n(), ratios, rng);
    }
    let id_nodes = ds.nodes_in_env(ENV_ID);
    let ood_nodes = ds.nodes_in_env(ENV_OOD);
    let (train, val, test) = split_indices(&id_nodes, ratios, rng)?;
    Ok(Split {
        train,
        val,
        test,
        ood_test: (!ood_nodes.is_empty()).then_some(ood_nodes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_ratio_sizes() {
        let s = make_split(10, STANDARD_RATIOS, &mut SeededRng::new(0)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let s = make_split(4, OOD_RATIOS, &mut SeededRng::new(0)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 1, 1));
    }

    #[test]
    fn remainder_goes_to_train() {
        let s = make_split(11, STANDARD_RATIOS, &mut SeededRng::new(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 2));
    }

    #[test]
    fn same_seed_same_split() {
        let a = make_split(50, STANDARD_RATIOS, &mut SeededRng::new(9)).unwrap();
        let b = make_split(50, STANDARD_RATIOS, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversubscribed_ratios_are_config_errors() {
        let err = make_split(10, (0.6, 0.3, 0.2), &mut SeededRng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn splits_partition_without_overlap(
            n in 1usize..300,
            tr in 0.05f64..0.6,
            va in 0.05f64..0.2,
            te in 0.05f64..0.2,
            seed in any::<u64>(),
        ) {
            let s = make_split(n, (tr, va, te), &mut SeededRng::new(seed)).unwrap();
            prop_assert!(s.validate(n).is_ok());
            prop_assert_eq!(s.val.len(), (va * n as f64 + 1e-9).floor() as usize);
            prop_assert_eq!(s.test.len(), (te * n as f64 + 1e-9).floor() as usize);
        }
    }
}
