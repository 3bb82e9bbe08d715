//! Subject-level train/validation/test folds.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 8, val: 1, test: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    /// Errors if any subject appears in two splits or twice in one.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Data(format!("subject {id} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Shuffles `ids` with `seed`, then for fold `f` takes the test block at
/// offset `f * (n / k)` of the shuffled order, the validation block right
/// after it (cyclically) and trains on the rest.
pub fn make_folds(ids: &[String], k: usize, ratios: SplitRatios, seed: u64) -> Result<FoldPlan> {
    let n = ids.len();
    if k == 0 {
        return Err(Error::Config("fold count must be at least 1".into()));
    }
    if ratios.train == 0 || ratios.val == 0 || ratios.test == 0 {
        return Err(Error::Config("split ratios must all be positive".into()));
    }
    if n < k.max(3) {
        return Err(Error::Data(format!("{n} subjects is too few for {k} folds with train/val/test splits")));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != n {
        return Err(Error::Data("duplicate subject ids".into()));
    }
    let sum = (ratios.train + ratios.val + ratios.test) as f64;
    let part = |r: usize| ((n as f64 * r as f64 / sum).round() as usize).max(1);
    let (n_val, n_test) = (part(ratios.val), part(ratios.test));
    if n_val + n_test >= n {
        return Err(Error::Data(format!("{n} subjects leave no training subjects")));
    }

    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let step = n / k;
    let folds = (0..k)
        .map(|f| {
            let pick = |start: usize, len: usize| -> Vec<String> {
                (start..start + len).map(|i| order[i % n].clone()).collect()
            };
            let off = f * step;
            let test = pick(off, n_test);
            let val = pick(off + n_test, n_val);
            let train = pick(off + n_test + n_val, n - n_test - n_val);
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn ten_subjects_five_folds() {
        let plan = make_folds(&ids(10), 5, SplitRatios::default(), 0).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (8, 1, 1));
        }
        let tests: HashSet<&String> = plan.folds.iter().flat_map(|f| &f.test).collect();
        assert_eq!(tests.len(), 5);
    }

    #[test]
    fn too_few_subjects() {
        assert!(make_folds(&ids(4), 5, SplitRatios::default(), 0).is_err());
        assert!(make_folds(&ids(2), 1, SplitRatios::default(), 0).is_err());
        assert!(make_folds(&ids(3), 1, SplitRatios::default(), 0).is_ok());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_folds(&ids(12), 3, SplitRatios::default(), 5).unwrap();
        assert_eq!(a, make_folds(&ids(12), 3, SplitRatios::default(), 5).unwrap());
        assert_ne!(a, make_folds(&ids(12), 3, SplitRatios::default(), 6).unwrap());
    }

    proptest! {
        #[test]
        fn folds_are_leakage_free(n in 3usize..40, k in 1usize..8, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let plan = make_folds(&ids(n), k, SplitRatios::default(), seed).unwrap();
            let all: HashSet<String> = ids(n).into_iter().collect();
            for f in &plan.folds {
                let (tr, va, te): (HashSet<_>, HashSet<_>, HashSet<_>) =
                    (f.train.iter().collect(), f.val.iter().collect(), f.test.iter().collect());
                prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
                prop_assert_eq!(tr.len() + va.len() + te.len(), n);
                prop_assert!(f.train.iter().chain(&f.val).chain(&f.test).all(|s| all.contains(s)));
                prop_assert!(f.check_disjoint().is_ok());
            }
            let tests: HashSet<&String> = plan.folds.iter().flat_map(|f| &f.test).collect();
            prop_assert!(tests.len() >= k.min(n));
        }
    }
}
