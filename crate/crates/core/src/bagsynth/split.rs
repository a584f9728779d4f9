//! Label-stratified k-fold splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions (into the dataset) of one fold's training and validation bags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffle each label group, lay the groups end to end and deal positions
/// round-robin into `folds` validation sets.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if labels.len() < folds {
        return Err(Error::Data(format!("{} bags cannot fill {folds} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order = Vec::with_capacity(labels.len());
    for c in 0..classes {
        let mut group: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        group.shuffle(&mut rng);
        order.extend(group);
    }
    let mut val = vec![Vec::new(); folds];
    for (n, &i) in order.iter().enumerate() {
        val[n % folds].push(i);
    }
    Ok(val
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let train = (0..labels.len()).filter(|i| v.binary_search(i).is_err()).collect();
            Fold { train, val: v }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_bags_five_folds() {
        let labels = [0, 1, 0, 1, 2, 2, 0, 1, 0, 0];
        let folds = kfold_split(&labels, 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.val.len() == 2 && f.train.len() == 8));
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.val.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for f in &folds {
            assert!(f.val.iter().all(|v| !f.train.contains(v)));
        }
    }

    #[test]
    fn stratified_within_one() {
        let labels: Vec<usize> = (0..103).map(|i| (i * 7 + i / 5) % 4).collect();
        let folds = kfold_split(&labels, 5, 1).unwrap();
        for c in 0..4 {
            let total = labels.iter().filter(|&&l| l == c).count() as f64;
            for f in &folds {
                let n = f.val.iter().filter(|&&i| labels[i] == c).count() as f64;
                assert!((n - total / 5.0).abs() <= 1.0, "class {c}: {n} vs {}", total / 5.0);
            }
        }
    }

    #[test]
    fn too_few_bags() {
        assert!(kfold_split(&[0, 1, 0], 5, 0).is_err());
        assert!(kfold_split(&[0, 1, 0], 1, 0).is_err());
    }
}
