//! Stratified k-fold splitting.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    /// Held-out indices per fold, sorted.
    pub folds: Vec<Vec<usize>>,
    /// The stratification label of every index.
    pub labels: Vec<u8>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside `fold`, sorted.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut v: Vec<usize> =
            self.folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.iter().copied()).collect();
        v.sort_unstable();
        v
    }
}

/// Shuffles each class separately and deals its members round-robin. The
/// dealing position carries over from one class to the next, so fold sizes
/// also differ by at most one.
pub fn stratified_kfold(labels: &[u8], k: usize, rng: &mut Rng) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if k > labels.len() {
        return Err(Error::Parameter(format!("{k} folds for {} samples", labels.len())));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut members);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds, labels: labels.to_vec() })
}
