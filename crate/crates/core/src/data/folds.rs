use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Sample;

/// Assignment of every sample to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
    /// Classes too small to appear in every fold.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Sample indices per fold, in dataset order.
    pub fn fold_indices(&self, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
        let mut folds = vec![Vec::new(); self.k];
        for (i, s) in samples.iter().enumerate() {
            let f = self.fold_of(&s.id).ok_or_else(|| {
                Error::InvalidInput(format!("sample {} is not in the fold plan", s.id))
            })?;
            folds[f].push(i);
        }
        Ok(folds)
    }

    /// Indices of every sample outside fold `k`, in dataset order.
    pub fn out_of_fold(&self, samples: &[Sample], k: usize) -> Result<Vec<usize>> {
        let folds = self.fold_indices(samples)?;
        let mut out: Vec<usize> = folds
            .into_iter()
            .enumerate()
            .filter(|(f, _)| *f != k)
            .flat_map(|(_, idx)| idx)
            .collect();
        out.sort_unstable();
        Ok(out)
    }
}

/// Stratified K-fold split.
///
/// Classes are visited in index order; each class is shuffled with the seeded
/// generator and dealt round-robin, continuing from the fold where the
/// previous class stopped so that fold sizes also stay balanced overall.
pub fn stratified_kfold(samples: &[Sample], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("K must be at least 2, got {k}")));
    }
    if samples.len() < k {
        return Err(Error::InvalidParameter(format!(
            "K = {k} exceeds the number of samples ({})",
            samples.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut next = 0usize;
    for (class, mut members) in by_class {
        if members.len() < k {
            warnings.push(format!(
                "class {class} has {} samples, fewer than K = {k}",
                members.len()
            ));
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment.insert(samples[i].id.clone(), next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
        warnings,
    })
}
