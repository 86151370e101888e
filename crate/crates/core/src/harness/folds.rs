//! Seeded stratified k-fold splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Shuffles each class with a seeded generator and deals it round-robin,
/// continuing the dealing position across classes so fold sizes stay
/// within one of each other. Ids keep dataset order inside each split.
pub fn make_folds(ids: &[String], labels: &[u8], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if ids.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} ids for {} labels", ids.len(), labels.len())));
    }
    if folds < 2 {
        return Err(Error::Config(format!("folds must be at least 2, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; ids.len()];
    let mut next = 0usize;
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..ids.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < folds {
            return Err(Error::Data {
                case_id: None,
                message: format!("{} cases of class {class}, need at least {folds} for {folds} folds", members.len()),
            });
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} not in {{0, 1}}")));
    }
    Ok((0..folds)
        .map(|k| {
            let pick = |want: bool| {
                ids.iter()
                    .zip(&assignment)
                    .filter(|(_, &a)| (a == k) == want)
                    .map(|(id, _)| id.clone())
                    .collect()
            };
            FoldSplit {
                fold_index: k,
                train_ids: pick(false),
                val_ids: pick(true),
            }
        })
        .collect())
}

/// The single pseudo-fold used when training on every case.
pub fn all_cases_split(ids: &[String]) -> FoldSplit {
    FoldSplit {
        fold_index: 0,
        train_ids: ids.to_vec(),
        val_ids: ids.to_vec(),
    }
}
