//! Protocol-aware split assignment: live subjects are partitioned between
//! train and a held-out pool, synthetic records fill train/val, and every
//! attack record lands in test.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Class, Manifest, Split};
use crate::{derive_seed, hash_id, Error, Result};

/// Fractions controlling split sizes. All counts use the floor rule, so a
/// fraction of 0.8 over 26 subjects keeps 21 for train and holds out 5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitPlan {
    /// Fraction of live subjects assigned to train; the rest are held out.
    pub live_train: f64,
    /// Fraction of the held-out subjects routed to val; the rest go to test.
    pub holdout_val: f64,
    /// Fraction of synthetic records assigned to train; the rest go to val.
    pub synthetic_train: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan { live_train: 0.8, holdout_val: 0.4, synthetic_train: 0.8 }
    }
}

impl SplitPlan {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("live_train", self.live_train), ("synthetic_train", self.synthetic_train)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Usage(format!(
                    "split fraction {name} must lie strictly between 0 and 1, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.holdout_val) {
            return Err(Error::Usage(format!(
                "split fraction holdout_val must lie in [0, 1], got {}",
                self.holdout_val
            )));
        }
        Ok(())
    }
}

/// Reassigns every record's split in place. Subjects are partitioned, never
/// individual live samples, so no subject straddles two splits; attacks are
/// forced to test regardless of the plan.
pub fn make_splits(manifest: &mut Manifest, plan: &SplitPlan, seed: u64) -> Result<()> {
    plan.validate()?;

    let mut subjects = BTreeSet::new();
    for record in &manifest.records {
        if record.class == Class::Live {
            match &record.subject {
                Some(s) => {
                    subjects.insert(s.clone());
                }
                None => {
                    return Err(Error::Usage(format!(
                        "live record {} has no subject id, cannot build subject-disjoint splits",
                        record.id
                    )))
                }
            }
        }
    }
    let n = subjects.len();
    if n < 3 {
        return Err(Error::Usage(format!(
            "subject-disjoint splits need at least 3 live subjects (train/val/test), got {n}"
        )));
    }

    let mut ordered: Vec<String> = subjects.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, hash_id("split:subjects")));
    ordered.shuffle(&mut rng);

    let holdout = (((1.0 - plan.live_train) * n as f64).floor() as usize).min(n - 1);
    let val_subjects = ((holdout as f64) * plan.holdout_val).floor() as usize;
    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for (i, subject) in ordered.iter().enumerate() {
        let split = if i < n - holdout {
            Split::Train
        } else if i < n - holdout + val_subjects {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(subject, split);
    }

    let synthetic: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.class == Class::Synthetic)
        .map(|(i, _)| i)
        .collect();
    let mut synth_order = synthetic.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, hash_id("split:synthetic")));
    synth_order.shuffle(&mut rng);
    let synth_val = ((synth_order.len() as f64) * (1.0 - plan.synthetic_train)).floor() as usize;
    let synth_train = synth_order.len() - synth_val;
    let mut synth_split: BTreeMap<usize, Split> = BTreeMap::new();
    for (k, &idx) in synth_order.iter().enumerate() {
        let split = if k < synth_train { Split::Train } else { Split::Val };
        synth_split.insert(idx, split);
    }

    for (i, record) in manifest.records.iter_mut().enumerate() {
        record.split = match record.class {
            Class::Attack => Split::Test,
            Class::Synthetic => synth_split[&i],
            Class::Live => {
                let subject = record.subject.as_deref().expect("checked above");
                assignment[subject]
            }
        };
    }
    Ok(())
}
