//! Stratified train/test splits and stratified k-fold plans.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::manifest::{Manifest, Target};
use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target: Target,
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Class label of every id in the plan.
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub target: Target,
    pub seed: u64,
    pub k: usize,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl FoldPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Groups ids by class, preserving input order inside each class.
fn by_class<'a>(samples: impl Iterator<Item = (&'a str, &'a str)>) -> BTreeMap<String, Vec<String>> {
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, class) in samples {
        groups.entry(class.to_string()).or_default().push(id.to_string());
    }
    groups
}

/// Per-class train counts: largest-remainder allocation of `round(total·ratio)`,
/// clamped so every class keeps at least one sample on each side.
fn allocate(counts: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * ratio).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&n| n as f64 * ratio).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(alloc.iter().sum());
    for &i in order.iter().cycle().take(counts.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[i] < counts[i] {
            alloc[i] += 1;
            remaining -= 1;
        }
    }
    for (a, &n) in alloc.iter_mut().zip(counts) {
        *a = (*a).clamp(1, n - 1);
    }
    alloc
}

/// Stratified split of `(id, class)` pairs; deterministic for a given seed and input order.
pub fn split_train_test(samples: &[(String, String)], ratio: f64, target: Target, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    let groups = by_class(samples.iter().map(|(i, c)| (i.as_str(), c.as_str())));
    for (class, ids) in &groups {
        if ids.len() < 2 {
            return Err(Error::InsufficientClassSamples { class: class.clone(), count: ids.len(), needed: 2 });
        }
    }
    let counts: Vec<usize> = groups.values().map(Vec::len).collect();
    let alloc = allocate(&counts, ratio);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((_, ids), n_train) in groups.iter().zip(alloc) {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        train.extend_from_slice(&ids[..n_train]);
        test.extend_from_slice(&ids[n_train..]);
    }
    let labels = samples.iter().cloned().collect();
    Ok(SplitPlan { target, seed, ratio, train, test, labels })
}

/// Stratified k-fold plan over the split's training ids.
///
/// Each class is shuffled and dealt round-robin, continuing from the fold where
/// the previous class stopped, so per-class validation counts differ from the
/// proportional share by less than one and fold sizes differ by at most one.
pub fn make_folds(split: &SplitPlan, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidFoldCount(k));
    }
    let groups = by_class(split.train.iter().map(|id| (id.as_str(), split.labels[id].as_str())));
    for (class, ids) in &groups {
        if ids.len() < k {
            return Err(Error::InsufficientClassSamples { class: class.clone(), count: ids.len(), needed: k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut validation: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for ids in groups.values() {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        for id in ids {
            validation[cursor].push(id);
            cursor = (cursor + 1) % k;
        }
    }
    let folds = validation
        .into_iter()
        .enumerate()
        .map(|(index, val)| {
            let held: HashSet<&String> = val.iter().collect();
            let train = split.train.iter().filter(|id| !held.contains(id)).cloned().collect();
            Fold { index, train, validation: val }
        })
        .collect();
    Ok(FoldPlan { target: split.target, seed, k, folds })
}

/// Convenience wrapper building the split for one target of a manifest.
pub fn split_manifest(manifest: &Manifest, ratio: f64, target: Target, seed: u64) -> Result<SplitPlan> {
    let samples: Vec<(String, String)> =
        manifest.records.iter().map(|r| (r.id.clone(), r.labels.get(target).to_string())).collect();
    split_train_test(&samples, ratio, target, seed)
}
