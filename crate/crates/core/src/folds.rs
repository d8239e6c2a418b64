//! Case-aware stratified k-fold planning and the slice-level validation
//! holdout.
//!
//! Test folds partition whole cases so no case's slices ever straddle the
//! train/test boundary. Stratification balances the per-fold counts of
//! annotated-slice classes with a greedy squared-deviation objective: cases
//! are placed largest first, each into the fold whose class counts would end
//! up closest to a proportional share.

use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::loss::{ClassId, NUM_CLASSES};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One annotated slice, addressable across the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceRef {
    pub case_id: String,
    pub slice_index: usize,
    pub chosen: ClassId,
}

/// All annotated slices of a dataset in (case, slice) order.
pub fn annotated_slice_refs(cases: &[Case]) -> Vec<SliceRef> {
    let mut refs = Vec::new();
    for case in cases {
        for &(slice_index, chosen) in &case.annotated_slices {
            refs.push(SliceRef { case_id: case.case_id.clone(), slice_index, chosen });
        }
    }
    refs
}

/// A complete cross-validation plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// case_id -> fold index holding that case as test data.
    pub assignment: BTreeMap<String, usize>,
    /// Test slices per fold, sorted by (case_id, slice_index).
    pub folds: Vec<Vec<SliceRef>>,
}

impl FoldPlan {
    /// Test slices of one fold.
    pub fn test_slices(&self, fold: usize) -> &[SliceRef] {
        &self.folds[fold]
    }

    /// Slices of every other fold, in fold order.
    pub fn train_slices(&self, fold: usize) -> Vec<SliceRef> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, slices)| slices.iter().cloned())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, body)
            .map_err(|e| Error::io(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<FoldPlan> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
        serde_json::from_str(&body)
            .map_err(|e| Error::io(path.display().to_string(), e.to_string()))
    }
}

/// Plans `k` test folds over whole cases, balancing annotated-slice class
/// counts. Deterministic in `(cases, k, seed)`; the seed only breaks ties
/// between equally sized cases.
pub fn stratified_group_kfold(cases: &[Case], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if cases.len() < k {
        return Err(Error::Config(format!(
            "{} cases cannot fill {k} folds",
            cases.len()
        )));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for case in cases {
            if !seen.insert(&case.case_id) {
                return Err(Error::Contract(format!("duplicate case id {}", case.case_id)));
            }
        }
    }

    let mut global = [0f64; NUM_CLASSES];
    let mut class_vectors: Vec<(usize, [f64; NUM_CLASSES], usize)> = cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut v = [0f64; NUM_CLASSES];
            for &(_, chosen) in &case.annotated_slices {
                v[chosen.index()] += 1.0;
            }
            for (g, x) in global.iter_mut().zip(&v) {
                *g += x;
            }
            (i, v, case.annotated_slices.len())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    class_vectors.shuffle(&mut rng);
    class_vectors.sort_by(|a, b| b.2.cmp(&a.2));

    let target: Vec<f64> = global.iter().map(|g| g / k as f64).collect();
    let mut fold_counts = vec![[0f64; NUM_CLASSES]; k];
    let mut fold_sizes = vec![0usize; k];
    let mut assignment = BTreeMap::new();

    for (done, &(case_idx, ref vector, _)) in class_vectors.iter().enumerate() {
        let remaining = class_vectors.len() - done;
        let empty: Vec<usize> = (0..k).filter(|&f| fold_sizes[f] == 0).collect();
        // overfilled folds self-penalize through the objective; a hard cap is
        // only needed to guarantee every fold receives a case
        let candidates: Vec<usize> = if remaining == empty.len() {
            empty
        } else {
            (0..k).collect()
        };
        let mut best_fold = candidates[0];
        let mut best_score = f64::INFINITY;
        for &f in &candidates {
            let mut score = 0.0;
            for c in 0..NUM_CLASSES {
                let d = fold_counts[f][c] + vector[c] - target[c];
                score += d * d;
            }
            if score < best_score {
                best_score = score;
                best_fold = f;
            }
        }
        for c in 0..NUM_CLASSES {
            fold_counts[best_fold][c] += vector[c];
        }
        fold_sizes[best_fold] += 1;
        assignment.insert(cases[case_idx].case_id.clone(), best_fold);
    }

    // refinement: relocate single cases while the total squared deviation
    // from the per-fold targets keeps dropping; the greedy endpoint is not
    // generally a local optimum of the global objective
    let fold_score = |counts: &[f64; NUM_CLASSES]| -> f64 {
        counts
            .iter()
            .zip(&target)
            .map(|(c, t)| (c - t) * (c - t))
            .sum()
    };
    for _ in 0..32 {
        let mut improved = false;
        for (case_idx, vector, _) in &class_vectors {
            let case_id = &cases[*case_idx].case_id;
            let from = assignment[case_id];
            if fold_sizes[from] <= 1 {
                continue;
            }
            let mut removed = fold_counts[from];
            for c in 0..NUM_CLASSES {
                removed[c] -= vector[c];
            }
            let delta_from = fold_score(&removed) - fold_score(&fold_counts[from]);
            let mut best_to = from;
            let mut best_delta = -1e-9;
            for to in 0..k {
                if to == from {
                    continue;
                }
                let mut added = fold_counts[to];
                for c in 0..NUM_CLASSES {
                    added[c] += vector[c];
                }
                let delta = delta_from + fold_score(&added) - fold_score(&fold_counts[to]);
                if delta < best_delta {
                    best_delta = delta;
                    best_to = to;
                }
            }
            if best_to != from {
                for c in 0..NUM_CLASSES {
                    fold_counts[from][c] -= vector[c];
                    fold_counts[best_to][c] += vector[c];
                }
                fold_sizes[from] -= 1;
                fold_sizes[best_to] += 1;
                assignment.insert(case_id.clone(), best_to);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }

    let mut folds: Vec<Vec<SliceRef>> = vec![Vec::new(); k];
    for case in cases {
        let fold = assignment[&case.case_id];
        for &(slice_index, chosen) in &case.annotated_slices {
            folds[fold].push(SliceRef { case_id: case.case_id.clone(), slice_index, chosen });
        }
    }
    for fold in &mut folds {
        fold.sort_by(|a, b| (&a.case_id, a.slice_index).cmp(&(&b.case_id, b.slice_index)));
    }
    Ok(FoldPlan { k, seed, assignment, folds })
}

/// Splits slices into (train, validation) with the validation side holding
/// `round(fraction * n)` slices, apportioned across chosen classes by
/// largest remainder. Deterministic in `(slices, fraction, seed)`.
pub fn validation_split(
    slices: &[SliceRef],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SliceRef>, Vec<SliceRef>)> {
    if slices.is_empty() {
        return Err(Error::Config("cannot split an empty slice set".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must be in (0,1), got {fraction}"
        )));
    }
    let total = (fraction * slices.len() as f64).round() as usize;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in slices.iter().enumerate() {
        by_class[s.chosen.index()].push(i);
    }

    let targets: Vec<f64> = by_class.iter().map(|g| fraction * g.len() as f64).collect();
    let mut take: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let mut remaining = total.saturating_sub(take.iter().sum::<usize>());
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in &order {
        if remaining == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_indices = std::collections::HashSet::new();
    for c in 0..NUM_CLASSES {
        let mut group = by_class[c].clone();
        group.shuffle(&mut rng);
        for &i in group.iter().take(take[c]) {
            val_indices.insert(i);
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in slices.iter().enumerate() {
        if val_indices.contains(&i) {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, val))
}
