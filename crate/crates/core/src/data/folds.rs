//! Stratified five-fold split with a deterministic seed contract.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::mask::Malignancy;

use super::format::DatasetManifest;

pub const N_FOLDS: usize = 5;

/// Assignment of every sample to one of five folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_assignments: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.fold_assignments.get(sample_id).copied()
    }

    pub fn ids_in_fold(&self, fold: usize) -> Vec<String> {
        self.fold_assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn ids_outside_fold(&self, fold: usize) -> Vec<String> {
        self.fold_assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Checks that the split is a partition of the manifest.
    pub fn audit_partition(&self, manifest: &DatasetManifest) -> Result<(), DataError> {
        if self.fold_assignments.len() != manifest.samples.len() {
            return Err(DataError::BadSplit(format!(
                "{} assignments for {} samples",
                self.fold_assignments.len(),
                manifest.samples.len()
            )));
        }
        for s in &manifest.samples {
            match self.fold_of(&s.sample_id) {
                Some(f) if f < N_FOLDS => {}
                other => {
                    return Err(DataError::BadSplit(format!(
                        "sample {} has fold {other:?}",
                        s.sample_id
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Splits the manifest into five folds, stratified by malignancy.
///
/// Within each stratum the ids are shuffled deterministically and dealt
/// round-robin, so per-stratum fold sizes differ by at most one. Errors if a
/// present stratum holds fewer than five samples or the resulting per-fold
/// malignant fraction drifts more than two percentage points from the global
/// fraction.
pub fn stratified_five_fold(
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<FoldSplit, DataError> {
    let mut strata: BTreeMap<&'static str, Vec<&str>> = BTreeMap::new();
    for s in &manifest.samples {
        strata
            .entry(s.malignancy.as_str())
            .or_default()
            .push(&s.sample_id);
    }
    if strata.is_empty() {
        return Err(DataError::InvalidManifest("empty manifest".into()));
    }
    for (name, ids) in &strata {
        if ids.len() < N_FOLDS {
            return Err(DataError::StratumTooSmall {
                stratum: name.to_string(),
                count: ids.len(),
            });
        }
    }

    let mut assignments = BTreeMap::new();
    for (name, ids) in &mut strata {
        ids.sort_unstable();
        let mut rng = crate::nn::seeded_rng(seed, &format!("fold-{name}"));
        ids.shuffle(&mut rng);
        for (rank, id) in ids.iter().enumerate() {
            assignments.insert(id.to_string(), rank % N_FOLDS);
        }
    }
    let split = FoldSplit {
        fold_assignments: assignments,
        seed,
    };

    // stratification tolerance audit
    let global_malignant = manifest
        .samples
        .iter()
        .filter(|s| s.malignancy == Malignancy::Malignant)
        .count() as f64
        / manifest.samples.len() as f64;
    for fold in 0..N_FOLDS {
        let ids = split.ids_in_fold(fold);
        if ids.is_empty() {
            return Err(DataError::BadSplit(format!("fold {fold} is empty")));
        }
        let malignant = ids
            .iter()
            .filter(|id| {
                manifest
                    .samples
                    .iter()
                    .any(|s| &s.sample_id == *id && s.malignancy == Malignancy::Malignant)
            })
            .count() as f64
            / ids.len() as f64;
        if (malignant - global_malignant).abs() > 0.02 + 1e-12 {
            return Err(DataError::BadSplit(format!(
                "fold {fold} malignant fraction {malignant:.4} vs global {global_malignant:.4}"
            )));
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::format::{DatasetManifest, ManifestEntry, FORMAT_VERSION};

    fn manifest(benign: usize, malignant: usize) -> DatasetManifest {
        let mut samples = Vec::new();
        for i in 0..benign {
            samples.push(ManifestEntry {
                sample_id: format!("b{i:04}"),
                path: format!("b{i:04}"),
                malignancy: Malignancy::Benign,
                n_annotations: 2,
            });
        }
        for i in 0..malignant {
            samples.push(ManifestEntry {
                sample_id: format!("m{i:04}"),
                path: format!("m{i:04}"),
                malignancy: Malignancy::Malignant,
                n_annotations: 2,
            });
        }
        DatasetManifest {
            version: FORMAT_VERSION,
            patch_size: 64,
            samples,
        }
    }

    #[test]
    fn balanced_100_gives_exact_folds() {
        let m = manifest(50, 50);
        let split = stratified_five_fold(&m, 11).unwrap();
        for fold in 0..N_FOLDS {
            let ids = split.ids_in_fold(fold);
            assert_eq!(ids.len(), 20);
            let malignant = ids.iter().filter(|id| id.starts_with('m')).count();
            assert_eq!(malignant, 10);
        }
    }

    #[test]
    fn large_manifest_respects_tolerance() {
        // 1859 samples at roughly one-third malignant
        let m = manifest(1240, 619);
        let split = stratified_five_fold(&m, 5).unwrap();
        split.audit_partition(&m).unwrap();
        let global = 619.0 / 1859.0;
        for fold in 0..N_FOLDS {
            let ids = split.ids_in_fold(fold);
            let frac = ids.iter().filter(|id| id.starts_with('m')).count() as f64
                / ids.len() as f64;
            assert!((frac - global).abs() <= 0.02);
        }
    }

    #[test]
    fn same_seed_is_identical_different_seed_is_not() {
        let m = manifest(40, 40);
        let a = stratified_five_fold(&m, 3).unwrap();
        let b = stratified_five_fold(&m, 3).unwrap();
        assert_eq!(a.fold_assignments, b.fold_assignments);
        let c = stratified_five_fold(&m, 4).unwrap();
        assert_ne!(a.fold_assignments, c.fold_assignments);
    }

    #[test]
    fn tiny_stratum_is_an_error() {
        let m = manifest(30, 3);
        assert!(matches!(
            stratified_five_fold(&m, 1),
            Err(DataError::StratumTooSmall { .. })
        ));
    }

    #[test]
    fn undersized_strata_break_the_tolerance() {
        // 23/17 over five folds cannot keep every fold within 2 points
        let m = manifest(23, 17);
        assert!(matches!(
            stratified_five_fold(&m, 9),
            Err(DataError::BadSplit(_))
        ));
    }

    #[test]
    fn partition_covers_every_sample_once() {
        let m = manifest(117, 88);
        let split = stratified_five_fold(&m, 9).unwrap();
        split.audit_partition(&m).unwrap();
        let total: usize = (0..N_FOLDS).map(|f| split.ids_in_fold(f).len()).sum();
        assert_eq!(total, 205);
        // fold sizes differ by at most one within each stratum
        for prefix in ["b", "m"] {
            let sizes: Vec<usize> = (0..N_FOLDS)
                .map(|f| {
                    split
                        .ids_in_fold(f)
                        .iter()
                        .filter(|id| id.starts_with(prefix))
                        .count()
                })
                .collect();
            let min = sizes.iter().min().unwrap();
            let max = sizes.iter().max().unwrap();
            assert!(max - min <= 1, "{prefix} sizes {sizes:?}");
        }
    }
}
