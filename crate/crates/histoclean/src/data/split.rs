//! Deterministic stratified train/test splitting.
//!
//! Records are grouped into units by `source_id` so that a synthetic clean
//! tile and its artifact partners always land in the same split. Units are
//! stratified by their (domain, label) signature and each stratum is cut at
//! the requested fraction, so per-class artifact proportions survive within
//! one rounding unit per stratum.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::derive_seed;

use super::{DataError, Domain, Manifest, Split};

fn record_stratum(domain: Domain, label: Option<usize>) -> String {
    match (domain, label) {
        (Domain::Artifact, Some(l)) => format!("A{l}"),
        (Domain::Artifact, None) => "A?".into(),
        (Domain::Clean, _) => "B".into(),
    }
}

/// Assigns the `split` field of every record. Deterministic in `seed`;
/// `train_fraction` must lie strictly between 0 and 1.
pub fn split_manifest(
    manifest: &Manifest,
    train_fraction: f64,
    seed: u64,
) -> Result<Manifest, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    // Units keyed by source_id; each unit remembers its record indices.
    let mut units: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        units.entry(&r.source_id).or_default().push(i);
    }
    // Group units into strata by their signature: the sorted multiset of
    // per-record stratum keys.
    let mut strata: BTreeMap<String, Vec<(&str, Vec<usize>)>> = BTreeMap::new();
    for (source, indices) in units {
        let mut keys: Vec<String> = indices
            .iter()
            .map(|&i| record_stratum(manifest.records[i].domain, manifest.records[i].label))
            .collect();
        keys.sort();
        strata
            .entry(keys.join("+"))
            .or_default()
            .push((source, indices));
    }
    let mut out = manifest.clone();
    for (stratum, mut members) in strata {
        if members.len() < 2 {
            return Err(DataError::StratumTooSmall(stratum));
        }
        members.sort_by(|a, b| a.0.cmp(b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", hash_str(&stratum)));
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        for (k, (_, indices)) in members.into_iter().enumerate() {
            let split = if k < n_train { Split::Train } else { Split::Test };
            for i in indices {
                out.records[i].split = split;
            }
        }
    }
    Ok(out)
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a; stable across builds for seed derivation.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{manifest, record};
    use super::super::{Magnification, TileRecord};
    use super::*;
    use std::collections::HashSet;
    use std::path::PathBuf;

    #[test]
    fn clean_tile_counts_match_an_80_20_split() {
        let records: Vec<_> = (0..3275)
            .map(|i| record(&format!("b{i:04}"), Domain::Clean, None, Split::Train))
            .collect();
        let m = manifest(records);
        let split = split_manifest(&m, 0.8, 7).unwrap();
        let counts = split.counts();
        assert_eq!(counts[&(Domain::Clean, Split::Train)], 2620);
        assert_eq!(counts[&(Domain::Clean, Split::Test)], 655);
    }

    #[test]
    fn same_seed_reproduces_the_assignment() {
        let records: Vec<_> = (0..57)
            .map(|i| record(&format!("b{i}"), Domain::Clean, None, Split::Train))
            .collect();
        let m = manifest(records);
        let a = split_manifest(&m, 0.8, 11).unwrap();
        let b = split_manifest(&m, 0.8, 11).unwrap();
        assert_eq!(a, b);
        let c = split_manifest(&m, 0.8, 12).unwrap();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn per_class_counts_split_exactly_when_divisible() {
        let mut records = Vec::new();
        for class in 0..7 {
            for i in 0..10 {
                records.push(record(
                    &format!("a{class}_{i}"),
                    Domain::Artifact,
                    Some(class),
                    Split::Train,
                ));
            }
        }
        let m = manifest(records);
        let split = split_manifest(&m, 0.8, 3).unwrap();
        for class in 0..7 {
            let train = split
                .records
                .iter()
                .filter(|r| r.label == Some(class) && r.split == Split::Train)
                .count();
            assert_eq!(train, 8, "class {class} should split 8/2");
        }
    }

    #[test]
    fn split_is_a_partition() {
        let records: Vec<_> = (0..40)
            .map(|i| {
                record(
                    &format!("a{i}"),
                    Domain::Artifact,
                    Some(i % 7),
                    Split::Train,
                )
            })
            .collect();
        let m = manifest(records);
        let split = split_manifest(&m, 0.75, 5).unwrap();
        let train: HashSet<_> = split
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.id.clone())
            .collect();
        let test: HashSet<_> = split
            .records
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| r.id.clone())
            .collect();
        assert_eq!(train.len() + test.len(), 40);
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn paired_tiles_stay_in_the_same_split() {
        let mut records = Vec::new();
        for scene in 0..10 {
            let source = format!("scene{scene}");
            records.push(TileRecord {
                id: format!("{source}_clean"),
                image_path: PathBuf::from("x.png"),
                domain: Domain::Clean,
                label: None,
                magnification: Magnification::X10,
                source_id: source.clone(),
                split: Split::Train,
                paired_clean_id: None,
            });
            for class in [0usize, 5] {
                records.push(TileRecord {
                    id: format!("{source}_{class}"),
                    image_path: PathBuf::from("x.png"),
                    domain: Domain::Artifact,
                    label: Some(class),
                    magnification: Magnification::X10,
                    source_id: source.clone(),
                    split: Split::Train,
                    paired_clean_id: Some(format!("{source}_clean")),
                });
            }
        }
        let m = manifest(records);
        let split = split_manifest(&m, 0.8, 9).unwrap();
        for scene in 0..10 {
            let source = format!("scene{scene}");
            let splits: HashSet<_> = split
                .records
                .iter()
                .filter(|r| r.source_id == source)
                .map(|r| r.split)
                .collect();
            assert_eq!(splits.len(), 1, "scene {scene} was torn across splits");
        }
        // Scenes are homogeneous, so the cut is exact: 8 train / 2 test.
        assert_eq!(split.counts()[&(Domain::Clean, Split::Train)], 8);
    }

    #[test]
    fn tiny_strata_are_rejected_by_name() {
        let m = manifest(vec![record("only", Domain::Artifact, Some(3), Split::Train)]);
        match split_manifest(&m, 0.8, 1) {
            Err(DataError::StratumTooSmall(s)) => assert_eq!(s, "A3"),
            other => panic!("expected stratum error, got {other:?}"),
        }
    }

    #[test]
    fn fraction_bounds_are_enforced() {
        let m = manifest(vec![record("a", Domain::Clean, None, Split::Train)]);
        assert!(matches!(
            split_manifest(&m, 0.0, 1),
            Err(DataError::BadFraction(_))
        ));
        assert!(matches!(
            split_manifest(&m, 1.0, 1),
            Err(DataError::BadFraction(_))
        ));
    }
}
