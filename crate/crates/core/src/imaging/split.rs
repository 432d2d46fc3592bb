use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SliceSample;
use crate::error::{Error, Result};

/// Patient-level train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

const MANIFESTS: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

/// Seeded 70/10/20 split; sizes are floored and the remainder goes to test.
///
/// The ids are sorted before shuffling, so the result depends only on the
/// id set and the seed.
pub fn split_patients(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 patients to split, got {}",
            ids.len()
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::invalid("duplicate patient ids"));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = order.len();
    let n_train = n * 70 / 100;
    let n_val = n * 10 / 100;
    let test_ids = order.split_off(n_train + n_val);
    let val_ids = order.split_off(n_train);
    Ok(DatasetSplit {
        train_ids: order,
        val_ids,
        test_ids,
        seed,
    })
}

impl DatasetSplit {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.all_ids() {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("patient {id} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// Writes `train.txt`, `val.txt`, `test.txt` (one id per line) and `seed.txt`.
pub fn write_manifests(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, ids) in MANIFESTS
        .iter()
        .zip([&split.train_ids, &split.val_ids, &split.test_ids])
    {
        let mut text = ids.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join("seed.txt");
    fs::write(&path, format!("{}\n", split.seed)).map_err(|e| Error::io(path, e))
}

pub fn read_manifests(dir: &Path) -> Result<DatasetSplit> {
    let mut lists = Vec::with_capacity(3);
    for name in MANIFESTS {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        lists.push(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect::<Vec<_>>(),
        );
    }
    let seed = fs::read_to_string(dir.join("seed.txt"))
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0);
    let test_ids = lists.pop().unwrap();
    let val_ids = lists.pop().unwrap();
    let train_ids = lists.pop().unwrap();
    let split = DatasetSplit {
        train_ids,
        val_ids,
        test_ids,
        seed,
    };
    split.validate()?;
    Ok(split)
}

/// Seeded priority order over `n` items; prefixes of it are nested subsets.
fn priority(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Keeps `ceil(fraction * N)` slices, in their original order.
pub fn subset_by_fraction(
    samples: &[SliceSample],
    fraction: f64,
    seed: u64,
) -> Result<Vec<SliceSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let n = samples.len();
    // Tolerate representation error such as 0.1 * 200 = 20.000000000000004.
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut keep = priority(n, seed);
    keep.truncate(k.min(n));
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| samples[i].clone()).collect())
}

/// Keeps every slice of `k` seeded-chosen patients, in their original order.
pub fn subset_by_patients(
    samples: &[SliceSample],
    k: usize,
    seed: u64,
) -> Result<Vec<SliceSample>> {
    let patients: Vec<&str> = samples
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if k == 0 || k > patients.len() {
        return Err(Error::invalid(format!(
            "patient count {k} outside 1..={}",
            patients.len()
        )));
    }
    let chosen: BTreeSet<&str> = priority(patients.len(), seed)
        .into_iter()
        .take(k)
        .map(|i| patients[i])
        .collect();
    Ok(samples
        .iter()
        .filter(|s| chosen.contains(s.patient_id.as_str()))
        .cloned()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("patient_{i:03}")).collect()
    }

    fn slices(patients: usize, per: usize) -> Vec<SliceSample> {
        (0..patients)
            .flat_map(|p| {
                (0..per).map(move |k| {
                    SliceSample::new(
                        Array2::from_elem((2, 2), (p * 100 + k) as f32),
                        Array2::zeros((2, 2)),
                        format!("p{p:02}"),
                        k,
                    )
                    .unwrap()
                })
            })
            .collect()
    }

    #[test]
    fn split_sizes_follow_floor_arithmetic() {
        let s = split_patients(&ids(130), 7).unwrap();
        assert_eq!(
            (s.train_ids.len(), s.val_ids.len(), s.test_ids.len()),
            (91, 13, 26)
        );
        let s = split_patients(&ids(10), 7).unwrap();
        assert_eq!(
            (s.train_ids.len(), s.val_ids.len(), s.test_ids.len()),
            (7, 1, 2)
        );
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let a = split_patients(&ids(40), 3).unwrap();
        let mut rev = ids(40);
        rev.reverse();
        assert_eq!(a, split_patients(&rev, 3).unwrap());
        assert_ne!(a, split_patients(&ids(40), 4).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(split_patients(&ids(2), 0).is_err());
        let mut dup = ids(5);
        dup.push("patient_000".into());
        assert!(split_patients(&dup, 0).is_err());
    }

    #[test]
    fn manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = split_patients(&ids(20), 11).unwrap();
        write_manifests(dir.path(), &s).unwrap();
        assert_eq!(read_manifests(dir.path()).unwrap(), s);
    }

    #[test]
    fn fraction_subsets() {
        let all = slices(20, 10);
        assert_eq!(subset_by_fraction(&all, 1.0, 5).unwrap(), all);
        assert_eq!(subset_by_fraction(&all, 0.1, 5).unwrap().len(), 20);
        assert!(subset_by_fraction(&all, 0.0, 5).is_err());
        assert!(subset_by_fraction(&all, 1.5, 5).is_err());
    }

    #[test]
    fn patient_subsets() {
        let all = slices(91, 2);
        assert_eq!(subset_by_patients(&all, 91, 1).unwrap(), all);
        let one = subset_by_patients(&all, 1, 1).unwrap();
        let distinct: BTreeSet<_> = one.iter().map(|s| &s.patient_id).collect();
        assert_eq!((distinct.len(), one.len()), (1, 2));
        let ten = subset_by_patients(&all, 10, 1).unwrap();
        let distinct: BTreeSet<_> = ten.iter().map(|s| &s.patient_id).collect();
        assert_eq!(distinct.len(), 10);
        assert!(subset_by_patients(&all, 0, 1).is_err());
        assert!(subset_by_patients(&all, 92, 1).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_ids(n in 3usize..200, seed in any::<u64>()) {
            let s = split_patients(&ids(n), seed).unwrap();
            s.validate().unwrap();
            let mut all: Vec<_> = s.all_ids().cloned().collect();
            all.sort();
            prop_assert_eq!(all, ids(n));
        }

        #[test]
        fn fraction_subsets_nest(f1 in 0.01f64..=1.0, f2 in 0.01f64..=1.0, seed in any::<u64>()) {
            let all = slices(7, 9);
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = subset_by_fraction(&all, lo, seed).unwrap();
            let b = subset_by_fraction(&all, hi, seed).unwrap();
            prop_assert!(a.iter().all(|s| b.contains(s)));
        }

        #[test]
        fn patient_subsets_nest(k1 in 1usize..=12, k2 in 1usize..=12, seed in any::<u64>()) {
            let all = slices(12, 3);
            let (lo, hi) = (k1.min(k2), k1.max(k2));
            let a = subset_by_patients(&all, lo, seed).unwrap();
            let b = subset_by_patients(&all, hi, seed).unwrap();
            prop_assert!(a.iter().all(|s| b.contains(s)));
        }
    }
}
