use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// One train/validation repeat plus its labeled subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub repeat_index: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub labeled_ids: Vec<String>,
}

impl DatasetSplit {
    /// Train ids not in the labeled subset, in train order.
    pub fn unlabeled_ids(&self) -> Vec<String> {
        let labeled: HashSet<&String> = self.labeled_ids.iter().collect();
        self.train_ids
            .iter()
            .filter(|id| !labeled.contains(id))
            .cloned()
            .collect()
    }
}

/// Size of a `fraction` subset of `n` items. Exact halves go to the
/// remainder, so 0.5 of 1359 selects 679 and leaves 680.
pub fn subset_size(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    // Guard against representation error such as 0.7 * 10 = 7.000000000000001.
    let snapped = (x * 1e9).round() / 1e9;
    let size = (snapped - 0.5).ceil().max(0.0) as usize;
    size.min(n)
}

/// `repeats` independent shuffles of `ids`, each cut into train and
/// validation. `labeled_ids` starts equal to `train_ids`.
pub fn make_splits(ids: &[String], train_ratio: f64, repeats: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    if ids.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples to split, got {}",
            ids.len()
        )));
    }
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Invalid(format!("train ratio {train_ratio} must be in (0, 1)")));
    }
    if repeats == 0 {
        return Err(Error::Invalid("split repeats must be >= 1".into()));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let n_train = subset_size(train_ratio, sorted.len()).clamp(1, sorted.len() - 1);
    Ok((0..repeats)
        .map(|k| {
            let s = derive_seed(seed, &format!("split{k}"));
            let mut order = sorted.clone();
            order.shuffle(&mut rng_from(s));
            let val_ids = order.split_off(n_train);
            DatasetSplit {
                repeat_index: k,
                seed: s,
                labeled_ids: order.clone(),
                train_ids: order,
                val_ids,
            }
        })
        .collect())
}

/// Chooses `labeled_fraction` of the train ids uniformly without replacement.
pub fn partition_labels(split: &DatasetSplit, labeled_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "labeled fraction {labeled_fraction} must be in (0, 1]"
        )));
    }
    let n = subset_size(labeled_fraction, split.train_ids.len());
    let mut order = split.train_ids.clone();
    order.shuffle(&mut rng_from(derive_seed(
        seed,
        &format!("labels{}", split.repeat_index),
    )));
    order.truncate(n);
    Ok(DatasetSplit {
        labeled_ids: order,
        ..split.clone()
    })
}

pub fn manifest_path(dir: &Path, repeat: usize, part: &str) -> PathBuf {
    dir.join(format!("split{repeat}_{part}.txt"))
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a manifest: one id per line, blank lines and `#` comments
/// skipped, duplicates rejected.
pub fn parse_manifest(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let id = line.trim();
        if id.is_empty() || id.starts_with('#') {
            continue;
        }
        if id.chars().any(char::is_control) {
            return Err(format!("line {}: control character in id", n + 1));
        }
        if !seen.insert(id) {
            return Err(format!("line {}: duplicate id {id}", n + 1));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|m| Error::item(path, m))
}

/// Writes `split<k>_{train,val,labeled}.txt` for one split.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = split.repeat_index;
    write_manifest(&manifest_path(dir, k, "train"), &split.train_ids)?;
    write_manifest(&manifest_path(dir, k, "val"), &split.val_ids)?;
    write_manifest(&manifest_path(dir, k, "labeled"), &split.labeled_ids)
}

pub fn read_split(dir: &Path, repeat: usize) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        repeat_index: repeat,
        seed: 0,
        train_ids: read_manifest(&manifest_path(dir, repeat, "train"))?,
        val_ids: read_manifest(&manifest_path(dir, repeat, "val"))?,
        labeled_ids: read_manifest(&manifest_path(dir, repeat, "labeled"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(subset_size(0.5, 1359), 679);
        assert_eq!(subset_size(0.5, 526), 263);
        assert_eq!(subset_size(0.7, 1942), 1359);
        assert_eq!(subset_size(0.7, 10), 7);
        assert_eq!(subset_size(1.0, 9), 9);
        assert_eq!(subset_size(0.26, 10), 3);
    }

    #[test]
    fn even_split_is_disjoint() {
        let s = make_splits(&ids(10), 0.5, 1, 3).unwrap();
        assert_eq!((s[0].train_ids.len(), s[0].val_ids.len()), (5, 5));
        assert!(s[0].train_ids.iter().all(|id| !s[0].val_ids.contains(id)));
    }

    #[test]
    fn too_few_samples() {
        assert!(make_splits(&ids(1), 0.5, 1, 0).is_err());
    }

    #[test]
    fn full_fraction_labels_everything() {
        let s = make_splits(&ids(20), 0.7, 1, 1).unwrap();
        let p = partition_labels(&s[0], 1.0, 1).unwrap();
        assert_eq!(p.labeled_ids.len(), 14);
        assert!(p.unlabeled_ids().is_empty());
    }

    #[test]
    fn manifest_parsing() {
        assert_eq!(parse_manifest("a\n\n# c\n b \n").unwrap(), vec!["a", "b"]);
        assert!(parse_manifest("a\na\n").is_err());
    }
}
