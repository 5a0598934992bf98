//! Grouped cross-validation folds: leave one healthy/disease pair of cell
//! lines out, or leave one experimental batch out.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{Condition, ExperimentManifest, LinePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldScheme {
    LeavePairOut,
    LeaveBatchOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub id: usize,
    pub scheme: FoldScheme,
    /// Site ids.
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// `(healthy, disease)` for leave-pair-out folds.
    pub test_pair: Option<(String, String)>,
    /// Whether both lines of the held-out pair share a lab source.
    pub same_source: Option<bool>,
    pub test_batch: Option<String>,
}

/// One fold per pair: the pair's sites are the test set, every other
/// line's sites the training set.
pub fn make_folds_leave_pair_out(
    manifest: &ExperimentManifest,
    pairs: &[LinePair],
) -> Result<Vec<FoldSpec>> {
    let lines = manifest.cell_line_map();
    let mut used = BTreeSet::new();
    for pair in pairs {
        for id in [&pair.healthy, &pair.disease] {
            if !lines.contains_key(id.as_str()) {
                return Err(Error::Pairing(format!("unknown cell line {id:?}")));
            }
            if !used.insert(id.as_str()) {
                return Err(Error::Pairing(format!("cell line {id:?} appears in two pairs")));
            }
        }
        let (h, d) = (lines[pair.healthy.as_str()], lines[pair.disease.as_str()]);
        if h.condition != Condition::Healthy || d.condition != Condition::Disease {
            return Err(Error::Pairing(format!(
                "pair ({}, {}) must be one healthy and one disease line, got {} and {}",
                h.id,
                d.id,
                h.condition.as_str(),
                d.condition.as_str()
            )));
        }
    }

    let mut by_line: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for site in &manifest.sites {
        by_line
            .entry(site.cell_line.as_str())
            .or_default()
            .push(site.key.id());
    }

    let mut folds = Vec::with_capacity(pairs.len());
    for (id, pair) in pairs.iter().enumerate() {
        let held = [pair.healthy.as_str(), pair.disease.as_str()];
        let mut test = Vec::new();
        let mut train = Vec::new();
        for (line, sites) in &by_line {
            if held.contains(line) {
                test.extend(sites.iter().cloned());
            } else {
                train.extend(sites.iter().cloned());
            }
        }
        if test.is_empty() {
            return Err(Error::Pairing(format!(
                "pair ({}, {}) has no sites in the manifest",
                pair.healthy, pair.disease
            )));
        }
        if train.is_empty() {
            return Err(Error::Pairing(format!(
                "holding out ({}, {}) leaves an empty training set",
                pair.healthy, pair.disease
            )));
        }
        test.sort();
        train.sort();
        let same = lines[held[0]].lab_source == lines[held[1]].lab_source;
        folds.push(FoldSpec {
            id,
            scheme: FoldScheme::LeavePairOut,
            train,
            test,
            test_pair: Some((pair.healthy.clone(), pair.disease.clone())),
            same_source: Some(same),
            test_batch: None,
        });
    }
    Ok(folds)
}

/// One fold per batch: that batch's sites are the test set.
pub fn make_folds_leave_batch_out(manifest: &ExperimentManifest) -> Result<Vec<FoldSpec>> {
    let batches = manifest.batches();
    if batches.len() < 2 {
        return Err(Error::Config(format!(
            "leave-batch-out needs at least 2 batches, found {}",
            batches.len()
        )));
    }
    let folds = batches
        .iter()
        .enumerate()
        .map(|(id, batch)| {
            let (mut test, mut train): (Vec<String>, Vec<String>) = (Vec::new(), Vec::new());
            for site in &manifest.sites {
                if &site.key.batch == batch {
                    test.push(site.key.id());
                } else {
                    train.push(site.key.id());
                }
            }
            test.sort();
            train.sort();
            FoldSpec {
                id,
                scheme: FoldScheme::LeaveBatchOut,
                train,
                test,
                test_pair: None,
                same_source: None,
                test_batch: Some(batch.clone()),
            }
        })
        .collect();
    Ok(folds)
}
