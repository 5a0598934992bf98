use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::learn::metrics::{mean, sample_sd};
use crate::learn::{accuracy, permute_columns, LogisticModel, TrainOptions};
use crate::rng::derive_stream;

pub const MIN_PER_CLASS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuisanceFactor {
    Batch,
    Plate,
    Row,
    Column,
}

impl NuisanceFactor {
    pub const ALL: [NuisanceFactor; 4] = [
        NuisanceFactor::Batch,
        NuisanceFactor::Plate,
        NuisanceFactor::Row,
        NuisanceFactor::Column,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NuisanceFactor::Batch => "batch",
            NuisanceFactor::Plate => "plate",
            NuisanceFactor::Row => "row",
            NuisanceFactor::Column => "column",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown nuisance factor {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceOptions {
    pub factors: Vec<NuisanceFactor>,
    pub repeats: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Required excess of real accuracy over chance for a biased verdict.
    pub margin: f64,
    pub test_fraction: f64,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        NuisanceOptions {
            factors: NuisanceFactor::ALL.to_vec(),
            repeats: 5,
            lambda: TrainOptions::default().lambda,
            seed: 0,
            margin: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorResult {
    pub factor: NuisanceFactor,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub baseline: Vec<f64>,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    pub chance: f64,
    pub biased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkippedFactor {
    pub factor: NuisanceFactor,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceAuditResult {
    pub options: NuisanceOptions,
    /// Whether rows were restricted to control wells.
    pub controls_only: bool,
    pub n_samples: usize,
    pub factors: Vec<FactorResult>,
    pub skipped: Vec<SkippedFactor>,
}

impl NuisanceAuditResult {
    pub fn any_biased(&self) -> bool {
        self.factors.iter().any(|r| r.biased)
    }

    pub fn factor(&self, f: NuisanceFactor) -> Option<&FactorResult> {
        self.factors.iter().find(|r| r.factor == f)
    }
}

/// Stratified split: from each class, `round(fraction · n_c)` (at least
/// one) rows go to the test set. Returns sorted `(train, test)` indices.
pub fn stratified_split(
    labels: &[String],
    fraction: f64,
    seed: u64,
    label: &str,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.as_str()).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        idx.shuffle(&mut derive_stream(seed, &["nuisance-split", label, class]));
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn rows_of(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(ndarray::Axis(0), idx)
}

fn fit_and_score(
    x: &Array2<f64>,
    labels: &[String],
    train: &[usize],
    test: &[usize],
    opts: &TrainOptions,
) -> Result<f64> {
    let ytr: Vec<&str> = train.iter().map(|&i| labels[i].as_str()).collect();
    let yte: Vec<String> = test.iter().map(|&i| labels[i].clone()).collect();
    let model = LogisticModel::fit(rows_of(x, train).view(), &ytr, opts)?;
    accuracy(&model.predict(rows_of(x, test).view())?, &yte)
}

/// Predicts each nuisance factor from the features and compares held-out
/// accuracy against models trained on column-permuted features.
///
/// When the table has control-well rows, only those are used. A factor is
/// flagged when its accuracy beats the baseline mean by more than three
/// baseline standard deviations and beats chance by more than `margin`.
pub fn nuisance_audit(table: &FeatureTable, opts: &NuisanceOptions) -> Result<NuisanceAuditResult> {
    if opts.repeats < 3 {
        return Err(Error::Config(format!(
            "nuisance audit needs at least 3 permutation repeats, got {}",
            opts.repeats
        )));
    }
    if !(opts.test_fraction > 0.0 && opts.test_fraction < 1.0) {
        return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
    }
    let controls_only = table.rows.iter().any(|r| r.is_control);
    let data = if controls_only {
        table.filter(|r| r.is_control)
    } else {
        table.clone()
    };
    let x = data.matrix();
    let train_opts = TrainOptions {
        lambda: opts.lambda,
        ..TrainOptions::default()
    };

    let mut factors = Vec::new();
    let mut skipped = Vec::new();
    let mut work = Vec::new();
    for &factor in &opts.factors {
        let labels = data.metadata_column(factor.as_str())?;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &labels {
            *counts.entry(l.as_str()).or_default() += 1;
        }
        if counts.len() < 2 {
            skipped.push(SkippedFactor {
                factor,
                note: format!(
                    "{} is constant ({})",
                    factor.as_str(),
                    counts.keys().next().copied().unwrap_or("no rows")
                ),
            });
            continue;
        }
        if let Some((class, n)) = counts.iter().find(|(_, n)| **n < MIN_PER_CLASS) {
            return Err(Error::Audit(format!(
                "{} class {class:?} has {n} samples; at least {MIN_PER_CLASS} per class are needed",
                factor.as_str()
            )));
        }
        let k = counts.len();
        work.push((factor, labels, k));
    }

    let results: Vec<Result<FactorResult>> = work
        .par_iter()
        .map(|(factor, labels, k)| {
            let name = factor.as_str();
            let (train, test) = stratified_split(labels, opts.test_fraction, opts.seed, name);
            let real = fit_and_score(&x, labels, &train, &test, &train_opts)?;
            let baseline = (0..opts.repeats)
                .map(|r| {
                    let perm_seed = derive_stream(opts.seed, &["nuisance-permute", name, &r.to_string()])
                        .next_raw();
                    let xp = permute_columns(&x, perm_seed);
                    fit_and_score(&xp, labels, &train, &test, &train_opts)
                })
                .collect::<Result<Vec<f64>>>()?;
            let baseline_mean = mean(&baseline);
            let baseline_sd = sample_sd(&baseline);
            let chance = 1.0 / *k as f64;
            let biased = real > baseline_mean + 3.0 * baseline_sd && real > chance + opts.margin;
            Ok(FactorResult {
                factor: *factor,
                classes: *k,
                n_train: train.len(),
                n_test: test.len(),
                accuracy: real,
                baseline,
                baseline_mean,
                baseline_sd,
                chance,
                biased,
            })
        })
        .collect();
    for r in results {
        factors.push(r?);
    }
    Ok(NuisanceAuditResult {
        options: opts.clone(),
        controls_only,
        n_samples: data.len(),
        factors,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<String> = (0..100).map(|i| format!("c{}", i % 4)).collect();
        let (train, test) = stratified_split(&labels, 0.2, 3, "f");
        assert_eq!(test.len(), 20);
        assert_eq!(train.len(), 80);
        for c in 0..4 {
            let n = test.iter().filter(|&&i| labels[i] == format!("c{c}")).count();
            assert_eq!(n, 5);
        }
        assert!(test.iter().all(|i| !train.contains(i)));
        assert_eq!(stratified_split(&labels, 0.2, 3, "f"), (train, test));
    }

    #[test]
    fn factor_names_round_trip() {
        for f in NuisanceFactor::ALL {
            assert_eq!(NuisanceFactor::parse(f.as_str()).unwrap(), f);
        }
        assert!(NuisanceFactor::parse("well").is_err());
    }
}
