use std::collections::BTreeMap;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::Condition;
use crate::features::{feature_id, FeatureTable, CELL_COUNT};
use crate::learn::metrics::median;
use crate::learn::{partial_dependence, roc_auc, FoldScheme, FoldSpec, LogisticModel, PdpCurve, TrainOptions};

/// Gate on `median(density_only) ≥ median(full) − DENSITY_GAP`.
pub const DENSITY_GAP: f64 = 0.05;
/// The full model must beat this median AUC before a density confound is
/// reported at all.
pub const DENSITY_MIN_FULL_AUC: f64 = 0.6;
pub const PDP_GRID: usize = 20;
/// How far the worst fold must trail the median AUC for the covariate
/// coincidence flag.
pub const COINCIDENCE_GAP: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Full,
    DensityOnly,
    External,
}

impl ModelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Full => "full",
            ModelFamily::DensityOnly => "density_only",
            ModelFamily::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelFamily::Full),
            "density_only" | "density-only" => Ok(ModelFamily::DensityOnly),
            "external" => Ok(ModelFamily::External),
            other => Err(Error::Input(format!("unknown model family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldResult {
    pub fold: usize,
    pub test_pair: Option<(String, String)>,
    pub same_source: Option<bool>,
    pub test_batch: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub auc: Option<f64>,
    /// Why the fold produced no AUC.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseAuditResult {
    pub family: ModelFamily,
    pub scheme: Option<FoldScheme>,
    pub lambda: f64,
    pub features: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub median_auc: Option<f64>,
    /// Fold id with the lowest AUC (first on ties).
    pub worst_fold: Option<usize>,
    pub worst_auc: Option<f64>,
    /// The worst fold holds out a same-source pair, falls below 0.5 and
    /// trails the median by [`COINCIDENCE_GAP`], while some other evaluated
    /// fold holds out a cross-source pair.
    pub covariate_coincidence: bool,
}

impl DiseaseAuditResult {
    pub fn fold(&self, id: usize) -> Option<&FoldResult> {
        self.folds.iter().find(|f| f.fold == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityCheck {
    pub full: DiseaseAuditResult,
    pub density_only: DiseaseAuditResult,
    /// `density_only − full` per fold, `None` where either AUC is missing.
    pub deltas: Vec<Option<f64>>,
    pub confound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdpSummary {
    pub feature: String,
    pub feature_label: String,
    pub class: String,
    pub grid_points: usize,
    pub min_probability: f64,
    pub max_probability: f64,
    pub range: f64,
    pub monotone: bool,
}

impl PdpSummary {
    pub fn from_curve(curve: &PdpCurve, label: &str) -> Self {
        let min = curve.probability.iter().copied().fold(f64::INFINITY, f64::min);
        let max = curve.probability.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        PdpSummary {
            feature: curve.feature_name.clone(),
            feature_label: label.to_string(),
            class: curve.class.clone(),
            grid_points: curve.grid.len(),
            min_probability: min,
            max_probability: max,
            range: curve.range(),
            monotone: curve.is_monotone(),
        }
    }
}

fn family_columns(table: &FeatureTable, family: ModelFamily) -> Result<Vec<usize>> {
    match family {
        ModelFamily::Full | ModelFamily::External => Ok((0..table.width()).collect()),
        ModelFamily::DensityOnly => {
            let name = feature_id(CELL_COUNT);
            table
                .column_index(&name)
                .map(|j| vec![j])
                .ok_or_else(|| Error::Input(format!("density-only model needs the {name} column")))
        }
    }
}

fn run_fold(
    table: &FeatureTable,
    cols: &[usize],
    rows_by_site: &BTreeMap<&str, Vec<usize>>,
    fold: &FoldSpec,
    opts: &TrainOptions,
) -> FoldResult {
    let gather = |sites: &[String]| -> Vec<usize> {
        let mut idx: Vec<usize> = sites
            .iter()
            .filter_map(|s| rows_by_site.get(s.as_str()))
            .flatten()
            .copied()
            .collect();
        idx.sort_unstable();
        idx
    };
    let train = gather(&fold.train);
    let test = gather(&fold.test);
    let mut result = FoldResult {
        fold: fold.id,
        test_pair: fold.test_pair.clone(),
        same_source: fold.same_source,
        test_batch: fold.test_batch.clone(),
        n_train: train.len(),
        n_test: test.len(),
        auc: None,
        error: None,
    };
    let outcome = (|| -> Result<f64> {
        let ytr: Vec<&str> = train.iter().map(|&i| table.rows[i].condition.as_str()).collect();
        if !ytr.iter().any(|l| *l == Condition::Disease.as_str())
            || !ytr.iter().any(|l| *l == Condition::Healthy.as_str())
        {
            return Err(Error::Audit(format!(
                "fold {} training set has a single condition",
                fold.id
            )));
        }
        if test.is_empty() {
            return Err(Error::Audit(format!("fold {} has no test rows", fold.id)));
        }
        let model = LogisticModel::fit(table.submatrix(&train, cols).view(), &ytr, opts)?;
        let k = model.class_index(Condition::Disease.as_str()).expect("disease class present");
        let proba = model.predict_proba(table.submatrix(&test, cols).view())?;
        let scores = proba.index_axis(Axis(1), k).to_vec();
        let labels: Vec<bool> = test
            .iter()
            .map(|&i| table.rows[i].condition == Condition::Disease)
            .collect();
        roc_auc(&scores, &labels)
    })();
    match outcome {
        Ok(auc) => result.auc = Some(auc),
        Err(e) => {
            log::warn!("disease audit fold {} skipped: {e}", fold.id);
            result.error = Some(e.to_string());
        }
    }
    result
}

/// Trains a condition classifier per fold and reports held-out ROC AUC.
/// Rows map to folds through their site id, so patch-level tables work
/// unchanged. Folds whose training data hold one condition, or whose test
/// data make the AUC undefined, are kept with an error record.
pub fn disease_audit(
    table: &FeatureTable,
    folds: &[FoldSpec],
    family: ModelFamily,
    lambda: f64,
) -> Result<DiseaseAuditResult> {
    if folds.is_empty() {
        return Err(Error::Input("disease audit needs at least one fold".into()));
    }
    let cols = family_columns(table, family)?;
    let mut rows_by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        rows_by_site.entry(r.site_id()).or_default().push(i);
    }
    let opts = TrainOptions {
        lambda,
        ..TrainOptions::default()
    };
    let mut results: Vec<FoldResult> = folds
        .par_iter()
        .map(|f| run_fold(table, &cols, &rows_by_site, f, &opts))
        .collect();
    results.sort_by_key(|r| r.fold);

    let aucs: Vec<f64> = results.iter().filter_map(|r| r.auc).collect();
    let median_auc = (!aucs.is_empty()).then(|| median(&aucs));
    let worst = results
        .iter()
        .filter_map(|r| r.auc.map(|a| (a, r)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.fold.cmp(&b.1.fold)));
    let mixed_sources = results
        .iter()
        .any(|r| r.auc.is_some() && r.same_source == Some(false));
    let covariate_coincidence = mixed_sources
        && worst.is_some_and(|(auc, r)| {
            r.same_source == Some(true)
                && auc < 0.5
                && median_auc.is_some_and(|m| m - auc >= COINCIDENCE_GAP)
        });
    Ok(DiseaseAuditResult {
        family,
        scheme: folds.first().map(|f| f.scheme),
        lambda,
        features: cols.iter().map(|&j| table.feature_names[j].clone()).collect(),
        worst_fold: worst.map(|(_, r)| r.fold),
        worst_auc: worst.map(|(a, _)| a),
        folds: results,
        median_auc,
        covariate_coincidence,
    })
}

/// Compares the full-feature model against one that sees only the cell
/// count.
pub fn density_confound_check(
    table: &FeatureTable,
    folds: &[FoldSpec],
    lambda: f64,
) -> Result<DensityCheck> {
    let full = disease_audit(table, folds, ModelFamily::Full, lambda)?;
    let density_only = disease_audit(table, folds, ModelFamily::DensityOnly, lambda)?;
    let deltas = full
        .folds
        .iter()
        .zip(&density_only.folds)
        .map(|(f, d)| Some(d.auc? - f.auc?))
        .collect();
    let confound = match (full.median_auc, density_only.median_auc) {
        (Some(f), Some(d)) => d >= f - DENSITY_GAP && f > DENSITY_MIN_FULL_AUC,
        _ => false,
    };
    Ok(DensityCheck {
        full,
        density_only,
        deltas,
        confound,
    })
}

/// Fits a condition model of the given family on every row and sweeps the
/// cell-count feature. In the full model the count shares its signal with
/// collinear intensity and area features, so its curve is usually flatter
/// than the density-only one.
pub fn density_pdp(table: &FeatureTable, family: ModelFamily, lambda: f64) -> Result<PdpCurve> {
    let name = feature_id(CELL_COUNT);
    let j = table
        .column_index(&name)
        .ok_or_else(|| Error::Input(format!("partial dependence needs the {name} column")))?;
    let cols = family_columns(table, family)?;
    let pos = cols.iter().position(|&c| c == j).expect("count column selected");
    let rows: Vec<usize> = (0..table.len()).collect();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.condition.as_str()).collect();
    let x = table.submatrix(&rows, &cols);
    let opts = TrainOptions {
        lambda,
        ..TrainOptions::default()
    };
    let names = cols.iter().map(|&c| table.feature_names[c].clone()).collect();
    let model = LogisticModel::fit(x.view(), &labels, &opts)?.with_feature_names(names);
    partial_dependence(&model, x.view(), pos, PDP_GRID, Condition::Disease.as_str())
}
