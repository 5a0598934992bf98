//! Acceptance suite. One test per criterion; each prints a single
//! `criterion NN PASS|FAIL` line to stderr (visible without `--nocapture`)
//! before asserting.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use platescope::audit::{
    density_confound_check, disease_audit, nuisance_audit, ModelFamily, NuisanceFactor,
    NuisanceOptions,
};
use platescope::experiment::{CellLine, LabSource, WellAddress};
use platescope::features::{featurize_simulation, FeatureTable, FeaturizeOptions};
use platescope::imaging::{plate_gradient_metrics, train_focus_model};
use platescope::learn::logistic::{ConvergenceRecord, Standardization};
use platescope::learn::{
    make_folds_leave_pair_out, partial_dependence, roc_auc, FoldSpec, LogisticModel,
    SoftmaxObjective, TrainOptions,
};
use platescope::project::{neighbor_purity, prepare_embedding_input, tsne, TsneOptions};
use platescope::rng::derive_stream;
use platescope::simulate::{
    AffineShift, DensityConfound, FocusGradient, LabSourceSignal, PhenotypeSignal, SimConfig,
    Simulation,
};
use rayon::prelude::*;
use tempfile::TempDir;

const LAMBDA: f64 = 1e-2;

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:02} {status} {name}: {detail}");
    assert!(pass, "criterion {n:02} {name}: {detail}");
}

/// Desk scale: 2 batches x 3 plates x 96 wells x 4 sites, 64x64x5.
fn desk(seed: u64) -> SimConfig {
    SimConfig {
        root_seed: seed,
        ..SimConfig::default()
    }
}

fn featurized(cfg: &SimConfig) -> (Simulation, FeatureTable) {
    let sim = Simulation::new(cfg.clone()).unwrap();
    let (table, _) = featurize_simulation(&sim, &FeaturizeOptions::default()).unwrap();
    (sim, table)
}

fn with_folds(cfg: &SimConfig) -> (FeatureTable, Vec<FoldSpec>) {
    let (sim, table) = featurized(cfg);
    let folds = make_folds_leave_pair_out(sim.manifest(), &cfg.resolved_pairs()).unwrap();
    (table, folds)
}

fn batch_shift() -> AffineShift {
    AffineShift {
        gain_std: 0.2,
        offset_std: 0.2,
    }
}

#[test]
fn criterion_01_batch_effect_recovery() {
    let (_, table) = featurized(&SimConfig {
        batch_shift: batch_shift(),
        ..desk(101)
    });
    let r = nuisance_audit(&table, &NuisanceOptions::default()).unwrap();
    let b = r.factor(NuisanceFactor::Batch).unwrap();
    let pass = b.accuracy >= 0.8 && (b.baseline_mean - 0.5).abs() <= 0.1 && b.biased;
    verdict(
        1,
        "batch-effect recovery",
        pass,
        format!(
            "accuracy {:.3} (>= 0.8), baseline {:.3} (0.5 +/- 0.1), biased {}",
            b.accuracy, b.baseline_mean, b.biased
        ),
    );
}

#[test]
fn criterion_02_null_calibration() {
    let runs: Vec<(usize, f64)> = (1..=20u64)
        .map(|seed| {
            let (_, table) = featurized(&SimConfig {
                control_wells: WellAddress::all().collect(),
                ..desk(200 + seed)
            });
            let r = nuisance_audit(&table, &NuisanceOptions::default()).unwrap();
            let fired = r.factors.iter().filter(|f| f.biased).count();
            let worst = r
                .factors
                .iter()
                .map(|f| (f.accuracy - f.chance).abs())
                .fold(0.0, f64::max);
            (fired, worst)
        })
        .collect();
    let fired: usize = runs.iter().map(|r| r.0).sum();
    let worst = runs.iter().map(|r| r.1).fold(0.0, f64::max);
    verdict(
        2,
        "null calibration",
        fired <= 2 && worst <= 0.1,
        format!("{fired} bias verdicts over 20 runs (<= 2), largest |accuracy - chance| {worst:.3} (<= 0.1)"),
    );
}

#[test]
fn criterion_03_focus_gradient() {
    let flat = Simulation::new(SimConfig {
        batches: 1,
        plates_per_batch: 1,
        sites_per_well: 2,
        ..desk(301)
    })
    .unwrap();
    let train: Vec<_> = flat
        .manifest()
        .sites
        .par_iter()
        .map(|s| flat.render_site(s).0)
        .collect();
    let model = train_focus_model(&train, &[0.0, 0.75, 1.5, 2.25, 3.0], 0).unwrap();

    let sim = Simulation::new(SimConfig {
        focus_gradient: FocusGradient {
            sigma_max: 3.0,
            ..FocusGradient::default()
        },
        ..desk(302)
    })
    .unwrap();
    let scores: Vec<(WellAddress, f64)> = sim
        .manifest()
        .sites
        .par_iter()
        .map(|s| (s.key.well, model.score(&sim.render_site(s).0).unwrap().score))
        .collect();
    let m = plate_gradient_metrics(&scores).unwrap();
    let gap = m.center_minus_corner();
    verdict(
        3,
        "focus gradient",
        gap >= 0.2 && m.distance_spearman <= -0.6,
        format!(
            "center - corner {gap:.3} (>= 0.2), spearman {:.3} (<= -0.6)",
            m.distance_spearman
        ),
    );
}

#[test]
fn criterion_04_density_confound() {
    let (table, folds) = with_folds(&SimConfig {
        density_confound: DensityConfound {
            enabled: true,
            delta: 1.5,
        },
        ..desk(401)
    });
    let c = density_confound_check(&table, &folds, LAMBDA).unwrap();
    let full = c.full.median_auc.unwrap();
    let dens = c.density_only.median_auc.unwrap();

    let (table, folds) = with_folds(&SimConfig {
        phenotype_signal: PhenotypeSignal {
            enabled: true,
            ..PhenotypeSignal::default()
        },
        ..desk(402)
    });
    let p = density_confound_check(&table, &folds, LAMBDA).unwrap();

    let pass = dens >= full - 0.05 && full >= 0.75 && dens >= 0.75 && c.confound && !p.confound;
    verdict(
        4,
        "density confound",
        pass,
        format!(
            "density: full {full:.3}, density_only {dens:.3}, flag {}; phenotype only: full {:.3}, density_only {:.3}, flag {}",
            c.confound,
            p.full.median_auc.unwrap(),
            p.density_only.median_auc.unwrap(),
            p.confound
        ),
    );
}

/// Healthy lines from lab A, disease lines from lab B except D00. Lab B
/// brightens channel 2; the disease phenotype dims it.
fn lab_source_config(seed: u64) -> SimConfig {
    let mut cfg = desk(seed);
    cfg.cell_lines = cfg
        .cell_lines
        .iter()
        .map(|l| {
            let mut l: CellLine = l.clone();
            if l.id.starts_with('D') && l.id != "D00" {
                l.lab_source = LabSource::B;
            }
            l
        })
        .collect();
    cfg.lab_source_signal = LabSourceSignal {
        offset: vec![0.0, 0.0, 0.3, 0.0, 0.0],
    };
    cfg.phenotype_signal = PhenotypeSignal {
        enabled: true,
        effect_size: 0.0,
        channel: 2,
        intensity_shift: -0.3,
    };
    cfg
}

#[test]
fn criterion_05_lab_source_fold_anomaly() {
    let (table, folds) = with_folds(&lab_source_config(501));
    let r = disease_audit(&table, &folds, ModelFamily::Full, LAMBDA).unwrap();
    let same: Vec<usize> = r
        .folds
        .iter()
        .filter(|f| f.same_source == Some(true))
        .map(|f| f.fold)
        .collect();
    let gap = r.median_auc.unwrap() - r.worst_auc.unwrap();
    let pass = same.len() == 1 && r.worst_fold == Some(same[0]) && gap >= 0.15 && r.covariate_coincidence;
    verdict(
        5,
        "lab-source fold anomaly",
        pass,
        format!(
            "worst fold {:?} (same-source {:?}), auc {:.3}, median {:.3}, gap {gap:.3} (>= 0.15), flag {}",
            r.worst_fold,
            same,
            r.worst_auc.unwrap(),
            r.median_auc.unwrap(),
            r.covariate_coincidence
        ),
    );
}

fn batch_purity(table: &FeatureTable) -> f64 {
    let (x, rows) = prepare_embedding_input(table, 30, 0).unwrap();
    let keys: Vec<String> = rows.iter().map(|&i| table.rows[i].key.clone()).collect();
    let p = tsne(x.view(), &keys, &TsneOptions::default()).unwrap();
    let labels = table.metadata_column("batch").unwrap();
    let labels: Vec<String> = rows.iter().map(|&i| labels[i].clone()).collect();
    neighbor_purity(&p.coords, &labels, 10)
}

#[test]
fn criterion_06_tsne_batch_clustering() {
    let (_, shifted) = featurized(&SimConfig {
        batch_shift: batch_shift(),
        ..desk(601)
    });
    let (_, null) = featurized(&desk(602));
    let s = batch_purity(&shifted);
    let n = batch_purity(&null);
    verdict(
        6,
        "t-SNE batch clustering",
        s >= 0.8 && n <= 0.6,
        format!("shifted purity {s:.3} (>= 0.8), null purity {n:.3} (<= 0.6)"),
    );
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &p) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &q) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

#[test]
fn criterion_07_roc_auc_oracle() {
    let mut s = derive_stream(7, &["acceptance", "auc"]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 2 + s.below(49);
        let coarse = s.uniform() < 0.5;
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { s.below(5) as f64 } else { s.normal() })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| s.uniform() < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        let got = roc_auc(&scores, &labels).unwrap();
        worst = worst.max((got - brute_force_auc(&scores, &labels)).abs());
    }
    verdict(
        7,
        "ROC AUC oracle equivalence",
        worst <= 1e-12,
        format!("max |difference| {worst:.2e} over 1000 instances (<= 1e-12)"),
    );
}

#[test]
fn criterion_08_logistic_correctness() {
    let mut s = derive_stream(8, &["acceptance", "logistic"]);
    let mut worst_rel: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..50 {
        let n = 10 + s.below(50);
        let d = 1 + s.below(6);
        let k = 2 + s.below(3);
        let lambda = s.uniform();
        let x = Array2::from_shape_fn((n, d), |_| s.normal());
        let y: Vec<usize> = (0..n).map(|i| if i < k { i } else { s.below(k) }).collect();
        let obj = SoftmaxObjective::new(x.view(), &y, k, lambda);
        let theta: Vec<f64> = (0..obj.n_params()).map(|_| 0.5 * s.normal()).collect();
        let (_, g) = obj.value_and_gradient(&theta);
        let eps = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += eps;
            tm[i] -= eps;
            let fd = (obj.value(&tp) - obj.value(&tm)) / (2.0 * eps);
            worst_rel = worst_rel.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-8));
        }
        let labels: Vec<String> = y.iter().map(|c| format!("c{c}")).collect();
        let m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default()).unwrap();
        monotone &= m.convergence.accepted_losses.windows(2).all(|w| w[1] <= w[0]);
    }

    let mut freq_err: f64 = 0.0;
    for _ in 0..10 {
        let n = 20 + s.below(80);
        let labels: Vec<String> = (0..n).map(|i| format!("c{}", if i < 3 { i } else { s.below(3) })).collect();
        let x = Array2::from_elem((n, 2), 1.5);
        let exact = TrainOptions {
            tol: 1e-10,
            max_iter: 5000,
            ..TrainOptions::default()
        };
        let m = LogisticModel::fit(x.view(), &labels, &exact).unwrap();
        let p = m.predict_proba(x.view()).unwrap();
        for (c, class) in m.classes.iter().enumerate() {
            let f = labels.iter().filter(|l| *l == class).count() as f64 / n as f64;
            freq_err = freq_err.max((p[[0, c]] - f).abs());
        }
    }
    verdict(
        8,
        "logistic correctness",
        worst_rel < 1e-4 && monotone && freq_err <= 1e-6,
        format!(
            "max gradient rel. error {worst_rel:.2e} (< 1e-4), losses monotone {monotone}, intercept-only frequency error {freq_err:.2e} (<= 1e-6)"
        ),
    );
}

fn single_feature_model(d: usize, j: usize, a: f64, b: f64) -> LogisticModel {
    let mut weights = vec![vec![0.0, 0.0]; d];
    weights[j][1] = a;
    LogisticModel {
        classes: vec!["neg".into(), "pos".into()],
        feature_names: (0..d).map(|i| format!("x{i}")).collect(),
        weights,
        intercepts: vec![0.0, b],
        lambda: 0.0,
        standardization: Standardization {
            kept: (0..d).collect(),
            mean: vec![0.0; d],
            std: vec![1.0; d],
            dropped: vec![],
        },
        convergence: ConvergenceRecord {
            iterations: 0,
            final_grad_norm: 0.0,
            converged: true,
            accepted_losses: vec![0.0],
        },
    }
}

#[test]
fn criterion_09_pdp_analytic_recovery() {
    let mut s = derive_stream(9, &["acceptance", "pdp"]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = 1 + s.below(4);
        let j = s.below(d);
        let (a, b) = (3.0 * s.normal(), s.normal());
        let x = Array2::from_shape_fn((30, d), |_| 2.0 * s.normal());
        let m = single_feature_model(d, j, a, b);
        let curve = partial_dependence(&m, x.view(), j, 20, "pos").unwrap();
        assert_eq!(curve.grid.len(), 20);
        for (v, p) in curve.grid.iter().zip(&curve.probability) {
            worst = worst.max((p - 1.0 / (1.0 + (-(a * v + b)).exp())).abs());
        }
    }
    verdict(
        9,
        "PDP analytic recovery",
        worst <= 1e-6,
        format!("max |pdp - sigmoid(a v + b)| {worst:.2e} over 20 models x 20 points (<= 1e-6)"),
    );
}

/// simulate -> featurize -> audit nuisance -> audit density -> report, in
/// `dir`, returning the report bytes.
fn pipeline(dir: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let bin = env!("CARGO_BIN_EXE_platescope");
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let sim = p("sim");
    let manifest = format!("{sim}/manifest.jsonl");
    let pairs = format!("{sim}/pairs.json");
    let cfg = SimConfig {
        batch_shift: batch_shift(),
        ..desk(1001)
    };
    fs::write(p("config.json"), cfg.to_json_pretty()).unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--config".into(), p("config.json"), "--out".into(), sim.clone()],
        vec!["featurize".into(), "--manifest".into(), manifest.clone(), "--out".into(), p("features.csv")],
        vec![
            "audit".into(),
            "nuisance".into(),
            "--features".into(),
            p("features.csv"),
            "--manifest".into(),
            manifest.clone(),
            "--out".into(),
            p("report.json"),
        ],
        vec![
            "audit".into(),
            "density".into(),
            "--features".into(),
            p("features.csv"),
            "--manifest".into(),
            manifest,
            "--pairs".into(),
            pairs,
            "--out".into(),
            p("density.json"),
        ],
        vec!["report".into(), "--in".into(), p("report.json"), "--out".into(), p("report.md")],
    ];
    for args in steps {
        let o = Command::new(bin).arg("--threads").arg(threads).args(&args).output().unwrap();
        let code = o.status.code().unwrap();
        assert!(code <= 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    ["features.csv", "report.json", "density.json", "report.md"]
        .iter()
        .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn criterion_10_determinism() {
    let dirs: Vec<TempDir> = (0..3).map(|_| TempDir::new().unwrap()).collect();
    let one = pipeline(dirs[0].path(), "1");
    let eight = pipeline(dirs[1].path(), "8");
    let again = pipeline(dirs[2].path(), "8");
    let differing: Vec<&str> = one
        .iter()
        .zip(&eight)
        .zip(&again)
        .filter(|((a, b), c)| a.1 != b.1 || b.1 != c.1)
        .map(|((a, _), _)| a.0.as_str())
        .collect();
    verdict(
        10,
        "determinism",
        differing.is_empty(),
        format!(
            "3 runs (--threads 1, 8, 8): {} of {} outputs byte-identical{}",
            one.len() - differing.len(),
            one.len(),
            if differing.is_empty() { String::new() } else { format!(", differing {differing:?}") }
        ),
    );
}
