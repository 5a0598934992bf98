use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use platescope::audit::{
    density_confound_check, density_pdp, disease_audit, nuisance_audit, AuditReport, ModelFamily,
    NuisanceFactor, NuisanceOptions, PdpSummary,
};
use platescope::experiment::{load_manifest, ExperimentManifest, LinePair, WellAddress};
use platescope::features::{
    feature_label, import_external_embeddings, featurize_manifest, FeatureTable, FeatureUnit,
    FeaturizeOptions, CELL_COUNT,
};
use platescope::image::read_image;
use platescope::imaging::{plate_gradient_metrics, plate_heatmap, train_focus_model, FocusModel};
use platescope::learn::{make_folds_leave_batch_out, make_folds_leave_pair_out, FoldSpec};
use platescope::project::{neighbor_purity, pca, prepare_embedding_input, scatter_svg, tsne, Projection2D, TsneOptions};
use platescope::simulate::{generate_experiment, SimConfig};
use platescope::hex_digest;
use rayon::prelude::*;

use crate::{
    CommonAuditArgs, DensityArgs, DiseaseArgs, FamilyArg, FeaturizeArgs, FocusMapArgs, FoldArgs,
    FoldsArg, MethodArg, NuisanceArgs, ProjectArgs, ReportArgs, SimulateArgs, UnitArg, Verdict,
};

const PURITY_COLUMNS: [&str; 7] = ["batch", "plate", "row", "column", "condition", "cell_line", "lab_source"];

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex_digest(&bytes))
}

pub fn simulate(a: &SimulateArgs, emit_config: bool) -> Result<Verdict> {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.root_seed = seed;
    }
    cfg.validate()?;
    if emit_config {
        let doc = serde_json::json!({ "command": "simulate", "settings": a, "config": cfg });
        out!("{}", serde_json::to_string_pretty(&doc)?);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let generated = generate_experiment(&cfg, &a.out)?;
    out!(
        "simulated {} sites in {} (config digest {})",
        generated.manifest.sites.len(),
        a.out.display(),
        generated.manifest.config_digest
    );
    Ok(Verdict::Clean)
}

pub fn featurize(a: &FeaturizeArgs) -> Result<Verdict> {
    let manifest = load_manifest(&a.manifest)?;
    let opts = FeaturizeOptions {
        unit: match a.unit {
            UnitArg::Site => FeatureUnit::Site,
            UnitArg::Patch => FeatureUnit::Patch,
        },
        nucleus_channel: a.nucleus_channel,
        min_area: a.min_area,
        patch_size: a.patch_size,
    };
    let table = featurize_manifest(&manifest, &base_dir(&a.manifest), &opts)?;
    table.write_csv(&a.out)?;
    out!("wrote {} rows x {} features to {}", table.len(), table.width(), a.out.display());
    Ok(Verdict::Clean)
}

/// Up to `n` indices spread evenly over `0..len`.
fn evenly_spaced(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|i| i * len / n).collect()
}

pub fn focus_map(a: &FocusMapArgs) -> Result<Verdict> {
    let model = match (&a.train_from, &a.model) {
        (Some(train), model_path) => {
            let m = load_manifest(train)?;
            let dir = base_dir(train);
            let images = evenly_spaced(m.sites.len(), a.train_images)
                .into_par_iter()
                .map(|i| read_image(&dir.join(&m.sites[i].image_path)))
                .collect::<platescope::Result<Vec<_>>>()?;
            let model = train_focus_model(&images, &a.levels, a.seed)?;
            out!(
                "trained focus model on {} images, {} levels, validation accuracy {:.4}",
                images.len(),
                model.levels.len(),
                model.validation_accuracy
            );
            if let Some(p) = model_path {
                model.save(p)?;
            }
            model
        }
        (None, Some(p)) => FocusModel::load(p)?,
        (None, None) => bail!("focus-map needs --model or --train-from"),
    };

    let manifest = load_manifest(&a.manifest)?;
    let dir = base_dir(&a.manifest);
    let scores = manifest
        .sites
        .par_iter()
        .map(|s| {
            let image = read_image(&dir.join(&s.image_path))?;
            model.score(&image)
        })
        .collect::<platescope::Result<Vec<_>>>()?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = String::from("site_id,score,degenerate\n");
    let mut plates: BTreeMap<(String, String), BTreeMap<(WellAddress, u32), f64>> = BTreeMap::new();
    let mut all = Vec::with_capacity(scores.len());
    let mut max_site = 0;
    for (site, score) in manifest.sites.iter().zip(&scores) {
        csv.push_str(&format!("{},{:.6},{}\n", site.key.id(), score.score, score.degenerate));
        plates
            .entry((site.key.batch.clone(), site.key.plate.clone()))
            .or_default()
            .insert((site.key.well, site.key.site_index), score.score);
        all.push((site.key.well, score.score));
        max_site = max_site.max(site.key.site_index + 1);
    }
    write_file(&a.out.join("focus_scores.csv"), &csv)?;
    let degenerate = scores.iter().filter(|s| s.degenerate).count();
    if degenerate > 0 {
        out!("{degenerate} sites had no usable focus features and scored 0");
    }

    for ((batch, plate), values) in &plates {
        let svg = plate_heatmap(values, max_site, &format!("Focus score {batch}/{plate}"))?;
        let path = a.out.join(format!("focus_{batch}_{plate}.svg"));
        write_file(&path, &svg)?;
        let wells: Vec<(WellAddress, f64)> = values.iter().map(|((w, _), v)| (*w, *v)).collect();
        if let Some(m) = plate_gradient_metrics(&wells) {
            out!("{}", metrics_line(&format!("{batch}/{plate}"), &m));
        }
    }
    if let Some(m) = plate_gradient_metrics(&all) {
        out!("{}", metrics_line("all", &m));
    }
    Ok(Verdict::Clean)
}

fn metrics_line(name: &str, m: &platescope::imaging::PlateGradientMetrics) -> String {
    format!(
        "plate={name} center_mean={:.4} corner_mean={:.4} center_minus_corner={:.4} distance_spearman={:.4} range={:.4}",
        m.center_mean,
        m.corner_mean,
        m.center_minus_corner(),
        m.distance_spearman,
        m.range
    )
}

pub fn project(a: &ProjectArgs) -> Result<Verdict> {
    let table = FeatureTable::read_csv(&a.features)?;
    let labels = table.metadata_column(&a.color_by)?;
    let (x, rows) = prepare_embedding_input(&table, a.pca_dims, a.seed)?;
    let keys: Vec<String> = rows.iter().map(|&i| table.rows[i].key.clone()).collect();
    let projection = match a.method {
        MethodArg::Tsne => {
            let opts = TsneOptions {
                perplexity: a.perplexity,
                iterations: a.iterations,
                seed: a.seed,
                ..TsneOptions::default()
            };
            tsne(x.view(), &keys, &opts)?
        }
        MethodArg::Pca => {
            let p = pca(x.view(), 2.min(x.ncols()))?;
            Projection2D {
                keys: keys.clone(),
                coords: p
                    .projected
                    .rows()
                    .into_iter()
                    .map(|r| [r[0], r.get(1).copied().unwrap_or(0.0)])
                    .collect(),
                perplexity: 0.0,
                iterations: 0,
                seed: a.seed,
                kl_after_exaggeration: f64::NAN,
                kl_final: f64::NAN,
                flagged_points: Vec::new(),
            }
        }
    };
    write_file(&a.out, &projection.to_csv_string())?;
    let color: Vec<String> = rows.iter().map(|&i| labels[i].clone()).collect();
    let svg = scatter_svg(&projection, &color, &format!("coloured by {}", a.color_by))?;
    let svg_path = a.svg.clone().unwrap_or_else(|| a.out.with_extension("svg"));
    write_file(&svg_path, &svg)?;

    if matches!(a.method, MethodArg::Tsne) {
        out!(
            "kl_after_exaggeration={:.6} kl_final={:.6}",
            projection.kl_after_exaggeration, projection.kl_final
        );
        if !projection.flagged_points.is_empty() {
            out!("{} points missed the perplexity tolerance", projection.flagged_points.len());
        }
    }
    for col in PURITY_COLUMNS {
        let all = table.metadata_column(col)?;
        let sub: Vec<String> = rows.iter().map(|&i| all[i].clone()).collect();
        out!("purity[{col}]={:.4}", neighbor_purity(&projection.coords, &sub, a.k));
    }
    Ok(Verdict::Clean)
}

fn start_report(common: &CommonAuditArgs, features_role: &str) -> Result<(AuditReport, Option<ExperimentManifest>)> {
    let mut report = AuditReport::default();
    report
        .inputs
        .insert(features_role.to_string(), file_digest(&common.features)?);
    let manifest = match &common.manifest {
        Some(p) => {
            let m = load_manifest(p)?;
            report.config_digest = Some(m.config_digest.clone());
            report.inputs.insert("manifest".into(), file_digest(p)?);
            Some(m)
        }
        None => None,
    };
    report.seeds.insert("audit".into(), common.seed);
    report.svgs = common.svgs.clone();
    Ok((report, manifest))
}

fn finish(mut report: AuditReport, out: &Path) -> Result<Verdict> {
    report.refresh_narrative();
    write_file(out, &report.to_json()?)?;
    for line in &report.narrative {
        out!("{line}");
    }
    Ok(if report.any_bias() {
        out!("verdict: bias detected");
        Verdict::Bias
    } else {
        out!("verdict: clean");
        Verdict::Clean
    })
}

pub fn audit_nuisance(a: &NuisanceArgs) -> Result<Verdict> {
    let (mut report, _) = start_report(&a.common, "features")?;
    let table = FeatureTable::read_csv(&a.common.features)?;
    let factors = a
        .factors
        .iter()
        .map(|f| NuisanceFactor::parse(f.trim()))
        .collect::<platescope::Result<Vec<_>>>()?;
    let opts = NuisanceOptions {
        factors,
        repeats: a.repeats,
        lambda: a.common.lambda,
        seed: a.common.seed,
        margin: a.margin,
        ..NuisanceOptions::default()
    };
    report.nuisance = Some(nuisance_audit(&table, &opts)?);
    finish(report, &a.common.out)
}

fn load_pairs(path: &Path) -> Result<Vec<LinePair>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs: Vec<LinePair> = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a list of {{\"healthy\", \"disease\"}} pairs", path.display()))?;
    if pairs.is_empty() {
        bail!("{} lists no pairs", path.display());
    }
    Ok(pairs)
}

fn make_folds(
    args: &FoldArgs,
    table: &FeatureTable,
    manifest: Option<&ExperimentManifest>,
    report: &mut AuditReport,
) -> Result<Vec<FoldSpec>> {
    // Folds come from the table itself unless a manifest supplies the
    // full cell-line metadata (lab sources).
    let derived;
    let m = match manifest {
        Some(m) => m,
        None => {
            derived = table.to_manifest()?;
            &derived
        }
    };
    Ok(match args.folds {
        FoldsArg::Pair => {
            let Some(path) = &args.pairs else {
                bail!("--folds pair needs --pairs pairs.json");
            };
            report.inputs.insert("pairs".into(), file_digest(path)?);
            make_folds_leave_pair_out(m, &load_pairs(path)?)?
        }
        FoldsArg::Batch => make_folds_leave_batch_out(m)?,
    })
}

pub fn audit_disease(a: &DiseaseArgs) -> Result<Verdict> {
    let family = match a.family {
        FamilyArg::Full => ModelFamily::Full,
        FamilyArg::DensityOnly => ModelFamily::DensityOnly,
        FamilyArg::External => ModelFamily::External,
    };
    let role = if family == ModelFamily::External { "embeddings" } else { "features" };
    let (mut report, manifest) = start_report(&a.common, role)?;
    let table = if family == ModelFamily::External {
        let Some(m) = &manifest else {
            bail!("--family external needs --manifest to join the embeddings");
        };
        import_external_embeddings(&a.common.features, m)?
    } else {
        FeatureTable::read_csv(&a.common.features)?
    };
    let folds = make_folds(&a.folds, &table, manifest.as_ref(), &mut report)?;
    report.disease.push(disease_audit(&table, &folds, family, a.common.lambda)?);
    finish(report, &a.common.out)
}

pub fn audit_density(a: &DensityArgs) -> Result<Verdict> {
    let (mut report, manifest) = start_report(&a.common, "features")?;
    let table = FeatureTable::read_csv(&a.common.features)?;
    let folds = make_folds(&a.folds, &table, manifest.as_ref(), &mut report)?;
    let check = density_confound_check(&table, &folds, a.common.lambda)?;
    let label = feature_label(CELL_COUNT);
    for family in [ModelFamily::DensityOnly, ModelFamily::Full] {
        let curve = density_pdp(&table, family, a.common.lambda)?;
        if family == ModelFamily::DensityOnly {
            if let Some(path) = &a.pdp_csv {
                let mut buf = Vec::new();
                curve.write_csv(&mut buf)?;
                write_file(path, &String::from_utf8(buf)?)?;
            }
        }
        report
            .pdp
            .push(PdpSummary::from_curve(&curve, &format!("{label} in {} model", family.as_str())));
    }
    report.density = Some(check);
    finish(report, &a.common.out)
}

pub fn report(a: &ReportArgs) -> Result<Verdict> {
    let report = AuditReport::load(&a.input)?;
    write_file(&a.out, &report.to_markdown())?;
    out!("wrote {}", a.out.display());
    Ok(Verdict::Clean)
}
