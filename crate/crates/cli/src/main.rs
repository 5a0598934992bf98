//! `platescope`: simulate plate experiments, featurize them, and audit the
//! features for nuisance signal.
//!
//! Exit status: 0 when clean, 1 when an audit raises a bias verdict, 2 on
//! usage or input errors.

/// `println!` that ignores a closed stdout instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "platescope", version, about = "Plate microscopy simulation and nuisance audits")]
struct Cli {
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Print the effective settings as JSON before running.
    #[arg(long, global = true)]
    emit_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic experiment: images, manifest, ground truth.
    Simulate(SimulateArgs),
    /// Segment nuclei and compute the 63 features per site or per cell.
    Featurize(FeaturizeArgs),
    /// Score focus quality per site and draw one heatmap per plate.
    FocusMap(FocusMapArgs),
    /// Project features to 2-D with t-SNE or PCA.
    Project(ProjectArgs),
    /// Run a nuisance, disease or density audit and write report.json.
    Audit {
        #[command(subcommand)]
        kind: AuditKind,
    },
    /// Render report.json as Markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Simulation config (JSON). Defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's root_seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitArg {
    Site,
    Patch,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturizeArgs {
    /// manifest.jsonl; image paths are resolved against its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = UnitArg::Site)]
    pub unit: UnitArg,
    /// Channel holding the nuclear stain.
    #[arg(long, default_value_t = 0)]
    pub nucleus_channel: usize,
    /// Smallest component kept as a nucleus, in pixels.
    #[arg(long, default_value_t = 4)]
    pub min_area: usize,
    /// Patch side for --unit patch.
    #[arg(long, default_value_t = 48)]
    pub patch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct FocusMapArgs {
    /// Manifest of the sites to score.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Focus model JSON. Loaded, or written when --train-from is given.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Train a model from the in-focus images of this manifest.
    #[arg(long)]
    pub train_from: Option<PathBuf>,
    /// Synthetic blur levels (sigma) for training.
    #[arg(long, value_delimiter = ',', default_value = "0,0.75,1.5,2.25,3")]
    pub levels: Vec<f64>,
    /// Most training images to read, evenly spaced over the manifest.
    #[arg(long, default_value_t = 200)]
    pub train_images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the per-plate SVGs and focus_scores.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Tsne,
    Pca,
}

#[derive(Debug, Args, Serialize)]
pub struct ProjectArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Tsne)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// PCA dimensions kept before t-SNE.
    #[arg(long, default_value_t = 30)]
    pub pca_dims: usize,
    /// Metadata column that colours the scatter plot.
    #[arg(long, default_value = "batch")]
    pub color_by: String,
    /// Neighbours used for the purity score.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// coords.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Scatter SVG; defaults to the --out path with an .svg extension.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum AuditKind {
    /// Predict batch, plate, row and column against permuted baselines.
    Nuisance(NuisanceArgs),
    /// Held-out prediction of disease condition.
    Disease(DiseaseArgs),
    /// Compare the full model with a cell-count-only model.
    Density(DensityArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CommonAuditArgs {
    /// Feature table CSV (or external embeddings with --family external).
    #[arg(long)]
    pub features: PathBuf,
    /// report.json to write.
    #[arg(long)]
    pub out: PathBuf,
    /// L2 penalty of the logistic models.
    #[arg(long, default_value_t = 1e-2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest of the experiment; supplies the config digest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Figures to link from the report, as paths relative to it.
    #[arg(long = "svg")]
    pub svgs: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct NuisanceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonAuditArgs,
    #[arg(long, value_delimiter = ',', default_value = "batch,plate,row,column")]
    pub factors: Vec<String>,
    /// Permutation repeats for the baseline (at least 3).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Required excess over chance for a biased verdict.
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldsArg {
    Pair,
    Batch,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    Full,
    #[value(name = "density_only", alias = "density-only")]
    DensityOnly,
    External,
}

#[derive(Debug, Args, Serialize)]
pub struct FoldArgs {
    #[arg(long, value_enum, default_value_t = FoldsArg::Pair)]
    pub folds: FoldsArg,
    /// pairs.json, a list of {"healthy": id, "disease": id}; required for pair folds.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DiseaseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonAuditArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub folds: FoldArgs,
    #[arg(long, value_enum, default_value_t = FamilyArg::Full)]
    pub family: FamilyArg,
}

#[derive(Debug, Args, Serialize)]
pub struct DensityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonAuditArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub folds: FoldArgs,
    /// Also write the density-only partial dependence curve as CSV.
    #[arg(long)]
    pub pdp_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Outcome of a successful command.
pub enum Verdict {
    Clean,
    Bias,
}

fn emit<T: Serialize>(enabled: bool, command: &str, settings: &T) {
    if enabled {
        let doc = serde_json::json!({ "command": command, "settings": settings });
        out!("{}", serde_json::to_string_pretty(&doc).expect("settings serialize"));
    }
}

fn run(cli: Cli) -> anyhow::Result<Verdict> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    let e = cli.emit_config;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a, e),
        Command::Featurize(a) => {
            emit(e, "featurize", &a);
            commands::featurize(&a)
        }
        Command::FocusMap(a) => {
            emit(e, "focus-map", &a);
            commands::focus_map(&a)
        }
        Command::Project(a) => {
            emit(e, "project", &a);
            commands::project(&a)
        }
        Command::Audit { kind } => match kind {
            AuditKind::Nuisance(a) => {
                emit(e, "audit nuisance", &a);
                commands::audit_nuisance(&a)
            }
            AuditKind::Disease(a) => {
                emit(e, "audit disease", &a);
                commands::audit_disease(&a)
            }
            AuditKind::Density(a) => {
                emit(e, "audit density", &a);
                commands::audit_density(&a)
            }
        },
        Command::Report(a) => {
            emit(e, "report", &a);
            commands::report(&a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    std::panic::set_hook(Box::new(|info| {
        eprintln!("error: internal failure: {info}");
    }));
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(Verdict::Clean)) => ExitCode::SUCCESS,
        Ok(Ok(Verdict::Bias)) => ExitCode::from(1),
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(2),
    }
}
