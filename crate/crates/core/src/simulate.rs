//! Synthetic plate experiments with injectable, ground-truth-recorded
//! nuisance effects.
//!
//! A site image is rendered in a fixed order:
//!
//! 1. background level plus white noise,
//! 2. `N` Gaussian cell spots, `N` drawn from a gamma–Poisson count model
//!    (scaled for disease lines when the density confound is on),
//! 3. batch then plate affine perturbation `x → clamp(g·x + b, 0, 1)`,
//! 4. focus blur with `σ = σ_max · d^γ` from the well's center distance.
//!
//! Lab-source and phenotype effects act on the spot amplitudes during step 2.
//! All randomness comes from path-keyed streams, so any site can be
//! rendered in isolation and in any order.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use crate::experiment::LinePair;
use crate::experiment::{
    save_manifest, CellLine, Condition, ExperimentManifest, LabSource, SiteKey, SiteRecord,
    WellAddress,
};
use crate::image::{gaussian_blur_plane, write_image, SiteImage};
use crate::rng::{derive_stream, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerCondition {
    pub healthy: f64,
    pub disease: f64,
}

impl PerCondition {
    pub fn get(&self, condition: Condition) -> f64 {
        match condition {
            Condition::Healthy => self.healthy,
            Condition::Disease => self.disease,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellModel {
    /// Expected cells per site before any density confound.
    pub count_mean: PerCondition,
    /// Gamma shape of the per-site rate; smaller means more overdispersion.
    pub count_dispersion: PerCondition,
    /// Gaussian sigma of the nuclear spot, in pixels.
    pub nucleus_sigma: f64,
    /// Minimum center-to-center distance between cells, in pixels.
    pub min_separation: f64,
    /// Peak spot intensity per channel.
    pub amplitude: Vec<f64>,
    /// Spot sigma per channel as a multiple of `nucleus_sigma`.
    pub spread: Vec<f64>,
    /// Log-normal sd of the per-cell brightness factor.
    pub amplitude_jitter: f64,
    pub background: f64,
    pub noise_std: f64,
}

impl Default for CellModel {
    fn default() -> Self {
        CellModel {
            count_mean: PerCondition {
                healthy: 16.0,
                disease: 16.0,
            },
            count_dispersion: PerCondition {
                healthy: 30.0,
                disease: 30.0,
            },
            nucleus_sigma: 1.5,
            min_separation: 8.0,
            amplitude: vec![0.8, 0.5, 0.45, 0.4, 0.35],
            spread: vec![1.0, 1.6, 1.4, 1.8, 1.2],
            amplitude_jitter: 0.1,
            background: 0.05,
            noise_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocusGradient {
    pub sigma_max: f64,
    pub gamma: f64,
}

impl Default for FocusGradient {
    fn default() -> Self {
        FocusGradient {
            sigma_max: 0.0,
            gamma: 1.0,
        }
    }
}

impl FocusGradient {
    pub fn sigma_at(&self, well: WellAddress) -> f64 {
        self.sigma_max * well.normalized_center_distance().powf(self.gamma)
    }
}

/// Per-channel gain and offset spread for a batch or plate effect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineShift {
    pub gain_std: f64,
    pub offset_std: f64,
}

impl AffineShift {
    pub fn is_active(&self) -> bool {
        self.gain_std > 0.0 || self.offset_std > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfound {
    pub enabled: bool,
    /// Multiplier on the expected cell count of disease lines.
    pub delta: f64,
}

impl Default for DensityConfound {
    fn default() -> Self {
        DensityConfound {
            enabled: false,
            delta: 1.5,
        }
    }
}

/// Staining offset added to the spot amplitude of lab-B lines, per channel.
/// Lab A is the reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabSourceSignal {
    pub offset: Vec<f64>,
}

impl LabSourceSignal {
    pub fn is_active(&self) -> bool {
        self.offset.iter().any(|v| *v != 0.0)
    }
}

/// A genuine disease phenotype on one channel: granular texture inside
/// disease cells (multiplicative per-pixel speckle of sd `effect_size`),
/// plus an optional relative brightness change `intensity_shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhenotypeSignal {
    pub enabled: bool,
    pub effect_size: f64,
    pub channel: usize,
    pub intensity_shift: f64,
}

impl Default for PhenotypeSignal {
    fn default() -> Self {
        PhenotypeSignal {
            enabled: false,
            effect_size: 0.6,
            channel: 3,
            intensity_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub root_seed: u64,
    pub batches: usize,
    pub plates_per_batch: usize,
    pub sites_per_well: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub cells: CellModel,
    /// Lines are laid out over the 96 wells by rotation: the line at
    /// well index `w` of global plate `p` is `(w + 5p) mod L`.
    pub cell_lines: Vec<CellLine>,
    /// Held-out healthy/disease pairs. Empty means pair the i-th healthy
    /// line with the i-th disease line in config order.
    pub pairs: Vec<LinePair>,
    pub control_wells: Vec<WellAddress>,
    pub focus_gradient: FocusGradient,
    pub batch_shift: AffineShift,
    pub plate_shift: AffineShift,
    pub density_confound: DensityConfound,
    pub lab_source_signal: LabSourceSignal,
    pub phenotype_signal: PhenotypeSignal,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            root_seed: 0,
            batches: 2,
            plates_per_batch: 3,
            sites_per_well: 4,
            height: 64,
            width: 64,
            channels: 5,
            cells: CellModel::default(),
            cell_lines: default_cell_lines(12, LabSource::A),
            pairs: Vec::new(),
            control_wells: default_control_wells(),
            focus_gradient: FocusGradient::default(),
            batch_shift: AffineShift::default(),
            plate_shift: AffineShift::default(),
            density_confound: DensityConfound::default(),
            lab_source_signal: LabSourceSignal::default(),
            phenotype_signal: PhenotypeSignal::default(),
        }
    }
}

/// `n` healthy lines `H00..` and `n` disease lines `D00..`, interleaved
/// so neighbouring wells alternate condition.
pub fn default_cell_lines(n: usize, lab: LabSource) -> Vec<CellLine> {
    let mut lines = Vec::with_capacity(2 * n);
    for i in 0..n {
        lines.push(CellLine {
            id: format!("H{i:02}"),
            subject_id: format!("S-H{i:02}"),
            condition: Condition::Healthy,
            subtype: "healthy".into(),
            lab_source: lab,
        });
        lines.push(CellLine {
            id: format!("D{i:02}"),
            subject_id: format!("S-D{i:02}"),
            condition: Condition::Disease,
            subtype: format!("sma{}", i % 3 + 1),
            lab_source: lab,
        });
    }
    lines
}

/// One control well per column, walking the rows: (c mod 8, c).
pub fn default_control_wells() -> Vec<WellAddress> {
    (0..12u8)
        .map(|c| WellAddress::new(c % 8, c).unwrap())
        .collect()
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("sim config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.batches == 0 || self.plates_per_batch == 0 || self.sites_per_well == 0 {
            return cfg_err("batches, plates_per_batch and sites_per_well must be >= 1".into());
        }
        if self.height < crate::image::MIN_SIDE || self.width < crate::image::MIN_SIDE {
            return cfg_err("image sides must be >= 16".into());
        }
        if self.channels == 0 {
            return cfg_err("channels must be >= 1".into());
        }
        if self.cell_lines.is_empty() {
            return cfg_err("no cell lines configured".into());
        }
        let c = &self.cells;
        if c.amplitude.len() != self.channels || c.spread.len() != self.channels {
            return cfg_err(format!(
                "cells.amplitude and cells.spread need {} entries",
                self.channels
            ));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        for (name, v) in [
            ("cells.count_mean.healthy", c.count_mean.healthy),
            ("cells.count_mean.disease", c.count_mean.disease),
            ("cells.nucleus_sigma", c.nucleus_sigma),
            ("cells.min_separation", c.min_separation),
            ("cells.amplitude_jitter", c.amplitude_jitter),
            ("cells.background", c.background),
            ("cells.noise_std", c.noise_std),
            ("focus_gradient.sigma_max", self.focus_gradient.sigma_max),
            ("batch_shift.gain_std", self.batch_shift.gain_std),
            ("batch_shift.offset_std", self.batch_shift.offset_std),
            ("plate_shift.gain_std", self.plate_shift.gain_std),
            ("plate_shift.offset_std", self.plate_shift.offset_std),
        ] {
            if !finite_nonneg(v) {
                return cfg_err(format!("{name} must be finite and >= 0 (got {v})"));
            }
        }
        if !(c.count_dispersion.healthy > 0.0 && c.count_dispersion.disease > 0.0)
            || !c.count_dispersion.healthy.is_finite()
            || !c.count_dispersion.disease.is_finite()
        {
            return cfg_err("cells.count_dispersion must be finite and > 0".into());
        }
        if c.nucleus_sigma <= 0.0 {
            return cfg_err("cells.nucleus_sigma must be > 0".into());
        }
        if c.amplitude.iter().chain(&c.spread).any(|v| !finite_nonneg(*v)) {
            return cfg_err("cells.amplitude and cells.spread must be finite and >= 0".into());
        }
        if !(self.focus_gradient.gamma > 0.0 && self.focus_gradient.gamma.is_finite()) {
            return cfg_err("focus_gradient.gamma must be > 0".into());
        }
        if !(self.density_confound.delta > 0.0 && self.density_confound.delta.is_finite()) {
            return cfg_err("density_confound.delta must be > 0".into());
        }
        let lab = &self.lab_source_signal.offset;
        if !lab.is_empty() && lab.len() != self.channels {
            return cfg_err(format!(
                "lab_source_signal.offset needs 0 or {} entries",
                self.channels
            ));
        }
        if lab.iter().any(|v| !v.is_finite()) {
            return cfg_err("lab_source_signal.offset must be finite".into());
        }
        let p = &self.phenotype_signal;
        if !finite_nonneg(p.effect_size) || !p.intensity_shift.is_finite() {
            return cfg_err("phenotype_signal effects must be finite".into());
        }
        if p.intensity_shift <= -1.0 {
            return cfg_err("phenotype_signal.intensity_shift must be > -1".into());
        }
        if p.channel >= self.channels {
            return cfg_err(format!("phenotype_signal.channel {} out of range", p.channel));
        }
        let mut seen = std::collections::BTreeSet::new();
        for line in &self.cell_lines {
            if !seen.insert(&line.id) {
                return cfg_err(format!("duplicate cell line {:?}", line.id));
            }
        }
        for pair in &self.pairs {
            for id in [&pair.healthy, &pair.disease] {
                if !seen.contains(id) {
                    return cfg_err(format!("pair references unknown line {id:?}"));
                }
            }
        }
        Ok(())
    }

    /// Configured pairs, or the default i-th healthy with i-th disease.
    pub fn resolved_pairs(&self) -> Vec<LinePair> {
        if !self.pairs.is_empty() {
            return self.pairs.clone();
        }
        let healthy = self
            .cell_lines
            .iter()
            .filter(|l| l.condition == Condition::Healthy);
        let disease = self
            .cell_lines
            .iter()
            .filter(|l| l.condition == Condition::Disease);
        healthy
            .zip(disease)
            .map(|(h, d)| LinePair {
                healthy: h.id.clone(),
                disease: d.id.clone(),
            })
            .collect()
    }

    pub fn batch_id(b: usize) -> String {
        format!("b{b}")
    }

    pub fn plate_id(p: usize) -> String {
        format!("p{p}")
    }
}

/// Lowercase hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-channel gain/offset drawn once for one batch or plate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAffine {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

impl EntityAffine {
    pub fn identity(channels: usize) -> Self {
        EntityAffine {
            gain: vec![1.0; channels],
            offset: vec![0.0; channels],
        }
    }

    /// Draws `(g_c, b_c) = (1 + gain_std·z, offset_std·z')` per channel
    /// from the entity's stream.
    pub fn draw(stream: &mut RngStream, shift: &AffineShift, channels: usize) -> Self {
        let mut gain = Vec::with_capacity(channels);
        let mut offset = Vec::with_capacity(channels);
        for _ in 0..channels {
            let zg = stream.normal();
            let zb = stream.normal();
            gain.push(1.0 + shift.gain_std * zg);
            offset.push(shift.offset_std * zb);
        }
        EntityAffine { gain, offset }
    }

    pub fn apply(&self, image: &SiteImage) -> SiteImage {
        image.map_planes(|c, plane| {
            let (g, b) = (self.gain[c], self.offset[c]);
            plane
                .iter()
                .map(|&x| (g * x as f64 + b).clamp(0.0, 1.0) as f32)
                .collect()
        })
    }
}

fn batch_affine(root_seed: u64, batch: &str, shift: &AffineShift, channels: usize) -> EntityAffine {
    let mut s = derive_stream(root_seed, &["batch-shift", batch]);
    EntityAffine::draw(&mut s, shift, channels)
}

fn plate_affine(
    root_seed: u64,
    batch: &str,
    plate: &str,
    shift: &AffineShift,
    channels: usize,
) -> EntityAffine {
    let mut s = derive_stream(root_seed, &["plate-shift", batch, plate]);
    EntityAffine::draw(&mut s, shift, channels)
}

/// Applies the batch's per-channel affine perturbation. Every site of the
/// batch receives the same `(g, b)`.
pub fn inject_batch_shift(
    image: &SiteImage,
    root_seed: u64,
    batch: &str,
    shift: &AffineShift,
) -> (SiteImage, EntityAffine) {
    let affine = batch_affine(root_seed, batch, shift, image.channels());
    (affine.apply(image), affine)
}

/// Plate analogue of [`inject_batch_shift`]; the plate stream is keyed by
/// both batch and plate id.
pub fn inject_plate_shift(
    image: &SiteImage,
    root_seed: u64,
    batch: &str,
    plate: &str,
    shift: &AffineShift,
) -> (SiteImage, EntityAffine) {
    let affine = plate_affine(root_seed, batch, plate, shift, image.channels());
    (affine.apply(image), affine)
}

/// Blurs with `σ = σ_max · d^γ`, `d` the normalized center distance of
/// the well. Returns the image and the sigma used.
pub fn inject_focus_gradient(
    image: &SiteImage,
    well: WellAddress,
    params: &FocusGradient,
) -> (SiteImage, f64) {
    let sigma = params.sigma_at(well);
    if sigma <= 0.0 {
        return (image.clone(), 0.0);
    }
    let (h, w) = (image.height(), image.width());
    let out = image.map_planes(|_, p| gaussian_blur_plane(p, h, w, sigma));
    (out, sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub site: String,
    pub cell_line: String,
    pub blur_sigma: f64,
    pub batch_gain: Vec<f64>,
    pub batch_offset: Vec<f64>,
    pub plate_gain: Vec<f64>,
    pub plate_offset: Vec<f64>,
    /// Per-channel amplitude offset from the line's lab source.
    pub lab_offset: Vec<f64>,
    pub expected_count: f64,
    /// Cells actually placed (after the minimum-separation constraint).
    pub true_count: usize,
    /// Spot centers as `[x, y]` in pixel coordinates.
    pub cell_centers: Vec<[f64; 2]>,
    pub active_confounders: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config_digest: String,
    pub sites: Vec<SiteTruth>,
}

impl GroundTruth {
    pub fn get(&self, site_id: &str) -> Option<&SiteTruth> {
        self.sites.iter().find(|s| s.site == site_id)
    }
}

/// Planned experiment: the layout is fixed by the config; images are
/// rendered on demand by [`Simulation::render_site`].
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    digest: String,
    manifest: ExperimentManifest,
    batch_affines: Vec<EntityAffine>,
    plate_affines: Vec<Vec<EntityAffine>>,
}

pub fn image_file_name(key: &SiteKey) -> String {
    format!(
        "{}_{}_{}_s{}.ptns",
        key.batch, key.plate, key.well, key.site_index
    )
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let digest = config.digest();
        let controls: std::collections::BTreeSet<WellAddress> =
            config.control_wells.iter().copied().collect();
        let n_lines = config.cell_lines.len();
        let mut sites = Vec::new();
        let mut batch_affines = Vec::new();
        let mut plate_affines = Vec::new();
        for b in 0..config.batches {
            let batch = SimConfig::batch_id(b);
            batch_affines.push(batch_affine(
                config.root_seed,
                &batch,
                &config.batch_shift,
                config.channels,
            ));
            let mut plates = Vec::new();
            for p in 0..config.plates_per_batch {
                let plate = SimConfig::plate_id(p);
                plates.push(plate_affine(
                    config.root_seed,
                    &batch,
                    &plate,
                    &config.plate_shift,
                    config.channels,
                ));
                let global_plate = b * config.plates_per_batch + p;
                for well in WellAddress::all() {
                    let line = &config.cell_lines[(well.index() + 5 * global_plate) % n_lines];
                    for s in 0..config.sites_per_well {
                        let key = SiteKey {
                            batch: batch.clone(),
                            plate: plate.clone(),
                            well,
                            site_index: s as u32,
                        };
                        sites.push(SiteRecord {
                            image_path: format!("images/{}", image_file_name(&key)),
                            key,
                            cell_line: line.id.clone(),
                            is_control: controls.contains(&well),
                        });
                    }
                }
            }
            plate_affines.push(plates);
        }
        let manifest = ExperimentManifest {
            config_digest: digest.clone(),
            cell_lines: config.cell_lines.clone(),
            sites,
        };
        manifest.validate()?;
        Ok(Simulation {
            config,
            digest,
            manifest,
            batch_affines,
            plate_affines,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn manifest(&self) -> &ExperimentManifest {
        &self.manifest
    }

    fn entity_indices(&self, key: &SiteKey) -> (usize, usize) {
        let b: usize = key.batch[1..].parse().expect("simulated batch id");
        let p: usize = key.plate[1..].parse().expect("simulated plate id");
        (b, p)
    }

    /// Renders one site. Pure: depends only on the config and the key.
    pub fn render_site(&self, site: &SiteRecord) -> (SiteImage, SiteTruth) {
        let cfg = &self.config;
        let cells = &cfg.cells;
        let line = self
            .manifest
            .cell_line(&site.cell_line)
            .expect("manifest validated");
        let id = site.key.id();
        let mut active = Vec::new();

        let density_on = cfg.density_confound.enabled && line.condition == Condition::Disease;
        let mut expected = cells.count_mean.get(line.condition);
        if density_on {
            expected *= cfg.density_confound.delta;
            active.push("density".to_string());
        }

        let site_stream = derive_stream(cfg.root_seed, &["site", id.as_str()]);
        let n_cells = draw_count(
            &mut site_stream.child("count"),
            expected,
            cells.count_dispersion.get(line.condition),
        );
        let centers = place_cells(
            &mut site_stream.child("positions"),
            n_cells,
            cfg.height,
            cfg.width,
            cells.nucleus_sigma,
            cells.min_separation,
        );

        let lab_offset: Vec<f64> = if line.lab_source == LabSource::B && cfg.lab_source_signal.is_active()
        {
            active.push("lab_source".to_string());
            cfg.lab_source_signal.offset.clone()
        } else {
            vec![0.0; cfg.channels]
        };
        let phenotype = cfg.phenotype_signal;
        let phenotype_on = phenotype.enabled && line.condition == Condition::Disease;
        if phenotype_on {
            active.push("phenotype".to_string());
        }

        let (h, w) = (cfg.height, cfg.width);
        let mut noise = site_stream.child("noise");
        let mut planes: Vec<Vec<f64>> = (0..cfg.channels)
            .map(|_| {
                (0..h * w)
                    .map(|_| cells.background + cells.noise_std * noise.normal())
                    .collect()
            })
            .collect();

        let mut bright = site_stream.child("brightness");
        let mut speckle = site_stream.child("texture");
        for center in &centers {
            let jitter = (cells.amplitude_jitter * bright.normal()).exp();
            for (c, plane) in planes.iter_mut().enumerate() {
                let mut amp = cells.amplitude[c] + lab_offset[c];
                if phenotype_on && c == phenotype.channel {
                    amp *= 1.0 + phenotype.intensity_shift;
                }
                amp *= jitter;
                let sigma = cells.nucleus_sigma * cells.spread[c];
                if sigma <= 0.0 || amp == 0.0 {
                    continue;
                }
                let textured = phenotype_on && c == phenotype.channel && phenotype.effect_size > 0.0;
                splat_spot(plane, h, w, *center, sigma, amp, |v| {
                    if textured {
                        v * (1.0 + phenotype.effect_size * speckle.normal()).max(0.0)
                    } else {
                        v
                    }
                });
            }
        }

        let planes: Vec<Vec<f32>> = planes
            .into_iter()
            .map(|p| p.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
            .collect();
        let mut image = SiteImage::from_planes(h, w, &planes).expect("config validated");

        let (b, p) = self.entity_indices(&site.key);
        let batch = &self.batch_affines[b];
        let plate = &self.plate_affines[b][p];
        if cfg.batch_shift.is_active() {
            image = batch.apply(&image);
            active.push("batch".to_string());
        }
        if cfg.plate_shift.is_active() {
            image = plate.apply(&image);
            active.push("plate".to_string());
        }
        let (image, blur_sigma) = inject_focus_gradient(&image, site.key.well, &cfg.focus_gradient);
        if blur_sigma > 0.0 {
            active.push("focus".to_string());
        }

        let truth = SiteTruth {
            site: id,
            cell_line: line.id.clone(),
            blur_sigma,
            batch_gain: batch.gain.clone(),
            batch_offset: batch.offset.clone(),
            plate_gain: plate.gain.clone(),
            plate_offset: plate.offset.clone(),
            lab_offset,
            expected_count: expected,
            true_count: centers.len(),
            cell_centers: centers,
            active_confounders: active,
        };
        (image, truth)
    }

    /// Renders every site in parallel and hands each `(record, image,
    /// truth)` to `sink`. Output order is manifest order regardless of
    /// thread count.
    pub fn render_all<T: Send>(
        &self,
        sink: impl Fn(&SiteRecord, SiteImage, SiteTruth) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        self.manifest
            .sites
            .par_iter()
            .map(|site| {
                let (image, truth) = self.render_site(site);
                sink(site, image, truth)
            })
            .collect()
    }
}

fn draw_count(stream: &mut RngStream, mean: f64, shape: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let rate = Gamma::new(shape, mean / shape)
        .expect("validated gamma parameters")
        .sample(stream);
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(stream) as usize
}

/// Uniform placement with rejection against `min_separation`; a cell that
/// finds no room in 200 attempts is dropped.
fn place_cells(
    stream: &mut RngStream,
    n: usize,
    height: usize,
    width: usize,
    nucleus_sigma: f64,
    min_separation: f64,
) -> Vec<[f64; 2]> {
    let margin = (2.0 * nucleus_sigma).min(height.min(width) as f64 / 4.0);
    let span_x = width as f64 - 1.0 - 2.0 * margin;
    let span_y = height as f64 - 1.0 - 2.0 * margin;
    let min_d2 = min_separation * min_separation;
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..200 {
            let x = margin + stream.uniform() * span_x;
            let y = margin + stream.uniform() * span_y;
            let ok = centers.iter().all(|c| {
                let (dx, dy) = (c[0] - x, c[1] - y);
                dx * dx + dy * dy >= min_d2
            });
            if ok {
                centers.push([x, y]);
                break;
            }
        }
    }
    centers
}

/// Adds `amp · exp(-r²/2σ²)` within radius `4σ`, passing each
/// contribution through `modulate` first.
fn splat_spot(
    plane: &mut [f64],
    height: usize,
    width: usize,
    center: [f64; 2],
    sigma: f64,
    amp: f64,
    mut modulate: impl FnMut(f64) -> f64,
) {
    let r = (4.0 * sigma).ceil();
    let (cx, cy) = (center[0], center[1]);
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(width - 1);
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(height - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let v = amp * (-(dx * dx + dy * dy) * inv).exp();
            plane[y * width + x] += modulate(v);
        }
    }
}

/// Written layout of a simulated experiment directory.
pub struct GeneratedExperiment {
    pub manifest: ExperimentManifest,
    pub truth: GroundTruth,
    pub pairs: Vec<LinePair>,
}

/// Renders every site to `out_dir/images/`, then writes `manifest.jsonl`,
/// `groundtruth.json`, `pairs.json` and the effective `config.json`.
pub fn generate_experiment(config: &SimConfig, out_dir: &Path) -> Result<GeneratedExperiment> {
    let sim = Simulation::new(config.clone())?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let truths = sim.render_all(|site, image, truth| {
        write_image(&image, &out_dir.join(&site.image_path))?;
        Ok(truth)
    })?;

    let manifest = sim.manifest().clone();
    let truth = GroundTruth {
        config_digest: sim.digest.clone(),
        sites: truths,
    };
    let pairs = config.resolved_pairs();

    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    write_json(&out_dir.join("groundtruth.json"), &truth)?;
    write_json(&out_dir.join("pairs.json"), &pairs)?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, config.to_json_pretty()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(GeneratedExperiment {
        manifest,
        truth,
        pairs,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
