//! Hand-engineered image statistics, cell density, and the feature table.

pub mod extract;
pub mod table;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use extract::{
    cell_density, extract_features, extract_patch_features, feature_id, feature_label, CELL_COUNT,
    FEATURE_COUNT, SCHEMA_VERSION,
};
pub use table::{import_external_embeddings, FeatureRow, FeatureTable, METADATA_COLUMNS};

use crate::error::{Error, Result};
use crate::experiment::{ExperimentManifest, SiteRecord};
use crate::image::{read_image, SiteImage};
use crate::imaging::{crop_patches, segment_nuclei, DEFAULT_PATCH_SIZE, MIN_NUCLEUS_AREA, NUCLEUS_CHANNEL};
use crate::simulate::{GroundTruth, Simulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureUnit {
    Site,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeOptions {
    pub unit: FeatureUnit,
    pub nucleus_channel: usize,
    pub min_area: usize,
    pub patch_size: usize,
}

impl Default for FeaturizeOptions {
    fn default() -> Self {
        FeaturizeOptions {
            unit: FeatureUnit::Site,
            nucleus_channel: NUCLEUS_CHANNEL,
            min_area: MIN_NUCLEUS_AREA,
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

pub fn standard_feature_ids() -> Vec<String> {
    (0..FEATURE_COUNT).map(feature_id).collect()
}

/// Segments one site and returns its feature rows: one for the site, or
/// one per detected nucleus in patch mode.
pub fn featurize_site(
    manifest: &ExperimentManifest,
    site: &SiteRecord,
    image: &SiteImage,
    opts: &FeaturizeOptions,
) -> Result<Vec<FeatureRow>> {
    let line = manifest
        .cell_line(&site.cell_line)
        .ok_or_else(|| Error::Validation(format!("unknown cell line {:?}", site.cell_line)))?;
    let seg = segment_nuclei(image, opts.nucleus_channel, opts.min_area)?;
    let id = site.key.id();
    match opts.unit {
        FeatureUnit::Site => {
            let values = extract_features(image, &seg.detections)?;
            Ok(vec![FeatureRow::new(id, site, line, values)])
        }
        FeatureUnit::Patch => {
            let patches = crop_patches(image, &site.key, &seg.detections, opts.patch_size)?;
            patches
                .iter()
                .zip(&seg.detections)
                .map(|(p, d)| {
                    let values = extract_patch_features(&p.image, d)?;
                    Ok(FeatureRow::new(p.id(), site, line, values))
                })
                .collect()
        }
    }
}

fn assemble(rows: Vec<Vec<FeatureRow>>) -> Result<FeatureTable> {
    FeatureTable::new(standard_feature_ids(), rows.into_iter().flatten().collect())
}

/// Reads every site image (paths relative to `base_dir`) and featurizes
/// in parallel. The first unreadable image aborts with its path.
pub fn featurize_manifest(
    manifest: &ExperimentManifest,
    base_dir: &Path,
    opts: &FeaturizeOptions,
) -> Result<FeatureTable> {
    manifest.validate()?;
    let rows = manifest
        .sites
        .par_iter()
        .map(|site| {
            let image = read_image(&base_dir.join(&site.image_path))?;
            featurize_site(manifest, site, &image, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(rows)
}

/// Renders and featurizes a simulation in memory, without touching disk.
pub fn featurize_simulation(
    sim: &Simulation,
    opts: &FeaturizeOptions,
) -> Result<(FeatureTable, GroundTruth)> {
    let manifest = sim.manifest();
    let out = sim.render_all(|site, image, truth| {
        Ok((featurize_site(manifest, site, &image, opts)?, truth))
    })?;
    let (rows, truths): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((
        assemble(rows)?,
        GroundTruth {
            config_digest: sim.config().digest(),
            sites: truths,
        },
    ))
}
