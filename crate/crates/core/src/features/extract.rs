use crate::error::{Error, Result};
use crate::image::SiteImage;
use crate::imaging::filters::{laplacian, local_variance, mean_var, sobel_magnitude};
use crate::imaging::segment::{otsu_mask, NucleusDetection};

pub const FEATURE_CHANNELS: usize = 5;
pub const PER_CHANNEL: usize = 12;
pub const FEATURE_COUNT: usize = FEATURE_CHANNELS * PER_CHANNEL + 3;
pub const SCHEMA_VERSION: u32 = 1;

/// Index of the cell-count feature.
pub const CELL_COUNT: usize = FEATURE_CHANNELS * PER_CHANNEL;

pub const SATURATION_LEVEL: f32 = 0.99;

const CHANNEL_STATS: [&str; PER_CHANNEL] = [
    "fg_area_fraction",
    "fg_mean",
    "fg_std",
    "bg_mean",
    "bg_std",
    "fg_bg_contrast",
    "total_intensity",
    "p75_intensity",
    "saturated_fraction",
    "laplacian_energy",
    "edge_density",
    "local_variance_mean",
];

/// Column id as written in `features.csv`: `f000` … `f062`.
pub fn feature_id(j: usize) -> String {
    format!("f{j:03}")
}

/// Descriptive name of feature `j`, e.g. `c2_fg_mean` or `cell_count`.
pub fn feature_label(j: usize) -> String {
    match j {
        j if j < CELL_COUNT => format!("c{}_{}", j / PER_CHANNEL, CHANNEL_STATS[j % PER_CHANNEL]),
        j if j == CELL_COUNT => "cell_count".into(),
        j if j == CELL_COUNT + 1 => "detection_area_mean".into(),
        j if j == CELL_COUNT + 2 => "detection_area_std".into(),
        _ => panic!("feature index {j} out of range"),
    }
}

pub fn cell_density(detections: &[NucleusDetection]) -> usize {
    detections.len()
}

/// The 12 per-channel statistics of one plane. The foreground mask is the
/// plane's own Otsu split; a constant plane has no foreground.
fn channel_stats(plane: &[f32], h: usize, w: usize) -> [f64; PER_CHANNEL] {
    let n = plane.len() as f64;
    let mask = otsu_mask(plane).map(|(m, _)| m);
    let fg = |i: usize| mask.as_ref().is_some_and(|m| m[i]);
    let (fg_mean, fg_var) = mean_var((0..plane.len()).filter(|&i| fg(i)).map(|i| plane[i] as f64));
    let (bg_mean, bg_var) = mean_var((0..plane.len()).filter(|&i| !fg(i)).map(|i| plane[i] as f64));
    let fg_count = (0..plane.len()).filter(|&i| fg(i)).count() as f64;

    let total: f64 = plane.iter().map(|v| *v as f64).sum();
    let mut sorted: Vec<f32> = plane.to_vec();
    sorted.sort_by(f32::total_cmp);
    let p75 = quantile(&sorted, 0.75);
    let saturated = plane.iter().filter(|v| **v >= SATURATION_LEVEL).count() as f64 / n;

    let lap_energy = mean_var(laplacian(plane, h, w).into_iter().map(|v| v * v)).0;
    let grad = sobel_magnitude(plane, h, w);
    let grad_f32: Vec<f32> = grad.iter().map(|v| *v as f32).collect();
    let edge_density = otsu_mask(&grad_f32)
        .map(|(m, _)| m.iter().filter(|b| **b).count() as f64 / n)
        .unwrap_or(0.0);
    let local_var = mean_var(local_variance(plane, h, w).into_iter()).0;

    [
        fg_count / n,
        fg_mean,
        fg_var.sqrt(),
        bg_mean,
        bg_var.sqrt(),
        if fg_count > 0.0 { fg_mean - bg_mean } else { 0.0 },
        total,
        p75,
        saturated,
        lap_energy,
        edge_density,
        local_var,
    ]
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f32], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    let a = sorted[i] as f64;
    let b = sorted[(i + 1).min(sorted.len() - 1)] as f64;
    a + f * (b - a)
}

fn detection_stats(detections: &[NucleusDetection]) -> [f64; 3] {
    // Integer sums keep the result exactly independent of detection order.
    let n = detections.len() as u64;
    if n == 0 {
        return [0.0; 3];
    }
    let sum: u64 = detections.iter().map(|d| d.area_px as u64).sum();
    let sum_sq: u64 = detections.iter().map(|d| (d.area_px as u64).pow(2)).sum();
    let mean = sum as f64 / n as f64;
    let var = (n * sum_sq - sum * sum) as f64 / (n * n) as f64;
    [n as f64, mean, var.sqrt()]
}

/// The 63-value site feature vector: 12 statistics for each of the 5
/// channels followed by cell count and the mean and standard deviation of
/// detection areas. The result does not depend on detection order.
pub fn extract_features(image: &SiteImage, detections: &[NucleusDetection]) -> Result<Vec<f64>> {
    let mut values = per_channel_features(image)?;
    values.extend(detection_stats(detections));
    debug_assert_eq!(values.len(), FEATURE_COUNT);
    Ok(values)
}

/// Patch features: the same per-channel statistics, cell count fixed at 1
/// and the patch's own detection area.
pub fn extract_patch_features(patch: &SiteImage, detection: &NucleusDetection) -> Result<Vec<f64>> {
    let mut values = per_channel_features(patch)?;
    values.extend([1.0, detection.area_px as f64, 0.0]);
    Ok(values)
}

fn per_channel_features(image: &SiteImage) -> Result<Vec<f64>> {
    if image.channels() != FEATURE_CHANNELS {
        return Err(Error::Schema(format!(
            "the 63-feature schema needs {FEATURE_CHANNELS} channels, image has {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut values = Vec::with_capacity(FEATURE_COUNT);
    for plane in image.planes() {
        values.extend(channel_stats(&plane, h, w));
    }
    Ok(values)
}
