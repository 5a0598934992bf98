//! Ordinal focus-quality scoring.
//!
//! A multinomial logistic model is trained to recognise which of several
//! synthetic blur levels an input was degraded to. Its class probabilities
//! are collapsed to a score in `[0, 1]` by expected rank:
//! `Σ_k p_k · (1 − k/(L−1))`, so all mass on the sharpest level gives 1.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur_plane, SiteImage};
use crate::learn::{accuracy, LogisticModel, TrainOptions};
use crate::rng::derive_stream;

use super::filters::{laplacian, mean_var, sobel_magnitude};

pub const MIN_TRAINING_IMAGES: usize = 50;

pub const FOCUS_FEATURE_NAMES: [&str; 5] = [
    "band_0_1",
    "band_1_2",
    "band_2_4",
    "laplacian_energy",
    "gradient_energy",
];

/// Scale-free frequency descriptors of the channel-mean plane: energy in
/// three difference-of-Gaussian bands and in the Laplacian and Sobel
/// responses, each divided by the plane variance and log-transformed.
/// Returns `None` for a constant plane.
pub fn focus_features(image: &SiteImage) -> Option<[f64; 5]> {
    focus_features_plane(&image.mean_plane(), image.height(), image.width())
}

fn focus_features_plane(plane: &[f32], h: usize, w: usize) -> Option<[f64; 5]> {
    let (_, var) = mean_var(plane.iter().map(|v| *v as f64));
    if !(var > 1e-14) {
        return None;
    }
    let g1 = gaussian_blur_plane(plane, h, w, 1.0);
    let g2 = gaussian_blur_plane(plane, h, w, 2.0);
    let g4 = gaussian_blur_plane(plane, h, w, 4.0);
    let band = |a: &[f32], b: &[f32]| {
        mean_var(a.iter().zip(b).map(|(x, y)| *x as f64 - *y as f64)).1 / var
    };
    let lap = mean_var(laplacian(plane, h, w).into_iter().map(|v| v * v)).0 / var;
    let grad = mean_var(sobel_magnitude(plane, h, w).into_iter().map(|v| v * v)).0 / var;
    let floor = 1e-12;
    Some([
        (band(plane, &g1) + floor).ln(),
        (band(&g1, &g2) + floor).ln(),
        (band(&g2, &g4) + floor).ln(),
        (lap + floor).ln(),
        (grad + floor).ln(),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusModel {
    /// Blur sigmas of the trained levels, strictly increasing.
    pub levels: Vec<f64>,
    pub model: LogisticModel,
    /// Accuracy on the held-out 20% of training images.
    pub validation_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusScore {
    pub score: f64,
    /// Constant input; the score is 0 by convention.
    pub degenerate: bool,
}

fn level_label(k: usize) -> String {
    format!("{k:03}")
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.len() < 2 {
        return Err(Error::Config(format!(
            "focus model needs at least 2 blur levels, got {}",
            levels.len()
        )));
    }
    if levels.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Config("blur levels must be finite and >= 0".into()));
    }
    if levels.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Config(format!(
            "blur levels must be strictly increasing without duplicates: {levels:?}"
        )));
    }
    Ok(())
}

/// Blurs every training image at every level, computes focus features and
/// fits a multinomial model over level indices. A seeded 80/20 split of the
/// images (not of the blurred copies) measures validation accuracy; the
/// final model is refit on all images.
pub fn train_focus_model(images: &[SiteImage], levels: &[f64], seed: u64) -> Result<FocusModel> {
    check_levels(levels)?;
    if images.len() < MIN_TRAINING_IMAGES {
        return Err(Error::Input(format!(
            "focus training needs at least {MIN_TRAINING_IMAGES} images, got {}",
            images.len()
        )));
    }

    let per_image: Vec<Vec<Option<[f64; 5]>>> = images
        .par_iter()
        .map(|img| {
            let (h, w) = (img.height(), img.width());
            let plane = img.mean_plane();
            levels
                .iter()
                .map(|&s| focus_features_plane(&gaussian_blur_plane(&plane, h, w, s), h, w))
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..images.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive_stream(seed, &["focus-split"]));
    }
    let n_val = images.len() / 5;
    let (val_idx, train_idx) = order.split_at(n_val);

    let design = |idx: &[usize]| -> (Array2<f64>, Vec<String>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &i in idx {
            for (k, f) in per_image[i].iter().enumerate() {
                if let Some(f) = f {
                    rows.extend_from_slice(f);
                    labels.push(level_label(k));
                }
            }
        }
        let n = labels.len();
        (Array2::from_shape_vec((n, 5), rows).expect("row width"), labels)
    };

    let opts = TrainOptions::default();
    let names: Vec<String> = FOCUS_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let fit = |x: &Array2<f64>, y: &[String]| -> Result<LogisticModel> {
        let m = LogisticModel::fit(x.view(), y, &opts)?.with_feature_names(names.clone());
        if !m.convergence.converged && m.convergence.final_grad_norm > 1e-3 {
            return Err(Error::Convergence(format!(
                "focus model stopped after {} iterations with gradient norm {:.3e} (loss {:.6} -> {:.6})",
                m.convergence.iterations,
                m.convergence.final_grad_norm,
                m.convergence.initial_loss(),
                m.convergence.final_loss()
            )));
        }
        Ok(m)
    };

    let (xt, yt) = design(train_idx);
    let (xv, yv) = design(val_idx);
    let held = fit(&xt, &yt)?;
    let validation_accuracy = if yv.is_empty() {
        f64::NAN
    } else {
        accuracy(&held.predict(xv.view())?, &yv)?
    };

    let (xa, ya) = design(&order);
    let model = fit(&xa, &ya)?;
    if model.classes.len() != levels.len() {
        return Err(Error::Degenerate(format!(
            "only {} of {} blur levels produced usable features",
            model.classes.len(),
            levels.len()
        )));
    }
    Ok(FocusModel {
        levels: levels.to_vec(),
        model,
        validation_accuracy,
        seed,
    })
}

/// Expected-rank score from level probabilities ordered sharpest first.
pub fn ordinal_score(probabilities: &[f64]) -> f64 {
    let l = probabilities.len();
    if l < 2 {
        return 1.0;
    }
    probabilities
        .iter()
        .enumerate()
        .map(|(k, p)| p * (1.0 - k as f64 / (l - 1) as f64))
        .sum()
}

impl FocusModel {
    pub fn level_probabilities(&self, image: &SiteImage) -> Result<Option<Vec<f64>>> {
        let Some(f) = focus_features(image) else {
            return Ok(None);
        };
        let x = Array2::from_shape_vec((1, 5), f.to_vec()).expect("one row");
        let p = self.model.predict_proba(x.view())?;
        // Classes are zero-padded level indices, so their sorted order is the
        // level order.
        Ok(Some(p.row(0).to_vec()))
    }

    pub fn score(&self, image: &SiteImage) -> Result<FocusScore> {
        Ok(match self.level_probabilities(image)? {
            Some(p) => FocusScore {
                score: ordinal_score(&p).clamp(0.0, 1.0),
                degenerate: false,
            },
            None => FocusScore {
                score: 0.0,
                degenerate: true,
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: FocusModel =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("focus model: {e}")))?;
        check_levels(&m.levels)?;
        if m.model.classes.len() != m.levels.len() {
            return Err(Error::Format(format!(
                "focus model has {} classes for {} levels",
                m.model.classes.len(),
                m.levels.len()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Convenience wrapper over [`FocusModel::score`].
pub fn focus_score(model: &FocusModel, image: &SiteImage) -> Result<FocusScore> {
    model.score(image)
}
