//! Occlusion saliency: how much a site-level score drops when a square
//! window is painted over with a background level.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::SiteImage;
use crate::learn::metrics::median;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyGrid {
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub stride: usize,
    pub base_score: f64,
    /// Row-major; `values[i * cols + j]` is `score(original) − score(occluded)`
    /// for the window whose top-left corner is `(i·stride, j·stride)`.
    pub values: Vec<f64>,
}

impl SaliencyGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,col,y0,x0,delta")?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                writeln!(
                    out,
                    "{i},{j},{},{},{:.9e}",
                    i * self.stride,
                    j * self.stride,
                    self.get(i, j)
                )?;
            }
        }
        Ok(())
    }
}

/// Per-channel median intensity, the default occlusion fill.
pub fn background_fill(image: &SiteImage) -> Vec<f32> {
    image
        .planes()
        .iter()
        .map(|p| {
            let v: Vec<f64> = p.iter().map(|x| *x as f64).collect();
            median(&v) as f32
        })
        .collect()
}

/// Copy of `image` with the `window × window` square at `(y0, x0)` set to
/// `fill` (one value per channel).
pub fn occlude(image: &SiteImage, y0: usize, x0: usize, window: usize, fill: &[f32]) -> SiteImage {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut data = image.data().to_vec();
    for y in y0..(y0 + window).min(h) {
        for x in x0..(x0 + window).min(w) {
            let base = (y * w + x) * ch;
            data[base..base + ch].copy_from_slice(fill);
        }
    }
    SiteImage::new(h, w, ch, data).expect("fill values validated")
}

/// Grid size per axis is `floor((side − window) / stride) + 1`. Cells are
/// scored in parallel; `score` must be deterministic.
pub fn occlusion_saliency<F>(
    score: F,
    image: &SiteImage,
    window: usize,
    stride: usize,
    fill: &[f32],
) -> Result<SaliencyGrid>
where
    F: Fn(&SiteImage) -> f64 + Sync,
{
    let (h, w) = (image.height(), image.width());
    if window == 0 || window > h.min(w) {
        return Err(Error::Input(format!(
            "occlusion window {window} must be in 1..={}",
            h.min(w)
        )));
    }
    if stride == 0 {
        return Err(Error::Input("occlusion stride must be positive".into()));
    }
    if fill.len() != image.channels() {
        return Err(Error::Input(format!(
            "fill has {} values for {} channels",
            fill.len(),
            image.channels()
        )));
    }
    if fill.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("fill values must lie in [0, 1]".into()));
    }
    let rows = (h - window) / stride + 1;
    let cols = (w - window) / stride + 1;
    let base_score = score(image);
    let values = (0..rows * cols)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / cols, cell % cols);
            base_score - score(&occlude(image, i * stride, j * stride, window, fill))
        })
        .collect();
    Ok(SaliencyGrid {
        rows,
        cols,
        window,
        stride,
        base_score,
        values,
    })
}
