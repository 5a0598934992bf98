//! Otsu thresholding and 8-connected component labeling for nuclei.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::SiteImage;

const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusDetection {
    /// Intensity-weighted centroid `[x, y]`; pixel centers sit on integers.
    pub center: [f64; 2],
    pub area_px: usize,
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub detections: Vec<NucleusDetection>,
    pub threshold: Option<f64>,
    /// Set when the nucleus channel had zero variance.
    pub degenerate: bool,
}

/// Foreground mask from Otsu's method on a 256-bin histogram spanning the
/// plane's own `[min, max]`. Pixels in bins above the optimal split are
/// foreground. Returns `None` for a constant plane.
///
/// Because bins are relative to the value range, scaling a plane by a
/// positive constant leaves the mask unchanged.
pub fn otsu_mask(plane: &[f32]) -> Option<(Vec<bool>, f64)> {
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if plane.is_empty() || !(hi > lo) {
        return None;
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let width = (hi - lo) / OTSU_BINS as f64;
    let bin_of = |v: f32| (((v as f64 - lo) / width) as usize).min(OTSU_BINS - 1);

    let mut hist = [0u64; OTSU_BINS];
    for &v in plane {
        hist[bin_of(v)] += 1;
    }
    let total = plane.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    let mut best_k = 0;
    let mut best_var = -1.0;
    let (mut w_b, mut sum_b) = (0.0, 0.0);
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w_b += count as f64;
        sum_b += k as f64 * count as f64;
        let w_f = total - w_b;
        if w_b == 0.0 || w_f == 0.0 {
            continue;
        }
        let m_b = sum_b / w_b;
        let m_f = (sum_all - sum_b) / w_f;
        let between = w_b * w_f * (m_b - m_f) * (m_b - m_f);
        if between > best_var {
            best_var = between;
            best_k = k;
        }
    }
    let mask = plane.iter().map(|&v| bin_of(v) > best_k).collect();
    Some((mask, lo + (best_k + 1) as f64 * width))
}

/// Labels 8-connected foreground components. Returns one pixel-index list
/// per component, in order of each component's first pixel (row-major).
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    components
}

/// Detects nuclei on `channel`: Otsu foreground, 8-connected components,
/// components of at least `min_area` pixels, intensity-weighted centroids.
/// Detections are ordered by centroid `(y, x)`.
pub fn segment_nuclei(image: &SiteImage, channel: usize, min_area: usize) -> Result<Segmentation> {
    if channel >= image.channels() {
        return Err(Error::Input(format!(
            "nucleus channel {channel} out of range for {} channels",
            image.channels()
        )));
    }
    let plane = image.plane(channel);
    let Some((mask, threshold)) = otsu_mask(&plane) else {
        return Ok(Segmentation {
            detections: Vec::new(),
            threshold: None,
            degenerate: true,
        });
    };
    let width = image.width();
    let mut detections: Vec<NucleusDetection> = connected_components(&mask, image.height(), width)
        .into_iter()
        .filter(|c| c.len() >= min_area.max(1))
        .map(|pixels| {
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for &p in &pixels {
                let w = plane[p] as f64;
                sw += w;
                sx += w * (p % width) as f64;
                sy += w * (p / width) as f64;
            }
            NucleusDetection {
                center: [sx / sw, sy / sw],
                area_px: pixels.len(),
                mean_intensity: sw / pixels.len() as f64,
            }
        })
        .collect();
    detections.sort_by(|a, b| {
        a.center[1]
            .total_cmp(&b.center[1])
            .then(a.center[0].total_cmp(&b.center[0]))
    });
    Ok(Segmentation {
        detections,
        threshold: Some(threshold),
        degenerate: false,
    })
}

/// Appends detections as `site_id,x,y,area,mean_intensity` rows. Pass
/// `header = true` for the first site.
pub fn write_detections_csv<W: Write>(
    mut out: W,
    site_id: &str,
    detections: &[NucleusDetection],
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(out, "site_id,x,y,area,mean_intensity")?;
    }
    for d in detections {
        writeln!(
            out,
            "{site_id},{:.4},{:.4},{},{:.6}",
            d.center[0], d.center[1], d.area_px, d.mean_intensity
        )?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Renders isotropic spots on a flat background into a 1-channel image.
    pub(crate) fn spots(h: usize, w: usize, centers: &[[f64; 2]], sigma: f64, amp: f64) -> SiteImage {
        let mut plane = vec![0.05f32; h * w];
        for c in centers {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                    plane[y * w + x] += (amp * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                }
            }
        }
        SiteImage::from_planes(h, w, &[plane]).unwrap()
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = SiteImage::new(32, 32, 1, vec![0.3; 32 * 32]).unwrap();
        let seg = segment_nuclei(&img, 0, 4).unwrap();
        assert!(seg.detections.is_empty());
        assert!(seg.degenerate);
    }

    #[test]
    fn single_spot_centroid() {
        // Analytic centroid of a symmetric spot is its center.
        let img = spots(64, 64, &[[32.0, 32.0]], 3.0, 0.8);
        let seg = segment_nuclei(&img, 0, 4).unwrap();
        assert_eq!(seg.detections.len(), 1);
        let c = seg.detections[0].center;
        assert!((c[0] - 32.0).abs() < 1.0 && (c[1] - 32.0).abs() < 1.0, "{c:?}");
    }

    #[test]
    fn two_separated_spots() {
        let truth = [[22.0, 30.0], [42.0, 30.0]];
        let img = spots(64, 64, &truth, 3.0, 0.8);
        let seg = segment_nuclei(&img, 0, 4).unwrap();
        assert_eq!(seg.detections.len(), 2);
        for (d, t) in seg.detections.iter().zip(&truth) {
            assert!((d.center[0] - t[0]).abs() < 1.0 && (d.center[1] - t[1]).abs() < 1.0);
        }
    }

    #[test]
    fn ordering_by_y_then_x() {
        let img = spots(64, 64, &[[50.0, 10.0], [10.0, 50.0], [10.0, 10.0]], 2.0, 0.8);
        let seg = segment_nuclei(&img, 0, 4).unwrap();
        let centers: Vec<[i64; 2]> = seg
            .detections
            .iter()
            .map(|d| [d.center[0].round() as i64, d.center[1].round() as i64])
            .collect();
        assert_eq!(centers, vec![[10, 10], [50, 10], [10, 50]]);
    }

    #[test]
    fn min_area_filters_specks() {
        let mut plane = vec![0.0f32; 32 * 32];
        plane[5 * 32 + 5] = 1.0;
        for y in 20..25 {
            for x in 20..25 {
                plane[y * 32 + x] = 1.0;
            }
        }
        let img = SiteImage::from_planes(32, 32, &[plane]).unwrap();
        assert_eq!(segment_nuclei(&img, 0, 4).unwrap().detections.len(), 1);
        assert_eq!(segment_nuclei(&img, 0, 1).unwrap().detections.len(), 2);
    }

    #[test]
    fn diagonal_pixels_connect() {
        let mask = [true, false, false, true];
        assert_eq!(connected_components(&mask, 2, 2).len(), 1);
    }

    #[test]
    fn bad_channel_rejected() {
        let img = SiteImage::zeros(16, 16, 1).unwrap();
        assert!(segment_nuclei(&img, 1, 4).is_err());
    }

    #[test]
    fn otsu_mask_scale_invariant() {
        let img = spots(32, 32, &[[10.0, 12.0], [20.0, 20.0]], 2.0, 0.6);
        let plane = img.plane(0);
        let half: Vec<f32> = plane.iter().map(|v| v * 0.5).collect();
        assert_eq!(otsu_mask(&plane).unwrap().0, otsu_mask(&half).unwrap().0);
    }
}
