use crate::error::{Error, Result};
use crate::experiment::SiteKey;
use crate::image::SiteImage;

use super::segment::NucleusDetection;

pub const DEFAULT_PATCH_SIZE: usize = 48;

/// Fixed-size crop around one detected nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPatch {
    pub parent: SiteKey,
    pub center: [f64; 2],
    /// Index of the detection within its site.
    pub index: usize,
    pub image: SiteImage,
    /// Part of the window fell outside the site and was edge-padded.
    pub padded: bool,
}

impl CellPatch {
    pub fn id(&self) -> String {
        format!("{}#{}", self.parent.id(), self.index)
    }
}

/// Crops a `size × size` window per detection. The window's top-left
/// corner is `round(center) − size/2`, so a detection at the exact image
/// center of an even-sided image yields the central sub-array. Windows
/// that leave the image are filled by clamping to the nearest edge pixel.
pub fn crop_patches(
    image: &SiteImage,
    parent: &SiteKey,
    detections: &[NucleusDetection],
    size: usize,
) -> Result<Vec<CellPatch>> {
    if size == 0 || size % 2 != 0 {
        return Err(Error::Input(format!("patch size {size} must be even and positive")));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if size > h.min(w) {
        return Err(Error::Input(format!(
            "patch size {size} exceeds image {h}x{w}"
        )));
    }
    let half = (size / 2) as isize;
    detections
        .iter()
        .enumerate()
        .map(|(index, d)| {
            let x0 = d.center[0].round() as isize - half;
            let y0 = d.center[1].round() as isize - half;
            let padded = x0 < 0 || y0 < 0 || x0 + size as isize > w as isize || y0 + size as isize > h as isize;
            let mut data = Vec::with_capacity(size * size * ch);
            for py in 0..size as isize {
                let y = (y0 + py).clamp(0, h as isize - 1) as usize;
                for px in 0..size as isize {
                    let x = (x0 + px).clamp(0, w as isize - 1) as usize;
                    let base = (y * w + x) * ch;
                    data.extend_from_slice(&image.data()[base..base + ch]);
                }
            }
            Ok(CellPatch {
                parent: parent.clone(),
                center: d.center,
                index,
                image: SiteImage::new(size, size, ch, data)?,
                padded,
            })
        })
        .collect()
}
