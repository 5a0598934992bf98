//! Multi-channel float rasters and the `PTNS1` container.
//!
//! Layout on disk: the 5-byte magic `PTNS1`, then height, width and
//! channels as little-endian `u32`, then `height * width * channels`
//! little-endian `f32` values in channel-last, row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PTNS1";
pub const MIN_SIDE: usize = 16;
const HEADER_LEN: usize = 5 + 12;

#[derive(Debug, Clone, PartialEq)]
pub struct SiteImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl SiteImage {
    /// Validating constructor: sides ≥ 16, at least one channel, every
    /// value finite and within `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Validation(format!(
                "image {height}x{width} smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if channels == 0 {
            return Err(Error::Validation("image has zero channels".into()));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "image payload has {} values, expected {expected}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "pixel value {v} at offset {i} is outside [0, 1]"
            )));
        }
        Ok(SiteImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Build from per-channel planes (each `height * width`, row-major).
    /// Values are clamped into `[0, 1]`.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        let mut data = vec![0.0f32; height * width * channels];
        for (c, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::Validation(format!(
                    "plane {c} has {} values, expected {}",
                    plane.len(),
                    height * width
                )));
            }
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + c] = v.clamp(0.0, 1.0);
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copy of channel `c` as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        assert!(c < self.channels, "channel {c} out of range");
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f32>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Per-pixel mean over channels.
    pub fn mean_plane(&self) -> Vec<f32> {
        let inv = 1.0 / self.channels as f32;
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f32>() * inv)
            .collect()
    }

    /// Applies `f` to every plane, clamping the result into `[0, 1]`.
    pub fn map_planes(&self, mut f: impl FnMut(usize, &[f32]) -> Vec<f32>) -> SiteImage {
        let planes: Vec<Vec<f32>> = (0..self.channels).map(|c| f(c, &self.plane(c))).collect();
        SiteImage::from_planes(self.height, self.width, &planes).expect("shape preserved")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        for dim in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "image file is {} bytes, shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..5] != MAGIC {
            return Err(Error::Format("bad image magic (expected PTNS1)".into()));
        }
        let dim = |i: usize| {
            let off = 5 + 4 * i;
            u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
        };
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        if height < MIN_SIDE || width < MIN_SIDE || channels == 0 {
            return Err(Error::Format(format!(
                "invalid image dimensions {height}x{width}x{channels}"
            )));
        }
        let count = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != count * 4 {
            return Err(Error::Corrupt(format!(
                "image payload is {} bytes, expected {}",
                payload.len(),
                count * 4
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Corrupt(format!("non-finite pixel at offset {i}")));
        }
        SiteImage::new(height, width, channels, data).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

pub fn write_image(image: &SiteImage, path: &Path) -> Result<()> {
    fs::write(path, image.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<SiteImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SiteImage::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Normalized Gaussian kernel truncated at radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur of one plane with edge clamping. `sigma == 0`
/// returns the input unchanged.
pub fn gaussian_blur_plane(plane: &[f32], height: usize, width: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0f64; height * width];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * row[clamp(x as isize + k as isize - r, width)] as f64;
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * tmp[clamp(y as isize + k as isize - r, height) * width + x];
            }
            out[y * width + x] = acc as f32;
        }
    }
    out
}

/// Blur every channel of `image` with the same sigma.
pub fn gaussian_blur(image: &SiteImage, sigma: f64) -> SiteImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    image.map_planes(|_, p| gaussian_blur_plane(p, image.height, image.width, sigma))
}
