//! Small edge-clamped filters over row-major planes.

#[inline]
fn at(plane: &[f32], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    plane[y * w + x] as f64
}

/// 4-neighbour discrete Laplacian.
pub fn laplacian(plane: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(plane, h, w, y, x);
            out.push(
                at(plane, h, w, y - 1, x)
                    + at(plane, h, w, y + 1, x)
                    + at(plane, h, w, y, x - 1)
                    + at(plane, h, w, y, x + 1)
                    - 4.0 * c,
            );
        }
    }
    out
}

/// Sobel gradient magnitude.
pub fn sobel_magnitude(plane: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| at(plane, h, w, y + dy, x + dx);
            let gx = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
            let gy = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Variance over each pixel's 3×3 neighbourhood.
pub fn local_variance(plane: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut s, mut ss) = (0.0, 0.0);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = at(plane, h, w, y + dy, x + dx);
                    s += v;
                    ss += v * v;
                }
            }
            let m = s / 9.0;
            out.push((ss / 9.0 - m * m).max(0.0));
        }
    }
    out
}

/// Population mean and variance.
pub fn mean_var(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    if n == 0.0 {
        (0.0, 0.0)
    } else {
        (mean, m2 / n)
    }
}
