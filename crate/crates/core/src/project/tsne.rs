//! Exact t-SNE.
//!
//! Per-point Gaussian bandwidths are found by bisection on the precision so
//! the conditional distribution has Shannon entropy `log2(perplexity)`.
//! The optimizer is the classic one: early exaggeration ×12, momentum 0.5
//! then 0.8, and per-coordinate adaptive gains. Rows of the gradient are
//! computed in parallel but each row is reduced in a fixed order, so the
//! result is bitwise independent of the thread count.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_stream;

pub const MAX_TSNE_ROWS: usize = 5000;
const ENTROPY_TOL: f64 = 1e-4;
const SEARCH_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: 30.0,
            iterations: 1000,
            seed: 0,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    /// Symmetric joint probabilities, `n × n`, summing to 1.
    pub p: Array2<f64>,
    /// Points whose entropy search missed the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub keys: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    /// KL divergence at the end of the exaggeration phase.
    pub kl_after_exaggeration: f64,
    pub kl_final: f64,
    pub flagged_points: Vec<usize>,
}

impl Projection2D {
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("key,x,y\n");
        for (k, c) in self.keys.iter().zip(&self.coords) {
            s.push_str(&format!("{k},{:.9e},{:.9e}\n", c[0], c[1]));
        }
        s
    }
}

fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            (0..n)
                .map(|j| {
                    xi.iter()
                        .zip(x.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect()
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| rows[i][j])
}

/// Conditional row `p_{j|i}` for precision `beta`; returns the row and its
/// entropy in bits.
fn conditional_row(d: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    // Shift by the smallest off-diagonal distance for numerical stability;
    // it cancels in the normalization.
    let d_min = d
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, &dij)| if j == i { 0.0 } else { (-(dij - d_min) * beta).exp() })
        .collect();
    let sum: f64 = row.iter().sum();
    let mut h = 0.0;
    for v in row.iter_mut() {
        *v /= sum;
        if *v > 0.0 {
            h -= *v * v.log2();
        }
    }
    (row, h)
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if n < 3 {
        return Err(Error::Input(format!("t-SNE needs at least 3 rows, got {n}")));
    }
    let limit = (n as f64 - 1.0) / 3.0;
    if !(perplexity > 0.0) || perplexity >= limit {
        return Err(Error::Config(format!(
            "perplexity {perplexity} out of range: must be positive and below (n - 1) / 3 = {limit:.4} for n = {n}"
        )));
    }
    Ok(())
}

/// Bisection on the precision of point `i` until the conditional row's
/// entropy is within tolerance of `log2(perplexity)` or the step budget
/// runs out. Returns the row and its entropy in bits.
pub fn calibrate_row(d: &[f64], i: usize, perplexity: f64) -> (Vec<f64>, f64) {
    let target = perplexity.log2();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let mut best = conditional_row(d, i, beta);
    for _ in 0..SEARCH_STEPS {
        let diff = best.1 - target;
        if diff.abs() <= ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        best = conditional_row(d, i, beta);
    }
    best
}

/// Calibrated symmetric affinities `P = (P_cond + P_condᵀ) / 2n`.
pub fn affinities(x: ArrayView2<f64>, perplexity: f64) -> Result<Affinities> {
    let n = x.nrows();
    check_perplexity(n, perplexity)?;
    let d = squared_distances(x);

    let allowed = (n as f64 - 1.0) - 3.0 * perplexity;
    for i in 0..n {
        let zeros = (0..n).filter(|&j| j != i && d[[i, j]] == 0.0).count();
        if zeros as f64 > allowed {
            return Err(Error::Degenerate(format!(
                "row {i} has {zeros} exact duplicates; at most {allowed:.1} allowed at perplexity {perplexity}"
            )));
        }
    }

    let rows: Vec<(Vec<f64>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (row, h) = calibrate_row(&d.row(i).to_vec(), i, perplexity);
            (row, (h - perplexity.log2()).abs() <= ENTROPY_TOL)
        })
        .collect();

    let flagged: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, (_, ok))| !ok)
        .map(|(i, _)| i)
        .collect();
    if !flagged.is_empty() {
        log::warn!("t-SNE: {} points missed the perplexity tolerance", flagged.len());
    }
    let denom = 2.0 * n as f64;
    let p = Array2::from_shape_fn((n, n), |(i, j)| (rows[i].0[j] + rows[j].0[i]) / denom);
    Ok(Affinities { p, flagged })
}

#[inline]
fn kernel(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    1.0 / (1.0 + dx * dx + dy * dy)
}

/// Normalizer `Z = Σ_{i≠j} 1 / (1 + ‖y_i − y_j‖²)`, summed row by row in
/// index order.
fn kernel_sum(y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| j != i).map(|j| kernel(y[i], y[j])).sum())
        .collect();
    rows.iter().sum()
}

pub fn kl_divergence(p: &Array2<f64>, y: &[[f64; 2]]) -> f64 {
    let z = kernel_sum(y);
    let n = y.len();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[[i, j]];
            if i != j && pij > 0.0 {
                kl += pij * (pij / (kernel(y[i], y[j]) / z).max(1e-300)).ln();
            }
        }
    }
    kl.max(0.0)
}

/// Embeds `x` in 2-D. Inputs above [`MAX_TSNE_ROWS`] rows must be
/// subsampled by the caller (see [`subsample_rows`]).
pub fn tsne(x: ArrayView2<f64>, keys: &[String], opts: &TsneOptions) -> Result<Projection2D> {
    let n = x.nrows();
    if keys.len() != n {
        return Err(Error::Input(format!("{} keys for {n} rows", keys.len())));
    }
    if n > MAX_TSNE_ROWS {
        return Err(Error::Input(format!(
            "exact t-SNE is limited to {MAX_TSNE_ROWS} rows, got {n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("t-SNE input contains non-finite values".into()));
    }
    let aff = affinities(x, opts.perplexity)?;
    let p = aff.p;

    let mut init = derive_stream(opts.seed, &["tsne-init"]);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-4 * init.normal(), 1e-4 * init.normal()])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_after_exaggeration = f64::NAN;

    for iter in 0..opts.iterations {
        let exaggerating = iter < opts.exaggeration_iters;
        let exag = if exaggerating { opts.exaggeration } else { 1.0 };
        let momentum = if exaggerating { 0.5 } else { 0.8 };
        let z = kernel_sum(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let wij = kernel(y[i], y[j]);
                    let coef = (exag * p[[i, j]] - wij / z) * wij;
                    g[0] += coef * (y[i][0] - y[j][0]);
                    g[1] += coef * (y[i][1] - y[j][1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();

        for i in 0..n {
            for c in 0..2 {
                let same_sign = (grad[i][c] > 0.0) == (velocity[i][c] > 0.0);
                gains[i][c] = if same_sign {
                    (gains[i][c] * 0.8).max(0.01)
                } else {
                    gains[i][c] + 0.2
                };
                velocity[i][c] =
                    momentum * velocity[i][c] - opts.learning_rate * gains[i][c] * grad[i][c];
                y[i][c] += velocity[i][c];
            }
        }
        let mean = [
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        ];
        for v in y.iter_mut() {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
        if iter + 1 == opts.exaggeration_iters {
            kl_after_exaggeration = kl_divergence(&p, &y);
        }
    }
    let kl_final = kl_divergence(&p, &y);
    if kl_after_exaggeration.is_nan() {
        kl_after_exaggeration = kl_final;
    }
    Ok(Projection2D {
        keys: keys.to_vec(),
        coords: y,
        perplexity: opts.perplexity,
        iterations: opts.iterations,
        seed: opts.seed,
        kl_after_exaggeration,
        kl_final,
        flagged_points: aff.flagged,
    })
}

/// Deterministic subsample of at most `max` row indices, sorted.
pub fn subsample_rows(n: usize, max: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n <= max {
        return idx;
    }
    use rand::seq::SliceRandom;
    idx.shuffle(&mut derive_stream(seed, &["tsne-subsample"]));
    idx.truncate(max);
    idx.sort_unstable();
    log::warn!("t-SNE: subsampled {n} rows to {max}");
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::project::neighbor_purity;
    use nalgebra::DMatrix;

    fn clusters(seed: u64) -> (Array2<f64>, Vec<String>) {
        let mut s = derive_stream(seed, &["clusters"]);
        let centers: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10).map(|_| s.normal() * 6.0 / 2f64.sqrt()).collect())
            .collect();
        let mut labels = Vec::new();
        let x = Array2::from_shape_fn((150, 10), |(i, j)| centers[i / 50][j] + s.normal());
        for i in 0..150 {
            labels.push(format!("c{}", i / 50));
        }
        (x, labels)
    }

    #[test]
    fn affinities_are_symmetric_and_normalized() {
        let (x, _) = clusters(1);
        let a = affinities(x.view(), 20.0).unwrap();
        assert!(a.flagged.is_empty());
        assert!((a.p.sum() - 1.0).abs() < 1e-9);
        for i in 0..150 {
            assert_eq!(a.p[[i, i]], 0.0);
            for j in 0..150 {
                assert!(a.p[[i, j]] >= 0.0);
                assert_eq!(a.p[[i, j]], a.p[[j, i]]);
            }
        }
    }

    #[test]
    fn entropy_hits_target() {
        let (x, _) = clusters(2);
        let d = squared_distances(x.view());
        for i in 0..150 {
            let (row, h) = calibrate_row(&d.row(i).to_vec(), i, 20.0);
            assert!((h - 20f64.log2()).abs() <= 1e-4, "row {i}: {h}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_leaves_affinities_unchanged() {
        let (x, _) = clusters(3);
        let mut s = derive_stream(3, &["rot"]);
        let m = DMatrix::from_fn(10, 10, |_, _| s.normal());
        let q = m.qr().q();
        let qa = Array2::from_shape_fn((10, 10), |(i, j)| q[(i, j)]);
        let rotated = x.dot(&qa);
        let a = affinities(x.view(), 20.0).unwrap();
        let b = affinities(rotated.view(), 20.0).unwrap();
        for (u, v) in a.p.iter().zip(b.p.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn separated_clusters_are_pure() {
        let (x, labels) = clusters(4);
        let keys: Vec<String> = (0..150).map(|i| format!("k{i:03}")).collect();
        let opts = TsneOptions {
            perplexity: 20.0,
            seed: 7,
            ..TsneOptions::default()
        };
        let proj = tsne(x.view(), &keys, &opts).unwrap();
        let purity = neighbor_purity(&proj.coords, &labels, 15);
        assert!(purity >= 0.9, "{purity}");
        assert!(proj.kl_final < proj.kl_after_exaggeration);
        assert!(proj.kl_final.is_finite() && proj.kl_final >= 0.0);
        let again = tsne(x.view(), &keys, &opts).unwrap();
        assert_eq!(again.coords, proj.coords);
    }

    #[test]
    fn duplicate_rows_land_together() {
        let mut s = derive_stream(5, &["dup"]);
        let mut x = Array2::from_shape_fn((60, 5), |_| s.normal());
        let row = x.row(3).to_owned();
        x.row_mut(40).assign(&row);
        let keys: Vec<String> = (0..60).map(|i| i.to_string()).collect();
        let opts = TsneOptions {
            perplexity: 10.0,
            iterations: 500,
            seed: 1,
            ..TsneOptions::default()
        };
        let proj = tsne(x.view(), &keys, &opts).unwrap();
        let dist = |a: usize, b: usize| {
            (proj.coords[a][0] - proj.coords[b][0]).hypot(proj.coords[a][1] - proj.coords[b][1])
        };
        let mut all: Vec<f64> = (0..60)
            .flat_map(|i| (i + 1..60).map(move |j| (i, j)))
            .map(|(i, j)| dist(i, j))
            .collect();
        all.sort_by(f64::total_cmp);
        let cutoff = all[all.len() / 100];
        assert!(dist(3, 40) <= cutoff, "{} > {cutoff}", dist(3, 40));
    }

    #[test]
    fn perplexity_range_checked() {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| (i * 3 + j) as f64);
        let keys: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let opts = TsneOptions {
            perplexity: 30.0,
            ..TsneOptions::default()
        };
        assert!(matches!(tsne(x.view(), &keys, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn too_many_duplicates_rejected() {
        let mut x = Array2::from_elem((20, 2), 1.0);
        x[[0, 0]] = 5.0;
        assert!(matches!(affinities(x.view(), 3.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn subsample_is_deterministic() {
        assert_eq!(subsample_rows(10, 20, 1), (0..10).collect::<Vec<_>>());
        let a = subsample_rows(100, 30, 4);
        assert_eq!(a.len(), 30);
        assert_eq!(a, subsample_rows(100, 30, 4));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
