use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k × d`, rows are unit-norm principal axes.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    /// Share of total variance per component, descending.
    pub explained_ratio: Vec<f64>,
    /// `n × k` scores of the fitted data.
    pub projected: Array2<f64>,
}

impl Pca {
    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut centered = x.to_owned();
        for mut row in centered.rows_mut() {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        centered.dot(&self.components.t())
    }

    pub fn inverse_transform(&self, scores: ArrayView2<f64>) -> Array2<f64> {
        let mut x = scores.dot(&self.components);
        for mut row in x.rows_mut() {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        }
        x
    }
}

/// Principal components from the eigendecomposition of the sample
/// covariance. Each axis's sign is fixed so its largest-magnitude entry is
/// positive, making the output reproducible.
pub fn pca(x: ArrayView2<f64>, k: usize) -> Result<Pca> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Input(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Input(format!(
            "PCA components k = {k} must be in 1..={}",
            n.min(d)
        )));
    }
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("PCA input has zero variance".into()));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Array2::zeros((k, d));
    let mut explained_variance = Vec::with_capacity(k);
    for (r, &idx) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[r, j]] = sign * v[j];
        }
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    let explained_ratio = explained_variance.iter().map(|v| v / total).collect();
    let mut fitted = Pca {
        mean,
        components,
        explained_variance,
        explained_ratio,
        projected: Array2::zeros((0, k)),
    };
    fitted.projected = fitted.transform(x);
    Ok(fitted)
}
