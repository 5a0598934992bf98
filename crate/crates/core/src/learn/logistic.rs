//! Multinomial logistic regression with internal standardization.
//!
//! The objective is the mean cross-entropy plus `(λ/2)‖W‖²` (intercepts
//! unpenalized). It is minimized by full-batch gradient descent: each
//! step tries a Barzilai–Borwein length and backtracks until the Armijo
//! condition (`c = 1e-4`) holds, so the loss never increases across
//! accepted steps.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lambda: 1e-2,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// Input columns used by the model, in order.
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Zero-variance input columns, ignored at predict time.
    pub dropped: Vec<usize>,
}

impl Standardization {
    fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut kept = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut dropped = Vec::new();
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > MIN_STD * m.abs().max(1.0) {
                kept.push(j);
                mean.push(m);
                std.push(sd);
            } else {
                dropped.push(j);
            }
        }
        Standardization {
            kept,
            mean,
            std,
            dropped,
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.kept.len()));
        for (k, &j) in self.kept.iter().enumerate() {
            let (m, s) = (self.mean[k], self.std[k]);
            out.column_mut(k)
                .iter_mut()
                .zip(x.column(j))
                .for_each(|(o, v)| *o = (v - m) / s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
    /// Loss after each accepted step, starting with the loss at zero.
    pub accepted_losses: Vec<f64>,
}

impl ConvergenceRecord {
    pub fn initial_loss(&self) -> f64 {
        self.accepted_losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.accepted_losses.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub classes: Vec<String>,
    pub feature_names: Vec<String>,
    /// `kept × K`, on the standardized scale.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub lambda: f64,
    pub standardization: Standardization,
    pub convergence: ConvergenceRecord,
}

/// The penalized multinomial cross-entropy over a fixed design.
///
/// Parameters are flattened as `W` (row-major, `d × K`) followed by the
/// `K` intercepts.
pub struct SoftmaxObjective<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    k: usize,
    lambda: f64,
}

impl<'a> SoftmaxObjective<'a> {
    pub fn new(x: ArrayView2<'a, f64>, y: &'a [usize], k: usize, lambda: f64) -> Self {
        assert_eq!(x.nrows(), y.len());
        SoftmaxObjective { x, y, k, lambda }
    }

    pub fn n_params(&self) -> usize {
        (self.x.ncols() + 1) * self.k
    }

    fn split<'t>(&self, theta: &'t [f64]) -> (ArrayView2<'t, f64>, &'t [f64]) {
        let d = self.x.ncols();
        let w = ArrayView2::from_shape((d, self.k), &theta[..d * self.k]).unwrap();
        (w, &theta[d * self.k..])
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.value_and_gradient(theta).0
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let n = self.x.nrows();
        let d = self.x.ncols();
        let (w, b) = self.split(theta);
        let mut z = self.x.dot(&w);
        for mut row in z.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
        }

        let mut loss = 0.0;
        // z becomes (P - Y) / n in place.
        for (i, mut row) in z.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut sum = 0.0;
            row.iter_mut().for_each(|v| {
                *v = (*v - max).exp();
                sum += *v;
            });
            let yi = self.y[i];
            loss -= (row[yi] / sum).ln();
            row.iter_mut().for_each(|v| *v /= sum * n as f64);
            row[yi] -= 1.0 / n as f64;
        }
        loss /= n as f64;
        loss += 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>();

        let gw = self.x.t().dot(&z) + &(&w * self.lambda);
        let gb = z.sum_axis(Axis(0));
        let mut grad = Vec::with_capacity(self.n_params());
        grad.extend(gw.iter().copied());
        grad.extend(gb.iter().copied());
        debug_assert_eq!(grad.len(), (d + 1) * self.k);
        (loss, grad)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `objective` from the zero vector.
fn minimize(objective: &SoftmaxObjective, opts: &TrainOptions) -> (Vec<f64>, ConvergenceRecord) {
    let mut theta = vec![0.0; objective.n_params()];
    let (mut f, mut g) = objective.value_and_gradient(&theta);
    let mut losses = vec![f];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if inf_norm(&g) < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let g2 = dot(&g, &g);
        let mut t = step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = theta.iter().zip(&g).map(|(p, gi)| p - t * gi).collect();
            let (ft, gt) = objective.value_and_gradient(&trial);
            if ft.is_finite() && ft <= f - ARMIJO_C * t * g2 {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((next, fn_, gn)) = accepted else {
            // No representable decrease left along -g.
            break;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        step = if sy > 0.0 {
            (dot(&s, &s) / sy).clamp(1e-10, 1e10)
        } else {
            (2.0 * t).min(1e10)
        };
        theta = next;
        f = fn_;
        g = gn;
        losses.push(f);
    }
    if !converged && inf_norm(&g) < opts.tol {
        converged = true;
    }
    let record = ConvergenceRecord {
        iterations,
        final_grad_norm: inf_norm(&g),
        converged,
        accepted_losses: losses,
    };
    (theta, record)
}

/// Sorted distinct labels and each row's class index.
pub fn encode_labels<S: AsRef<str>>(labels: &[S]) -> (Vec<String>, Vec<usize>) {
    let mut classes: Vec<String> = labels.iter().map(|s| s.as_ref().to_owned()).collect();
    classes.sort();
    classes.dedup();
    let y = labels
        .iter()
        .map(|s| classes.binary_search_by(|c| c.as_str().cmp(s.as_ref())).unwrap())
        .collect();
    (classes, y)
}

impl LogisticModel {
    /// Fits on `x` (n × d) with string labels. Classes are the sorted
    /// distinct labels.
    pub fn fit<S: AsRef<str>>(x: ArrayView2<f64>, labels: &[S], opts: &TrainOptions) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "{} rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        if let Some(((i, j), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite feature at row {i}, column {j}")));
        }
        if !(opts.lambda >= 0.0) || !opts.lambda.is_finite() {
            return Err(Error::Input(format!("lambda must be >= 0 (got {})", opts.lambda)));
        }
        let (classes, y) = encode_labels(labels);
        if classes.len() < 2 {
            return Err(Error::Degenerate(format!(
                "only one class present ({:?})",
                classes.first().map(String::as_str).unwrap_or("<none>")
            )));
        }
        if x.nrows() < classes.len() {
            return Err(Error::Input(format!(
                "{} rows for {} classes",
                x.nrows(),
                classes.len()
            )));
        }

        let standardization = Standardization::fit(x);
        let xs = standardization.transform(x);
        let k = classes.len();
        let objective = SoftmaxObjective::new(xs.view(), &y, k, opts.lambda);
        let (theta, convergence) = minimize(&objective, opts);

        let d = xs.ncols();
        let weights = (0..d)
            .map(|j| theta[j * k..(j + 1) * k].to_vec())
            .collect();
        let intercepts = theta[d * k..].to_vec();
        Ok(LogisticModel {
            classes,
            feature_names: (0..x.ncols()).map(|j| format!("x{j}")).collect(),
            weights,
            intercepts,
            lambda: opts.lambda,
            standardization,
            convergence,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.feature_names.len());
        self.feature_names = names;
        self
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Logits on raw (unstandardized) input rows.
    pub fn decision_function(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_features() {
            let missing: Vec<&str> = self
                .feature_names
                .iter()
                .skip(x.ncols())
                .map(String::as_str)
                .collect();
            return Err(Error::Schema(if missing.is_empty() {
                format!(
                    "model expects {} features, input has {}",
                    self.n_features(),
                    x.ncols()
                )
            } else {
                format!(
                    "model expects {} features, input has {}; missing: {}",
                    self.n_features(),
                    x.ncols(),
                    missing.join(", ")
                )
            }));
        }
        let xs = self.standardization.transform(x);
        let k = self.classes.len();
        let mut w = Array2::zeros((xs.ncols(), k));
        for (j, row) in self.weights.iter().enumerate() {
            w.row_mut(j).assign(&Array1::from(row.clone()));
        }
        let mut z = xs.dot(&w);
        for mut row in z.rows_mut() {
            row.iter_mut()
                .zip(&self.intercepts)
                .for_each(|(v, b)| *v += b);
        }
        Ok(z)
    }

    /// Softmax probabilities, `n × K`, columns in `classes` order.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = self.decision_function(x)?;
        for mut row in z.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Ok(z)
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<String>> {
        let p = self.predict_proba(x)?;
        Ok(p.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                self.classes[best].clone()
            })
            .collect())
    }

    /// Frobenius norm of the weight matrix.
    pub fn weight_norm(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("logistic model: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use ndarray::array;

    fn random_problem(n: usize, d: usize, k: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut s = derive_stream(seed, &["logistic-test"]);
        let x = Array2::from_shape_fn((n, d), |_| s.normal());
        let y = (0..n).map(|_| s.below(k)).collect();
        (x, y)
    }

    #[test]
    fn intercept_only_matches_frequencies() {
        // Single constant column is dropped, leaving intercepts only.
        let x = Array2::from_elem((10, 1), 3.0);
        let labels = ["a", "a", "a", "b", "b", "b", "b", "b", "b", "c"];
        let m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default()).unwrap();
        assert_eq!(m.standardization.dropped, vec![0]);
        let p = m.predict_proba(x.view()).unwrap();
        for row in p.rows() {
            assert!((row[0] - 0.3).abs() < 1e-6);
            assert!((row[1] - 0.6).abs() < 1e-6);
            assert!((row[2] - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn separable_toy_fits_exactly() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [3.0, 3.0], [3.0, 4.0]];
        let labels = ["neg", "neg", "pos", "pos"];
        let opts = TrainOptions {
            lambda: 1e-6,
            ..TrainOptions::default()
        };
        let m = LogisticModel::fit(x.view(), &labels, &opts).unwrap();
        assert_eq!(m.predict(x.view()).unwrap(), labels);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (x, y) = random_problem(20, 5, 3, 4);
        let obj = SoftmaxObjective::new(x.view(), &y, 3, 0.3);
        let mut s = derive_stream(4, &["theta"]);
        let theta: Vec<f64> = (0..obj.n_params()).map(|_| 0.5 * s.normal()).collect();
        let (_, g) = obj.value_and_gradient(&theta);
        let eps = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += eps;
            tm[i] -= eps;
            let fd = (obj.value(&tp) - obj.value(&tm)) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn losses_never_increase() {
        let (x, y) = random_problem(80, 6, 4, 9);
        let labels: Vec<String> = y.iter().map(|v| format!("c{v}")).collect();
        let m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default()).unwrap();
        let l = &m.convergence.accepted_losses;
        assert!(l.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.convergence.final_loss() <= m.convergence.initial_loss());
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Array2::zeros((3, 2));
        let err = LogisticModel::fit(x.view(), &["a", "a", "a"], &TrainOptions::default());
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn non_finite_feature_rejected() {
        let mut x = Array2::zeros((3, 2));
        x[[1, 1]] = f64::NAN;
        let err = LogisticModel::fit(x.view(), &["a", "b", "a"], &TrainOptions::default());
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let (x, y) = random_problem(30, 3, 3, 1);
        let labels: Vec<String> = y.iter().map(|v| format!("c{v}")).collect();
        let mut m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default()).unwrap();
        m.weights.iter_mut().flatten().for_each(|w| *w = 0.0);
        m.intercepts.iter_mut().for_each(|b| *b = 0.0);
        let p = m.predict_proba(x.view()).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn schema_mismatch_names_missing_features() {
        let (x, y) = random_problem(30, 3, 2, 2);
        let labels: Vec<String> = y.iter().map(|v| format!("c{v}")).collect();
        let m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default())
            .unwrap()
            .with_feature_names(vec!["area".into(), "mean".into(), "count".into()]);
        let err = m.predict_proba(x.slice(ndarray::s![.., 0..2])).unwrap_err().to_string();
        assert!(err.contains("count"), "{err}");
    }

    #[test]
    fn rows_sum_to_one() {
        let (x, y) = random_problem(50, 4, 5, 3);
        let labels: Vec<String> = y.iter().map(|v| format!("c{v}")).collect();
        let m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default()).unwrap();
        let p = m.predict_proba(x.view()).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_path_shrinks_weights() {
        let (x, y) = random_problem(60, 4, 2, 12);
        let labels: Vec<String> = y.iter().map(|v| format!("c{v}")).collect();
        let mut prev = f64::INFINITY;
        for lambda in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let opts = TrainOptions {
                lambda,
                max_iter: 5000,
                tol: 1e-8,
            };
            let m = LogisticModel::fit(x.view(), &labels, &opts).unwrap();
            assert!(m.convergence.converged);
            let norm = m.weight_norm();
            assert!(norm <= prev + 1e-9, "lambda {lambda}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn argmax_invariant_to_input_scaling() {
        let (x, y) = random_problem(60, 3, 3, 21);
        let labels: Vec<String> = y.iter().map(|v| format!("c{v}")).collect();
        let opts = TrainOptions::default();
        let m1 = LogisticModel::fit(x.view(), &labels, &opts).unwrap();
        let scaled = x.mapv(|v| 1000.0 * v + 7.0);
        let m2 = LogisticModel::fit(scaled.view(), &labels, &opts).unwrap();
        assert_eq!(m1.predict(x.view()).unwrap(), m2.predict(scaled.view()).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = random_problem(20, 2, 2, 5);
        let labels: Vec<String> = y.iter().map(|v| format!("c{v}")).collect();
        let m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default()).unwrap();
        assert_eq!(LogisticModel::from_json(&m.to_json()).unwrap(), m);
    }
}
