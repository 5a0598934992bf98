use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::logistic::LogisticModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpCurve {
    pub feature: usize,
    pub feature_name: String,
    pub class: String,
    pub grid: Vec<f64>,
    pub probability: Vec<f64>,
    /// The feature was constant over the data; the curve has one point.
    pub constant_feature: bool,
}

impl PdpCurve {
    pub fn range(&self) -> f64 {
        let max = self.probability.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.probability.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn is_monotone(&self) -> bool {
        let p = &self.probability;
        p.windows(2).all(|w| w[1] >= w[0]) || p.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "grid,probability")?;
        for (g, p) in self.grid.iter().zip(&self.probability) {
            writeln!(out, "{g:.9e},{p:.9e}")?;
        }
        Ok(())
    }
}

/// Mean predicted probability of `class` as feature `feature` is swept
/// over `grid_size` evenly spaced values spanning its observed range, with
/// the other features left at their observed values.
pub fn partial_dependence(
    model: &LogisticModel,
    x: ArrayView2<f64>,
    feature: usize,
    grid_size: usize,
    class: &str,
) -> Result<PdpCurve> {
    if feature >= x.ncols() {
        return Err(Error::Input(format!(
            "feature {feature} out of range for {} columns",
            x.ncols()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Input("partial dependence over zero rows".into()));
    }
    let k = model
        .class_index(class)
        .ok_or_else(|| Error::Input(format!("model has no class {class:?}")))?;
    let col = x.column(feature);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let constant = lo == hi;
    let grid: Vec<f64> = if constant {
        log::warn!("partial dependence: feature {feature} is constant; single-point curve");
        vec![lo]
    } else {
        let m = grid_size.max(2);
        (0..m)
            .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
            .collect()
    };

    let mut work = x.to_owned();
    let mut probability = Vec::with_capacity(grid.len());
    for &v in &grid {
        work.column_mut(feature).fill(v);
        let p = model.predict_proba(work.view())?;
        probability.push(p.column(k).mean().unwrap());
    }
    Ok(PdpCurve {
        feature,
        feature_name: model
            .feature_names
            .get(feature)
            .cloned()
            .unwrap_or_else(|| format!("x{feature}")),
        class: class.to_owned(),
        grid,
        probability,
        constant_feature: constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::logistic::{ConvergenceRecord, Standardization, TrainOptions};
    use crate::rng::derive_stream;
    use ndarray::Array2;

    /// Binary model with logit(pos) = a·x_j + b on raw inputs, built by
    /// hand: identity standardization, weight only on feature j.
    fn analytic_model(d: usize, j: usize, a: f64, b: f64) -> LogisticModel {
        let mut weights = vec![vec![0.0, 0.0]; d];
        // classes ["neg", "pos"]; softmax of (0, a·x + b) is sigmoid(a·x + b).
        weights[j][1] = a;
        LogisticModel {
            classes: vec!["neg".into(), "pos".into()],
            feature_names: (0..d).map(|i| format!("x{i}")).collect(),
            weights,
            intercepts: vec![0.0, b],
            lambda: 0.0,
            standardization: Standardization {
                kept: (0..d).collect(),
                mean: vec![0.0; d],
                std: vec![1.0; d],
                dropped: vec![],
            },
            convergence: ConvergenceRecord {
                iterations: 0,
                final_grad_norm: 0.0,
                converged: true,
                accepted_losses: vec![0.0],
            },
        }
    }

    fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn single_feature_model_recovers_sigmoid() {
        let mut s = derive_stream(1, &["pdp"]);
        let x = Array2::from_shape_fn((40, 3), |_| s.normal());
        let (a, b) = (1.7, -0.4);
        let m = analytic_model(3, 1, a, b);
        let curve = partial_dependence(&m, x.view(), 1, 20, "pos").unwrap();
        assert_eq!(curve.grid.len(), 20);
        assert!(curve.grid.windows(2).all(|w| w[1] > w[0]));
        for (v, p) in curve.grid.iter().zip(&curve.probability) {
            assert!((p - sigmoid(a * v + b)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weight_feature_is_flat_at_mean_prediction() {
        let mut s = derive_stream(2, &["pdp"]);
        let x = Array2::from_shape_fn((40, 3), |_| s.normal());
        let m = analytic_model(3, 1, 2.0, 0.3);
        let curve = partial_dependence(&m, x.view(), 0, 10, "pos").unwrap();
        let mean_pred = m.predict_proba(x.view()).unwrap().column(1).mean().unwrap();
        for p in &curve.probability {
            assert!((p - mean_pred).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_feature_gives_single_point() {
        let mut s = derive_stream(3, &["pdp"]);
        let mut x = Array2::from_shape_fn((30, 2), |_| s.normal());
        x.column_mut(0).fill(4.0);
        let labels: Vec<&str> = (0..30).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let m = LogisticModel::fit(x.view(), &labels, &TrainOptions::default()).unwrap();
        let curve = partial_dependence(&m, x.view(), 0, 10, "b").unwrap();
        assert!(curve.constant_feature);
        assert_eq!(curve.grid, vec![4.0]);
        assert!(curve.probability.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn csv_header() {
        let m = analytic_model(1, 0, 1.0, 0.0);
        let x = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        let curve = partial_dependence(&m, x.view(), 0, 3, "pos").unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("grid,probability\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
