use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::derive_stream;

/// ROC AUC in the Mann–Whitney form: `(wins + ties/2) / (P·N)` over all
/// positive–negative pairs. Computed exactly by sorting and grouping tied
/// scores; counts are integers, so the only rounding is the final divide.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Input(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups in ascending score; every positive beats all
    // negatives already passed and ties with negatives in its own group.
    let mut negatives_below = 0u64;
    let mut twice_wins = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Shuffles each column independently, column `j` with the stream
/// `(seed, ["permute-columns", j])`. Column multisets are preserved while
/// the row-wise joint structure is destroyed.
pub fn permute_columns(x: &Array2<f64>, seed: u64) -> Array2<f64> {
    let mut out = x.clone();
    if x.nrows() < 2 {
        return out;
    }
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let mut stream = derive_stream(seed, &["permute-columns".to_string(), j.to_string()]);
        let mut values: Vec<f64> = col.to_vec();
        values.shuffle(&mut stream);
        col.iter_mut().zip(values).for_each(|(c, v)| *c = v);
    }
    out
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Median of a nonempty slice (mean of the two middle values for even n).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            r[k] = avg;
        }
        i = j;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, true, true]).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(brute_auc(&s, &l), 0.75);
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.75);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[2, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&["a", "b", "c", "d"], &["a", "b", "c", "x"]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn permutation_preserves_column_multisets() {
        let x = Array2::from_shape_fn((30, 4), |(i, j)| if j == 2 { 5.0 } else { (i * 7 + j) as f64 });
        let p = permute_columns(&x, 3);
        assert_ne!(p, x);
        for j in 0..4 {
            let mut a = x.column(j).to_vec();
            let mut b = p.column(j).to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        assert_eq!(p.column(2), x.column(2));
        assert_eq!(permute_columns(&x, 3), p);
    }

    #[test]
    fn spearman_of_monotone_is_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 25.0, 1000.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..8).prop_map(|v| v as f64 / 4.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force((s, l) in scored()) {
            prop_assume!(l.iter().any(|v| *v) && l.iter().any(|v| !*v));
            prop_assert!((roc_auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn auc_complement_and_monotone_invariance((s, l) in scored()) {
            prop_assume!(l.iter().any(|v| *v) && l.iter().any(|v| !*v));
            let a = roc_auc(&s, &l).unwrap();
            let flipped: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
            prop_assert!((roc_auc(&flipped, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
            let warped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 2.0).collect();
            prop_assert!((roc_auc(&warped, &l).unwrap() - a).abs() < 1e-12);
        }
    }
}
