//! Mean enhanced-alignment measure over 256 binarisation thresholds.

use ndarray::Array2;

use super::{check, EPS};
use crate::error::Result;

pub const E_THRESHOLDS: usize = 256;

/// Threshold `k` sits at the centre of the `k`-th of 256 equal bins of `[0, 1]`.
pub fn e_threshold(k: usize) -> f64 {
    (k as f64 + 0.5) / E_THRESHOLDS as f64
}

fn enhanced(fg: f64, g: f64, mean_fg: f64, mean_gt: f64) -> f64 {
    let a = fg - mean_fg;
    let b = g - mean_gt;
    let xi = 2.0 * a * b / (a * a + b * b + EPS);
    (xi + 1.0) * (xi + 1.0) / 4.0
}

/// Alignment score of a binary map given its confusion counts.
pub(crate) fn score_from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> f64 {
    let n = (tp + fp + fn_ + tn) as f64;
    let n_gt = tp + fn_;
    let n_fg = tp + fp;
    if n_gt == 0 {
        return (fn_ + tn) as f64 / n;
    }
    if n_gt as f64 == n {
        return n_fg as f64 / n;
    }
    let mf = n_fg as f64 / n;
    let mg = n_gt as f64 / n;
    let sum = tp as f64 * enhanced(1.0, 1.0, mf, mg)
        + fp as f64 * enhanced(1.0, 0.0, mf, mg)
        + fn_ as f64 * enhanced(0.0, 1.0, mf, mg)
        + tn as f64 * enhanced(0.0, 0.0, mf, mg);
    sum / n
}

/// Mean over thresholds of the per-pixel enhanced alignment between `pred ≥ t` and `gt`.
pub fn e_measure_mean(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check(pred, gt)?;
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g > 0.5 {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least = |v: &[f64], t: f64| v.len() - v.partition_point(|&x| x < t);
    let total: f64 = (0..E_THRESHOLDS)
        .map(|k| {
            let t = e_threshold(k);
            let tp = at_least(&pos, t);
            let fp = at_least(&neg, t);
            score_from_counts(tp, fp, pos.len() - tp, neg.len() - fp)
        })
        .sum();
    Ok(total / E_THRESHOLDS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_and_inverted() {
        let gt = array![[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]];
        assert!((e_measure_mean(&gt, &gt).unwrap() - 1.0).abs() < 1e-9);
        let inv = gt.mapv(|g| 1.0 - g);
        assert!(e_measure_mean(&inv, &gt).unwrap() < 0.3);
    }

    #[test]
    fn single_class_ground_truth() {
        let z = Array2::zeros((2, 2));
        assert_eq!(e_measure_mean(&z, &z).unwrap(), 1.0);
        let ones = Array2::ones((2, 2));
        assert_eq!(e_measure_mean(&ones, &ones).unwrap(), 1.0);
        assert_eq!(e_measure_mean(&z, &ones).unwrap(), 0.0);
    }
}
