//! Structure measure: object-level plus region-level similarity.

use ndarray::{s, Array2, ArrayView2};

use super::{check, EPS};
use crate::error::Result;

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_term(pred: &Array2<f64>, gt: &Array2<bool>, u: f64) -> f64 {
    let fg = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g)
        .map(|(&p, _)| p);
    let bg = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| !g)
        .map(|(&p, _)| 1.0 - p);
    u * object_score(fg) + (1.0 - u) * object_score(bg)
}

/// SSIM-style similarity of one quadrant; 0 for an empty quadrant.
fn ssim(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = pred.sum() / n as f64;
    let y = gt.iter().filter(|&&g| g).count() as f64 / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let dp = p - x;
        let dg = f64::from(u8::from(g)) - y;
        sxx += dp * dp;
        syy += dg * dg;
        sxy += dp * dg;
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// One-based split point: rounded (ties to even) foreground centroid plus one.
pub(crate) fn centroid(gt: &Array2<bool>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let mut count = 0usize;
    let (mut sy, mut sx) = (0usize, 0usize);
    for ((y, x), &g) in gt.indexed_iter() {
        if g {
            count += 1;
            sy += y;
            sx += x;
        }
    }
    if count == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize + 1,
            (h as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    let cx = (sx as f64 / count as f64).round_ties_even() as usize;
    let cy = (sy as f64 / count as f64).round_ties_even() as usize;
    (cx + 1, cy + 1)
}

fn region_term(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let (x, y) = centroid(gt);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let q = |rs: std::ops::Range<usize>, cs: std::ops::Range<usize>| {
        ssim(pred.slice(s![rs.clone(), cs.clone()]), gt.slice(s![rs, cs]))
    };
    w1 * q(0..y, 0..x) + w2 * q(0..y, x..w) + w3 * q(y..h, 0..x) + w4 * q(y..h, x..w)
}

/// `alpha·S_object + (1 − alpha)·S_region`, floored at 0.
pub fn s_measure(pred: &Array2<f64>, gt: &Array2<f64>, alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    let gt = gt.mapv(|g| g > 0.5);
    let n = gt.len() as f64;
    let u = gt.iter().filter(|&&g| g).count() as f64 / n;
    if u == 0.0 {
        return Ok(1.0 - pred.mean().unwrap_or(0.0));
    }
    if u == 1.0 {
        return Ok(pred.mean().unwrap_or(0.0));
    }
    let score = alpha * object_term(pred, &gt, u) + (1.0 - alpha) * region_term(pred, &gt);
    Ok(score.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_and_degenerate_cases() {
        let gt = array![[0.0, 1.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        assert!((s_measure(&gt, &gt, 0.5).unwrap() - 1.0).abs() < 1e-6);
        let z = Array2::zeros((3, 3));
        assert_eq!(s_measure(&z, &z, 0.5).unwrap(), 1.0);
        let ones = Array2::ones((3, 3));
        assert!(
            (s_measure(&Array2::from_elem((3, 3), 0.25), &ones, 0.5).unwrap() - 0.25).abs() < 1e-12
        );
    }

    #[test]
    fn centroid_rounds_half_to_even() {
        let gt = array![[true, false, false, true]];
        assert_eq!(centroid(&gt), (3, 1));
        let gt = array![[false, true, false, true]];
        assert_eq!(centroid(&gt), (3, 1));
    }
}
