//! Weighted F-measure: errors are smoothed by a Gaussian dependency field and
//! background errors are amplified with distance to the foreground. The
//! smoothing replicates edge pixels so that border errors are not diluted.

use ndarray::Array2;

use super::{check, EPS};
use crate::error::Result;

pub const GAUSSIAN_SIZE: usize = 7;
pub const GAUSSIAN_SIGMA: f64 = 5.0;
/// Distance at which the background importance reaches 1.5.
pub const DISTANCE_DECAY: f64 = 5.0;

/// Normalised `size×size` Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k = Array2::from_shape_fn((size, size), |(i, j)| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let s = k.sum();
    k / s
}

/// For every pixel: squared distance to the nearest foreground pixel and that pixel's row-major index.
///
/// Ties are broken by the smallest index. Foreground pixels map to themselves.
pub fn nearest_foreground(gt: &Array2<bool>) -> Array2<(usize, usize)> {
    let (h, w) = gt.dim();
    // Nearest foreground column within each row, ties to the left.
    let mut row_nearest: Vec<Vec<Option<usize>>> = vec![vec![None; w]; h];
    for r in 0..h {
        let mut left: Vec<Option<usize>> = vec![None; w];
        let mut last = None;
        for c in 0..w {
            if gt[[r, c]] {
                last = Some(c);
            }
            left[c] = last;
        }
        let mut next = None;
        for c in (0..w).rev() {
            if gt[[r, c]] {
                next = Some(c);
            }
            row_nearest[r][c] = match (left[c], next) {
                (Some(a), Some(b)) => Some(if c - a <= b - c { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = (usize::MAX, usize::MAX);
        for (r, cols) in row_nearest.iter().enumerate() {
            if let Some(c) = cols[j] {
                let dy = i.abs_diff(r);
                let dx = j.abs_diff(c);
                let cand = (dy * dy + dx * dx, r * w + c);
                if cand < best {
                    best = cand;
                }
            }
        }
        best
    })
}

/// Correlation with edge-replicated borders (the kernels used here are symmetric).
fn smooth_replicate(x: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (kh, kw) = k.dim();
    let (ch, cw) = (kh / 2, kw / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..kh {
            let y = (i + a).saturating_sub(ch).min(h - 1);
            for b in 0..kw {
                let xx = (j + b).saturating_sub(cw).min(w - 1);
                acc += k[[a, b]] * x[[y, xx]];
            }
        }
        acc
    })
}

/// Returns the score and whether the empty-foreground convention was applied.
pub fn weighted_fbeta_flagged(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    beta2: f64,
) -> Result<(f64, bool)> {
    check(pred, gt)?;
    let gt = gt.mapv(|g| g > 0.5);
    if !gt.iter().any(|&g| g) {
        return Ok((0.0, true));
    }
    let w = gt.ncols();
    let err = Array2::from_shape_fn(gt.dim(), |(i, j)| {
        (pred[[i, j]] - f64::from(u8::from(gt[[i, j]]))).abs()
    });
    let nearest = nearest_foreground(&gt);
    let et = Array2::from_shape_fn(gt.dim(), |(i, j)| {
        let idx = nearest[[i, j]].1;
        err[[idx / w, idx % w]]
    });
    let ea = smooth_replicate(&et, &gaussian_kernel(GAUSSIAN_SIZE, GAUSSIAN_SIGMA));
    let decay = 0.5f64.ln() / DISTANCE_DECAY;
    let (mut tp_err, mut fp_w, mut n_fg) = (0.0, 0.0, 0.0);
    for ((i, j), &g) in gt.indexed_iter() {
        let e = err[[i, j]];
        if g {
            n_fg += 1.0;
            tp_err += ea[[i, j]].min(e);
        } else {
            let dist = (nearest[[i, j]].0 as f64).sqrt();
            fp_w += e * (2.0 - (decay * dist).exp());
        }
    }
    let tpw = n_fg - tp_err;
    let recall = 1.0 - tp_err / n_fg;
    let precision = tpw / (tpw + fp_w + EPS);
    let q = (1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS);
    Ok((q, false))
}

/// Weighted F-beta with `beta2 = β²`; 0 when the ground truth has no foreground.
pub fn weighted_fbeta(pred: &Array2<f64>, gt: &Array2<f64>, beta2: f64) -> Result<f64> {
    weighted_fbeta_flagged(pred, gt, beta2).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_and_zero_prediction() {
        let gt = array![
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0]
        ];
        assert!((weighted_fbeta(&gt, &gt, 1.0).unwrap() - 1.0).abs() < 1e-6);
        assert!(weighted_fbeta(&Array2::zeros((3, 4)), &gt, 1.0).unwrap() < 1e-12);
        let (v, flag) = weighted_fbeta_flagged(&gt, &Array2::zeros((3, 4)), 1.0).unwrap();
        assert_eq!((v, flag), (0.0, true));
    }

    #[test]
    fn nearest_foreground_ties_prefer_lower_index() {
        let gt = array![[true, false, true], [false, false, false]];
        let n = nearest_foreground(&gt);
        assert_eq!(n[[0, 1]], (1, 0));
        assert_eq!(n[[1, 1]], (2, 0));
        assert_eq!(n[[1, 2]], (1, 2));
    }

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(7, 5.0);
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert_eq!(k[[0, 0]], k[[6, 6]]);
        assert!(k[[3, 3]] > k[[0, 3]]);
    }
}
