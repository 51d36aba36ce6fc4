use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::functional::sigmoid;

/// Floor applied to the arguments of `log`.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BalancedBce,
    BcePlusIou,
}

impl LossKind {
    /// Balanced BCE for shadows, BCE + IoU otherwise.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Shadow => LossKind::BalancedBce,
            _ => LossKind::BcePlusIou,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::BalancedBce => "balanced_bce",
            LossKind::BcePlusIou => "bce_plus_iou",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced_bce" => Ok(LossKind::BalancedBce),
            "bce_plus_iou" => Ok(LossKind::BcePlusIou),
            _ => invalid(format!("unknown loss `{s}`")),
        }
    }
}

fn check(logits: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if logits.dim() != gt.dim() {
        return shape_err(format!(
            "logits {:?} vs ground truth {:?}",
            logits.dim(),
            gt.dim()
        ));
    }
    if logits.is_empty() {
        return shape_err("empty logits");
    }
    Ok(())
}

/// Weighted BCE with per-class weights; returns the mean loss and its gradient w.r.t. the logits.
fn weighted_bce(
    logits: &Array2<f64>,
    gt: &Array2<f64>,
    w_pos: f64,
    w_neg: f64,
) -> (f64, Array2<f64>) {
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    Zip::from(&mut grad)
        .and(logits)
        .and(gt)
        .for_each(|d, &x, &g| {
            let p = sigmoid(x);
            let q = sigmoid(-x);
            let mut dl = 0.0;
            if g != 0.0 {
                total -= w_pos * g * p.max(LOG_CLAMP).ln();
                if p > LOG_CLAMP {
                    dl -= w_pos * g * q;
                }
            }
            if g != 1.0 {
                total -= w_neg * (1.0 - g) * q.max(LOG_CLAMP).ln();
                if q > LOG_CLAMP {
                    dl += w_neg * (1.0 - g) * p;
                }
            }
            *d = dl / n;
        });
    (total / n, grad)
}

pub fn bce_with_grad(logits: &Array2<f64>, gt: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    check(logits, gt)?;
    Ok(weighted_bce(logits, gt, 1.0, 1.0))
}

pub fn balanced_bce_with_grad(
    logits: &Array2<f64>,
    gt: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check(logits, gt)?;
    let n = gt.len() as f64;
    let n_pos = gt.sum();
    let n_neg = n - n_pos;
    if n_pos <= 0.0 || n_neg <= 0.0 {
        return Ok(weighted_bce(logits, gt, 1.0, 1.0));
    }
    Ok(weighted_bce(logits, gt, n_neg / n, n_pos / n))
}

pub fn soft_iou_with_grad(
    logits: &Array2<f64>,
    gt: &Array2<f64>,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    check(logits, gt)?;
    let p = logits.mapv(sigmoid);
    let inter = (&p * gt).sum();
    let union = p.sum() + gt.sum() - inter;
    let (num, den) = (inter + eps, union + eps);
    let mut grad = Array2::zeros(p.dim());
    Zip::from(&mut grad).and(&p).and(gt).for_each(|d, &pk, &g| {
        let dp = -(g * den - num * (1.0 - g)) / (den * den);
        *d = dp * pk * (1.0 - pk);
    });
    Ok((1.0 - num / den, grad))
}

pub fn bce(logits: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    bce_with_grad(logits, gt).map(|(v, _)| v)
}

/// BCE weighted by the opposite class frequency; plain BCE if a class is absent.
pub fn balanced_bce(logits: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    balanced_bce_with_grad(logits, gt).map(|(v, _)| v)
}

/// `1 − (I + eps) / (U + eps)` on sigmoid probabilities.
pub fn soft_iou_loss(logits: &Array2<f64>, gt: &Array2<f64>, eps: f64) -> Result<f64> {
    soft_iou_with_grad(logits, gt, eps).map(|(v, _)| v)
}

pub fn combined_loss_with_grad(
    kind: LossKind,
    logits: &Array2<f64>,
    gt: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    match kind {
        LossKind::BalancedBce => balanced_bce_with_grad(logits, gt),
        LossKind::BcePlusIou => {
            let (a, ga) = bce_with_grad(logits, gt)?;
            let (b, gb) = soft_iou_with_grad(logits, gt, 1.0)?;
            Ok((a + b, ga + gb))
        }
    }
}

pub fn combined_loss(kind: LossKind, logits: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    combined_loss_with_grad(kind, logits, gt).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut a = x.clone();
            a[[r, c]] += h;
            let mut b = x.clone();
            b[[r, c]] -= h;
            out[[r, c]] = (f(&a) - f(&b)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let x = array![[0.3, -1.2, 2.0], [-0.4, 0.9, -2.5]];
        let g = array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        for kind in [LossKind::BalancedBce, LossKind::BcePlusIou] {
            let (_, grad) = combined_loss_with_grad(kind, &x, &g).unwrap();
            let num = numeric(|z| combined_loss(kind, z, &g).unwrap(), &x);
            for (a, b) in grad.iter().zip(&num) {
                assert!((a - b).abs() < 1e-7, "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reference_values() {
        let gt = array![[1.0, 0.0], [0.0, 1.0]];
        let zero = Array2::zeros((2, 2));
        assert!((balanced_bce(&zero, &gt).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-12);
        let perfect = gt.mapv(|g| if g > 0.5 { 20.0 } else { -20.0 });
        assert!(balanced_bce(&perfect, &gt).unwrap() < 1e-6);
        let ones = Array2::ones((2, 2));
        let x = array![[0.2, -0.7], [1.5, 0.0]];
        assert_eq!(balanced_bce(&x, &ones).unwrap(), bce(&x, &ones).unwrap());
    }

    #[test]
    fn iou_conventions() {
        let empty = Array2::zeros((4, 4));
        let neg = Array2::from_elem((4, 4), -30.0);
        assert!(soft_iou_loss(&neg, &empty, 1.0).unwrap() < 1e-9);
        let mut gt = Array2::zeros((4, 4));
        let mut logits = Array2::from_elem((4, 4), -30.0);
        for i in 0..8 {
            gt[[i / 4, i % 4]] = 1.0;
            logits[[2 + i / 4, i % 4]] = 30.0;
        }
        assert!((soft_iou_loss(&logits, &gt, 1.0).unwrap() - (1.0 - 1.0 / 17.0)).abs() < 1e-9);
        assert!(bce(&logits, &Array2::zeros((3, 3))).is_err());
    }
}
