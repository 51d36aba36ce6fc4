//! Segmentation metrics and per-dataset reports.
//!
//! Conventions: ground truth is foreground where `gt > 0.5`; predictions are
//! binarised with `pred ≥ threshold`; dataset scores are per-sample means.

mod enhanced;
mod structure;
mod weighted;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{resize_bilinear, Dataset, Task};
use crate::error::{shape_err, Error, Result};

pub use enhanced::{e_measure_mean, e_threshold, E_THRESHOLDS};
pub use structure::s_measure;
pub use weighted::{
    gaussian_kernel, nearest_foreground, weighted_fbeta, weighted_fbeta_flagged, DISTANCE_DECAY,
    GAUSSIAN_SIGMA, GAUSSIAN_SIZE,
};

/// Guards divisions in S-measure, E-measure and weighted F (machine epsilon).
pub const EPS: f64 = f64::EPSILON;

pub(crate) fn check(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return shape_err(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        ));
    }
    if pred.is_empty() {
        return shape_err("empty prediction");
    }
    Ok(())
}

/// Confusion counts of `pred ≥ threshold` against `gt > 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Result<Confusion> {
    check(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p >= threshold, g > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Mean absolute error.
pub fn mae_metric(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt.iter()).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Balanced error rate in percent, and whether the ground truth had a single class
/// (the missing class's recall then counts as 1).
pub fn ber_flagged(pred: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Result<(f64, bool)> {
    let c = confusion(pred, gt, threshold)?;
    let recall = |hit: usize, miss: usize| {
        if hit + miss == 0 {
            1.0
        } else {
            hit as f64 / (hit + miss) as f64
        }
    };
    let single = c.tp + c.fn_ == 0 || c.tn + c.fp == 0;
    let value = 100.0 * (1.0 - 0.5 * (recall(c.tp, c.fn_) + recall(c.tn, c.fp)));
    Ok((value, single))
}

pub fn ber(pred: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Result<f64> {
    ber_flagged(pred, gt, threshold).map(|(v, _)| v)
}

/// Dice and IoU of the binarised prediction; both are 1 when prediction and ground truth are empty.
pub fn dice_iou(pred: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Result<(f64, f64)> {
    let c = confusion(pred, gt, threshold)?;
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    let dice = 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64;
    let iou = c.tp as f64 / union as f64;
    Ok((dice, iou))
}

/// Metrics computed for one sample; absent entries are outside the task's protocol.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub s_alpha: Option<f64>,
    pub e_phi: Option<f64>,
    pub f_wbeta: Option<f64>,
    pub mae: Option<f64>,
    pub ber: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SAlpha,
    EPhi,
    FWBeta,
    Mae,
    Ber,
    MDice,
    MIoU,
}

impl Metric {
    pub fn for_task(task: Task) -> &'static [Metric] {
        use Metric::*;
        match task {
            Task::Camouflage => &[SAlpha, EPhi, FWBeta, Mae],
            Task::Shadow => &[Ber],
            Task::Polyp => &[MDice, MIoU],
            Task::Generic => &[SAlpha, EPhi, FWBeta, Mae, Ber, MDice, MIoU],
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Metric::SAlpha => "s_alpha",
            Metric::EPhi => "e_phi",
            Metric::FWBeta => "f_wbeta",
            Metric::Mae => "mae",
            Metric::Ber => "ber",
            Metric::MDice => "m_dice",
            Metric::MIoU => "m_iou",
        }
    }

    /// Column header with the direction of improvement.
    pub fn label(self) -> &'static str {
        match self {
            Metric::SAlpha => "S_alpha↑",
            Metric::EPhi => "E_phi↑",
            Metric::FWBeta => "F^w_beta↑",
            Metric::Mae => "MAE↓",
            Metric::Ber => "BER↓",
            Metric::MDice => "mDice↑",
            Metric::MIoU => "mIoU↑",
        }
    }

    fn of_sample(self, s: &SampleMetrics) -> Option<f64> {
        match self {
            Metric::SAlpha => s.s_alpha,
            Metric::EPhi => s.e_phi,
            Metric::FWBeta => s.f_wbeta,
            Metric::Mae => s.mae,
            Metric::Ber => s.ber,
            Metric::MDice => s.dice,
            Metric::MIoU => s.iou,
        }
    }
}

/// Per-sample metrics for `task`'s protocol.
pub fn sample_metrics(
    id: &str,
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    task: Task,
) -> Result<SampleMetrics> {
    check(pred, gt)?;
    let mut m = SampleMetrics {
        id: id.to_string(),
        ..Default::default()
    };
    for &metric in Metric::for_task(task) {
        match metric {
            Metric::SAlpha => m.s_alpha = Some(s_measure(pred, gt, 0.5)?),
            Metric::EPhi => m.e_phi = Some(e_measure_mean(pred, gt)?),
            Metric::FWBeta => {
                let (v, empty) = weighted_fbeta_flagged(pred, gt, 1.0)?;
                if empty {
                    m.warnings
                        .push("f_wbeta: empty ground truth scored 0".into());
                }
                m.f_wbeta = Some(v);
            }
            Metric::Mae => m.mae = Some(mae_metric(pred, gt)?),
            Metric::Ber => {
                let (v, single) = ber_flagged(pred, gt, 0.5)?;
                if single {
                    m.warnings
                        .push("ber: single-class ground truth, missing recall set to 1".into());
                }
                m.ber = Some(v);
            }
            Metric::MDice => {
                let (d, i) = dice_iou(pred, gt, 0.5)?;
                m.dice = Some(d);
                m.iou = Some(i);
            }
            Metric::MIoU => {}
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub dataset_id: String,
    pub model_id: Option<String>,
    pub s_alpha: Option<f64>,
    pub e_phi: Option<f64>,
    pub f_wbeta: Option<f64>,
    pub mae: Option<f64>,
    pub ber: Option<f64>,
    pub m_dice: Option<f64>,
    pub m_iou: Option<f64>,
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    /// Arithmetic means over `samples` (which should be sorted by id).
    pub fn from_samples(task: Task, samples: Vec<SampleMetrics>) -> Self {
        let mean = |metric: Metric| {
            let vals: Vec<f64> = samples.iter().filter_map(|s| metric.of_sample(s)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Self {
            task,
            dataset_id: String::new(),
            model_id: None,
            s_alpha: mean(Metric::SAlpha),
            e_phi: mean(Metric::EPhi),
            f_wbeta: mean(Metric::FWBeta),
            mae: mean(Metric::Mae),
            ber: mean(Metric::Ber),
            m_dice: mean(Metric::MDice),
            m_iou: mean(Metric::MIoU),
            samples,
        }
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::SAlpha => self.s_alpha,
            Metric::EPhi => self.e_phi,
            Metric::FWBeta => self.f_wbeta,
            Metric::Mae => self.mae,
            Metric::Ber => self.ber,
            Metric::MDice => self.m_dice,
            Metric::MIoU => self.m_iou,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per sample plus a final `mean` row; columns follow the task protocol.
    pub fn to_csv(&self) -> String {
        let metrics = Metric::for_task(self.task);
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("id");
        for m in metrics {
            out.push(',');
            out.push_str(m.key());
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.id);
            for &m in metrics {
                let _ = write!(out, ",{}", fmt(m.of_sample(s)));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for &m in metrics {
            let _ = write!(out, ",{}", fmt(self.get(m)));
        }
        out.push('\n');
        out
    }

    /// Header and value lines in the order `S_α E_φ F^ω_β MAE` / `BER` / `mDice mIoU`.
    pub fn table(&self) -> String {
        let metrics = Metric::for_task(self.task);
        let header: Vec<String> = metrics
            .iter()
            .map(|m| format!("{:>10}", m.label()))
            .collect();
        let values: Vec<String> = metrics
            .iter()
            .map(|&m| match (m, self.get(m)) {
                (Metric::Ber, Some(v)) => format!("{v:>10.2}"),
                (_, Some(v)) => format!("{v:>10.3}"),
                (_, None) => format!("{:>10}", "-"),
            })
            .collect();
        format!("{}\n{}", header.join(" "), values.join(" "))
    }
}

fn resize_map(pred: &Array2<f64>, to: (usize, usize)) -> Array2<f64> {
    let (h, w) = pred.dim();
    let as3 = pred
        .clone()
        .into_shape_with_order((h, w, 1))
        .expect("contiguous map");
    let out: Array3<f64> = resize_bilinear(&as3, to);
    out.into_shape_with_order(to).expect("resized map")
}

/// Per-sample metrics in id order, then their means.
///
/// Predictions at another resolution are resized bilinearly to the ground truth and flagged.
pub fn evaluate(
    predictions: &BTreeMap<String, Array2<f64>>,
    dataset: &Dataset,
) -> Result<MetricsReport> {
    evaluate_as(predictions, dataset, dataset.task())
}

/// [`evaluate`] with the metric protocol of `task` instead of the dataset's own.
pub fn evaluate_as(
    predictions: &BTreeMap<String, Array2<f64>>,
    dataset: &Dataset,
    task: Task,
) -> Result<MetricsReport> {
    let mut samples = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let pred = predictions
            .get(&s.id)
            .ok_or_else(|| Error::MissingPrediction(s.id.clone()))?;
        let mut warnings = Vec::new();
        let pred = if pred.dim() != s.mask.dim() {
            warnings.push(format!(
                "prediction resized from {:?} to {:?}",
                pred.dim(),
                s.mask.dim()
            ));
            resize_map(pred, s.mask.dim())
        } else {
            pred.clone()
        };
        let mut m = sample_metrics(&s.id, &pred, &s.mask, task)?;
        warnings.append(&mut m.warnings);
        m.warnings = warnings;
        samples.push(m);
    }
    Ok(MetricsReport::from_samples(task, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn counting_examples() {
        let gt = array![[1.0, 1.0], [0.0, 0.0]];
        let pred = array![[1.0, 0.0], [0.0, 0.0]];
        assert!((ber(&pred, &gt, 0.5).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(ber(&gt, &gt, 0.5).unwrap(), 0.0);
        assert_eq!(ber(&gt.mapv(|g| 1.0 - g), &gt, 0.5).unwrap(), 100.0);
        let (d, i) = dice_iou(&Array2::zeros((2, 2)), &Array2::zeros((2, 2)), 0.5).unwrap();
        assert_eq!((d, i), (1.0, 1.0));
        let p = array![[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]];
        let g = array![[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]];
        let (d, i) = dice_iou(&p, &g, 0.5).unwrap();
        assert_eq!(d, 0.5);
        assert!((i - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mae_metric(&gt.mapv(|g| 1.0 - g), &gt).unwrap(), 1.0);
    }

    #[test]
    fn single_class_ber_is_flagged() {
        let gt = Array2::zeros((2, 2));
        let (v, flag) = ber_flagged(&array![[1.0, 0.0], [0.0, 0.0]], &gt, 0.5).unwrap();
        assert!(flag);
        assert!((v - 12.5).abs() < 1e-12);
    }

    #[test]
    fn csv_has_mean_row() {
        let samples = vec![
            SampleMetrics {
                id: "a".into(),
                dice: Some(0.5),
                iou: Some(0.25),
                ..Default::default()
            },
            SampleMetrics {
                id: "b".into(),
                dice: Some(1.0),
                iou: Some(1.0),
                ..Default::default()
            },
        ];
        let r = MetricsReport::from_samples(Task::Polyp, samples);
        assert_eq!(r.m_dice, Some(0.75));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.ends_with("mean,0.750000,0.625000\n"));
        assert!(r.table().contains("mDice"));
    }
}
