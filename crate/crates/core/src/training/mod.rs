//! Losses, schedule, optimizer loop and checkpoints.

mod checkpoint;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Regime;
use crate::data::{Dataset, Task};
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{trainable_parameters, PreparedInput, Segmenter};
use crate::nn::functional::sigmoid;
use crate::nn::{Gradients, Graph, Trainable};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    FORMAT_VERSION,
};
pub use loss::{
    balanced_bce, balanced_bce_with_grad, bce, bce_with_grad, combined_loss,
    combined_loss_with_grad, soft_iou_loss, soft_iou_with_grad, LossKind, LOG_CLAMP,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub regime: Regime,
    pub loss: LossKind,
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Omits wall-clock times so that histories are reproducible byte for byte.
    pub strict: bool,
}

impl TrainConfig {
    pub fn default_epochs(task: Task) -> usize {
        match task {
            Task::Shadow => 90,
            Task::Camouflage | Task::Polyp | Task::Generic => 20,
        }
    }

    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            regime: Regime::Sam2Adapter,
            loss: LossKind::for_task(task),
            lr0: 2e-4,
            epochs: Self::default_epochs(task),
            batch: 4,
            seed: 0,
            optimizer: AdamWConfig::default(),
            strict: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return invalid(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if self.batch == 0 {
            return invalid("batch must be at least 1");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Index of the epoch's first optimizer step.
    pub step: usize,
    /// Learning rate at `step`.
    pub lr: f64,
    pub mean_loss: f64,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        for (i, r) in records.iter().enumerate() {
            if r.epoch != i + 1 {
                return invalid(format!(
                    "history epochs are not consecutive at line {}",
                    i + 1
                ));
            }
        }
        Ok(Self {
            records,
            checkpoint: None,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Segmenter,
    pub history: TrainHistory,
    pub optimizer: AdamW,
}

impl TrainOutcome {
    pub fn meta(&self, config: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            task: Some(config.task),
            regime: Some(config.regime),
            epoch: self.history.records.len(),
            seed: config.seed,
            optimizer: Some(config.optimizer),
            ..CheckpointMeta::for_model(&self.model)
        }
    }

    /// Writes the checkpoint and `history.jsonl` into `dir`.
    pub fn write(&mut self, dir: &Path, config: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &self.model, &self.meta(config))?;
        self.history.checkpoint = Some(CHECKPOINT_FILE.to_string());
        fs::write(dir.join(HISTORY_FILE), self.history.to_jsonl()?)?;
        Ok(())
    }
}

fn as_column(m: &Array2<f64>) -> Array2<f64> {
    let n = m.len();
    m.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, 1))
        .expect("contiguous")
}

enum Inputs {
    Images(Vec<PreparedInput>),
    /// Stage tokens from a frozen, unprompted-or-fixed encoder.
    Features(Vec<Vec<Array2<f64>>>),
}

/// Loss and parameter gradients for one sample.
fn sample_step(
    model: &Segmenter,
    trainable: Trainable<'_>,
    inputs: &Inputs,
    idx: usize,
    gt_col: &Array2<f64>,
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(trainable);
    let logits = match inputs {
        Inputs::Images(xs) => model.forward(&mut g, &xs[idx]),
        Inputs::Features(fs) => model.forward_cached(&mut g, &fs[idx]),
    };
    let (value, grad) = combined_loss_with_grad(kind, g.value(logits), gt_col)?;
    let out = g.loss(logits, value, grad);
    Ok((value, g.backward(out)))
}

/// Optimises `model` on `dataset` with AdamW and a per-step cosine schedule.
pub fn train(
    config: &TrainConfig,
    mut model: Segmenter,
    dataset: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return invalid("training dataset is empty");
    }
    if dataset.resolution() != model.config().resolution {
        return shape_err(format!(
            "dataset resolution {:?} differs from model resolution {:?}",
            dataset.resolution(),
            model.config().resolution
        ));
    }
    if config.regime == Regime::Sam2Adapter && model.adapters.is_none() {
        return invalid("the sam2_adapter regime needs a model with adapters");
    }
    let trainable = trainable_parameters(&model, config.regime);
    let prepared = dataset
        .samples()
        .iter()
        .map(|s| model.prepare(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let inputs = if config.regime == Regime::DecoderOnly {
        Inputs::Features(prepared.iter().map(|p| model.stage_tokens(p)).collect())
    } else {
        Inputs::Images(prepared)
    };
    let targets: Vec<Array2<f64>> = dataset
        .samples()
        .iter()
        .map(|s| as_column(&s.mask))
        .collect();

    let n = dataset.len();
    let per_epoch = config.steps_per_epoch(n);
    let total = per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(config.optimizer, trainable.clone());
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let first_step = step;
        let first_lr = cosine_lr(step, total, config.lr0)?;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch) {
            let lr = cosine_lr(step, total, config.lr0)?;
            let scale = 1.0 / batch.len() as f64;
            let mut acc = Gradients::default();
            for &idx in batch {
                let (value, grads) = sample_step(
                    &model,
                    Trainable::Names(&trainable),
                    &inputs,
                    idx,
                    &targets[idx],
                    config.loss,
                )?;
                if !value.is_finite() {
                    return Err(Error::Divergence { step, loss: value });
                }
                loss_sum += value;
                acc.accumulate(grads, scale);
            }
            optimizer.step(&mut model, &acc.params, lr);
            step += 1;
        }
        history.records.push(EpochRecord {
            epoch,
            step: first_step,
            lr: first_lr,
            mean_loss: loss_sum / n as f64,
            regime: config.regime,
            wall_seconds: (!config.strict).then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        optimizer,
    })
}

/// Mean loss of `model` over `dataset` without updating anything.
pub fn dataset_loss(model: &Segmenter, dataset: &Dataset, kind: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for s in dataset.samples() {
        let logits = model.predict_logits(&s.image)?;
        total += combined_loss(kind, &logits, &s.mask)?;
    }
    Ok(total / dataset.len().max(1) as f64)
}

/// Sigmoid probability maps keyed by sample id.
pub fn predict_dataset(
    model: &Segmenter,
    dataset: &Dataset,
) -> Result<BTreeMap<String, Array2<f64>>> {
    dataset
        .samples()
        .iter()
        .map(|s| Ok((s.id.clone(), model.predict_logits(&s.image)?.mapv(sigmoid))))
        .collect()
}
