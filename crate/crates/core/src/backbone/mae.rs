//! Masked-patch reconstruction pretraining for the encoder.

use ndarray::{Array2, Zip};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Encoder};
use crate::adapter::NUM_STAGES;
use crate::data::Dataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Graph, Init, Linear, Parameterized, Tensor, Trainable, Var};
use crate::prompt::patchify;
use crate::training::{cosine_lr, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub steps: usize,
    pub mask_ratio: f64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            mask_ratio: 0.75,
            lr: 1e-3,
            batch: 4,
            seed: 0,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return invalid(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            ));
        }
        if self.steps == 0 || self.batch == 0 {
            return invalid("steps and batch must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return invalid("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MaeOutcome {
    pub encoder: Encoder,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    /// Reconstruction loss over the whole dataset under a fixed mask, before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Pretrainer {
    encoder: Encoder,
    mask_token: Tensor,
    heads: Vec<Linear>,
}

impl Parameterized for Pretrainer {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.encoder.visit(f);
        self.mask_token.visit(f);
        self.heads.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.encoder.visit_mut(f);
        self.mask_token.visit_mut(f);
        self.heads.visit_mut(f);
    }
}

impl Pretrainer {
    /// Patch reconstructions on the stage-1 grid.
    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        cfg: &BackboneConfig,
        patches: Var,
        mask: Vec<bool>,
    ) -> Var {
        let grid = cfg.stage_grid(1);
        let pe = self.encoder.embed(g, patches);
        let token = self.mask_token.forward(g);
        let masked = g.replace_rows(pe, token, mask);
        let feats = self.encoder.run_stages(g, masked, grid, None);
        let mut out: Option<Var> = None;
        for (i, (&f, head)) in feats.iter().zip(&self.heads).enumerate() {
            let mut y = head.forward(g, f);
            if i > 0 {
                y = g.resize(y, cfg.stage_grid(i + 1), grid);
            }
            out = Some(match out {
                Some(acc) => g.add(acc, y),
                None => y,
            });
        }
        out.expect("four stages")
    }
}

fn draw_mask(n: usize, masked: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; n];
    for i in sample(rng, n, masked).iter() {
        mask[i] = true;
    }
    mask
}

/// Mean squared error over masked rows, with its gradient.
fn masked_mse(pred: &Array2<f64>, target: &Array2<f64>, mask: &[bool]) -> (f64, Array2<f64>) {
    let count = mask.iter().filter(|&&m| m).count() * target.ncols();
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (r, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        Zip::from(grad.row_mut(r))
            .and(pred.row(r))
            .and(target.row(r))
            .for_each(|d, &p, &t| {
                let e = p - t;
                total += e * e;
                *d = 2.0 * e / count as f64;
            });
    }
    (total / count as f64, grad)
}

/// Trains a fresh encoder and a throwaway reconstruction head to regress masked patch pixels.
pub fn toy_mae_pretrain(
    config: &BackboneConfig,
    dataset: &Dataset,
    mae: &MaeConfig,
) -> Result<MaeOutcome> {
    mae.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return invalid("pretraining dataset is empty");
    }
    if dataset.resolution() != config.resolution {
        return shape_err(format!(
            "dataset resolution {:?} differs from backbone resolution {:?}",
            dataset.resolution(),
            config.resolution
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mae.seed);
    let encoder = Encoder::new(config, &mut rng);
    let mask_token = Tensor::new(
        "mae.mask_token",
        crate::nn::init_array(1, config.base_dim(), Init::Normal(0.02), &mut rng),
    );
    let heads = (0..NUM_STAGES)
        .map(|i| {
            Linear::new(
                &format!("mae.head{}", i + 1),
                config.stage_dims[i],
                config.patch_len(),
                Init::Xavier,
                &mut rng,
            )
        })
        .collect();
    let mut model = Pretrainer {
        encoder,
        mask_token,
        heads,
    };

    let patches = dataset
        .samples()
        .iter()
        .map(|s| patchify(&s.image, config.patch))
        .collect::<Result<Vec<_>>>()?;
    let (h1, w1) = config.stage_grid(1);
    let n_tokens = h1 * w1;
    let n_masked = ((mae.mask_ratio * n_tokens as f64).round() as usize).clamp(1, n_tokens - 1);

    let probe_masks: Vec<Vec<bool>> = {
        let mut probe_rng = ChaCha8Rng::seed_from_u64(mae.seed ^ 0x005e_ed0f_9a7c);
        (0..patches.len())
            .map(|_| draw_mask(n_tokens, n_masked, &mut probe_rng))
            .collect()
    };
    let probe = |m: &Pretrainer| -> f64 {
        let total: f64 = patches
            .iter()
            .zip(&probe_masks)
            .map(|(p, mask)| {
                let mut g = Graph::inference();
                let x = g.constant_ref(p);
                let y = m.forward(&mut g, config, x, mask.clone());
                masked_mse(g.value(y), p, mask).0
            })
            .sum();
        total / patches.len() as f64
    };
    let initial_loss = probe(&model);

    let mut names = std::collections::BTreeSet::new();
    model.visit(&mut |n, _| {
        names.insert(n.to_string());
    });
    let mut optimizer = AdamW::new(AdamWConfig::default(), names.clone());
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(mae.steps);
    for step in 0..mae.steps {
        let lr = cosine_lr(step, mae.steps, mae.lr)?;
        let mut acc = crate::nn::Gradients::default();
        let mut batch_loss = 0.0;
        for _ in 0..mae.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let mask = draw_mask(n_tokens, n_masked, &mut rng);
            let mut g = Graph::new(Trainable::Names(&names));
            let x = g.constant_ref(&patches[idx]);
            let y = model.forward(&mut g, config, x, mask.clone());
            let (value, grad) = masked_mse(g.value(y), &patches[idx], &mask);
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            batch_loss += value;
            let out = g.loss(y, value, grad);
            acc.accumulate(g.backward(out), 1.0 / mae.batch as f64);
        }
        losses.push(batch_loss / mae.batch as f64);
        optimizer.step(&mut model, &acc.params, lr);
    }
    let final_loss = probe(&model);
    Ok(MaeOutcome {
        encoder: model.encoder,
        losses,
        initial_loss,
        final_loss,
    })
}
