use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::Parameterized;

/// `0.5·lr0·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return invalid(format!("step {step} outside 0..={total_steps}"));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(0.5 * lr0 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

/// AdamW with decoupled weight decay over a fixed set of parameter names.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    trainable: BTreeSet<String>,
    state: BTreeMap<String, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, trainable: BTreeSet<String>) -> Self {
        Self {
            config,
            trainable,
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    /// Names with optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut impl Parameterized,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
    ) {
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let trainable = &self.trainable;
        let state = &mut self.state;
        params.visit_mut(&mut |name, p| {
            if !trainable.contains(name) {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: Array2::zeros(p.dim()),
                v: Array2::zeros(p.dim()),
            });
            Zip::from(p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * weight_decay * *p;
                    *p -= lr * update;
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 2e-4).unwrap(), 2e-4);
        assert_eq!(cosine_lr(10, 10, 2e-4).unwrap(), 0.0);
        assert!((cosine_lr(5, 10, 2e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(11, 10, 2e-4).is_err());
        assert!(cosine_lr(0, 0, 2e-4).is_err());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut t = Tensor::new("w", array![[1.0, -2.0]]);
        let names: BTreeSet<_> = ["w".to_string()].into();
        let mut opt = AdamW::new(AdamWConfig::default(), names);
        let grads = [("w".to_string(), array![[0.5, 0.5]])].into();
        opt.step(&mut t, &grads, 0.0);
        assert_eq!(t.value, array![[1.0, -2.0]]);
        assert_eq!(opt.state_names().count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut t = Tensor::new("w", array![[1.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            ["w".to_string()].into(),
        );
        opt.step(&mut t, &[("w".to_string(), array![[3.0]])].into(), 0.1);
        assert!((t.value[[0, 0]] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn frozen_names_are_skipped() {
        let mut t = Tensor::new("w", array![[1.0]]);
        let mut opt = AdamW::new(AdamWConfig::default(), BTreeSet::new());
        opt.step(&mut t, &[("w".to_string(), array![[3.0]])].into(), 0.1);
        assert_eq!(t.value[[0, 0]], 1.0);
        assert_eq!(opt.state_names().count(), 0);
    }
}
