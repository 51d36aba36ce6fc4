//! The full segmenter: frozen encoder, stage adapters, prompt path and decoder.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterConfig, AdapterStack};
use crate::backbone::{BackboneConfig, BackboneModel, Regime};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Graph, Parameterized, Var};
use crate::prompt::{patchify, PromptConfig, PromptEncoder};

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub backbone: BackboneModel,
    pub adapters: Option<AdapterStack>,
    pub prompt: Option<PromptEncoder>,
}

/// Per-image tensors that do not depend on trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub patches: Array2<f64>,
    pub hfc_patches: Option<Array2<f64>>,
}

impl Segmenter {
    /// Encoder and decoder are drawn from `rng` first, so a seed fixes them regardless of adapter settings.
    pub fn new(
        backbone: BackboneConfig,
        adapter: Option<&AdapterConfig>,
        prompt: &PromptConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let backbone = BackboneModel::new(backbone, rng)?;
        let (adapters, prompt) = match adapter {
            Some(acfg) => {
                prompt.validate()?;
                let cfg = &backbone.config;
                let dp = cfg.base_dim();
                let stack = AdapterStack::new(acfg, dp, &cfg.stage_dims, rng)?;
                let enc = PromptEncoder::new(prompt.clone(), cfg.patch, cfg.channels, dp, rng);
                (Some(stack), Some(enc))
            }
            None => (None, None),
        };
        Ok(Self {
            backbone,
            adapters,
            prompt,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn prepare(&self, image: &Array3<f64>) -> Result<PreparedInput> {
        self.backbone.check_image(image)?;
        let patch = self.config().patch;
        let hfc_patches = match &self.prompt {
            Some(p) if p.needs_hfc() => Some(patchify(&p.config.hfc(image)?, patch)?),
            _ => None,
        };
        Ok(PreparedInput {
            patches: patchify(image, patch)?,
            hfc_patches,
        })
    }

    /// Prompted encoder stages as token matrices.
    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a>, input: &'a PreparedInput) -> Vec<Var> {
        let cfg = self.config();
        let grid = cfg.stage_grid(1);
        let patches = g.constant_ref(&input.patches);
        let pe = self.backbone.encoder.embed(g, patches);
        let prompts = match (&self.adapters, &self.prompt) {
            (Some(adapters), Some(prompt)) => {
                let hfc = match &input.hfc_patches {
                    Some(h) => g.constant_ref(h),
                    None => pe,
                };
                let composed = prompt.compose(g, hfc, pe);
                Some(adapters.forward(g, composed, grid))
            }
            _ => None,
        };
        self.backbone
            .encoder
            .run_stages(g, pe, grid, prompts.as_deref())
    }

    /// `(H·W)×1` logits.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, input: &'a PreparedInput) -> Var {
        let feats = self.encode_graph(g, input);
        self.backbone.decoder.forward(g, &feats, self.config())
    }

    /// Decoder-only forward pass from cached stage tokens.
    pub fn forward_cached<'a>(&'a self, g: &mut Graph<'a>, feats: &'a [Array2<f64>]) -> Var {
        let vars: Vec<Var> = feats.iter().map(|f| g.constant_ref(f)).collect();
        self.backbone.decoder.forward(g, &vars, self.config())
    }

    /// Stage tokens without gradient tracking.
    pub fn stage_tokens(&self, input: &PreparedInput) -> Vec<Array2<f64>> {
        let mut g = Graph::inference();
        let vars = self.encode_graph(&mut g, input);
        vars.iter().map(|&v| g.value(v).clone()).collect()
    }

    /// `H×W` logits for an image.
    pub fn predict_logits(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        let input = self.prepare(image)?;
        let mut g = Graph::inference();
        let out = self.forward(&mut g, &input);
        let logits = g.value(out);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        let (h, w) = self.config().resolution;
        Ok(logits
            .clone()
            .into_shape_with_order((h, w))
            .expect("H·W logits"))
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn named_arrays(&self) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        self.visit(&mut |n, a| {
            out.insert(n.to_string(), a.clone());
        });
        out
    }

    /// Overwrites every parameter from `arrays`; every name must be present with a matching shape.
    pub fn load_arrays(&mut self, arrays: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |n, a| {
            if err.is_some() {
                return;
            }
            match arrays.get(n) {
                None => err = Some(Error::MissingParameter(n.to_string())),
                Some(v) if v.dim() != a.dim() => {
                    err = Some(Error::Shape(format!(
                        "parameter {n} is {:?} in the archive but {:?} in the model",
                        v.dim(),
                        a.dim()
                    )))
                }
                Some(v) => a.assign(v),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Copies all `encoder.*` arrays from `source`.
    pub fn copy_encoder_from(&mut self, source: &BackboneModel) -> Result<()> {
        if source.config != self.backbone.config {
            return shape_err("encoder configurations differ");
        }
        self.backbone.encoder = source.encoder.clone();
        Ok(())
    }
}

impl Parameterized for Segmenter {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.backbone.visit(f);
        self.adapters.visit(f);
        self.prompt.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.backbone.visit_mut(f);
        self.adapters.visit_mut(f);
        self.prompt.visit_mut(f);
    }
}

/// Names of the parameters optimised under `regime`.
pub fn trainable_parameters(model: &Segmenter, regime: Regime) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    model.visit(&mut |n, _| {
        if regime.trains(n) {
            out.insert(n.to_string());
        }
    });
    out
}

pub fn count_parameters(model: &Segmenter, names: &BTreeSet<String>) -> usize {
    let mut n = 0;
    model.visit(&mut |name, a| {
        if names.contains(name) {
            n += a.len();
        }
    });
    n
}

/// Sum of absolute values plus an order-sensitive digest over parameters whose name starts with `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamChecksum {
    pub abs_sum: f64,
    pub digest: String,
}

pub fn parameter_checksum(model: &impl Parameterized, prefix: &str) -> ParamChecksum {
    let mut abs_sum = 0.0;
    let mut hasher = Sha256::new();
    model.visit(&mut |n, a| {
        if !n.starts_with(prefix) {
            return;
        }
        hasher.update(n.as_bytes());
        for v in a.iter() {
            abs_sum += v.abs();
            hasher.update(v.to_le_bytes());
        }
    });
    let digest = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    ParamChecksum { abs_sum, digest }
}
