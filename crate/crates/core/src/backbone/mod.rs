//! Hierarchical transformer encoder, top-down mask decoder and freezing policy.

mod mae;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{StagePrompt, NUM_STAGES};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Graph, Init, LayerNorm, Linear, Parameterized, Tensor, Var};
use crate::prompt::{patchify, FeatureGrid, Origin};

pub use mae::{toy_mae_pretrain, MaeConfig, MaeOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "toy-hiera")]
    ToyHiera,
    #[serde(rename = "hiera-large-shape")]
    HieraLargeShape,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::ToyHiera => "toy-hiera",
            Preset::HieraLargeShape => "hiera-large-shape",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-hiera" => Ok(Preset::ToyHiera),
            "hiera-large-shape" => Ok(Preset::HieraLargeShape),
            _ => invalid(format!("unknown backbone preset `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch: usize,
    pub channels: usize,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    /// Input `(height, width)`.
    pub resolution: (usize, usize),
}

impl BackboneConfig {
    pub fn preset(preset: Preset, resolution: (usize, usize)) -> Self {
        match preset {
            Preset::ToyHiera => Self::toy_hiera(resolution),
            Preset::HieraLargeShape => Self {
                patch: 4,
                channels: 3,
                stage_depths: [2, 6, 36, 4],
                stage_dims: [144, 288, 576, 1152],
                heads: [2, 4, 8, 16],
                mlp_ratio: 4,
                decoder_dim: 256,
                resolution,
            },
        }
    }

    pub fn toy_hiera(resolution: (usize, usize)) -> Self {
        let c = 32;
        Self {
            patch: 4,
            channels: 3,
            stage_depths: [1, 2, 2, 1],
            stage_dims: [c, 2 * c, 4 * c, 8 * c],
            heads: [1, 2, 4, 8],
            mlp_ratio: 4,
            decoder_dim: 32,
            resolution,
        }
    }

    pub fn base_dim(&self) -> usize {
        self.stage_dims[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        let unit = self.patch * (1 << (NUM_STAGES - 1));
        if self.patch == 0 || h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return invalid(format!(
                "resolution {h}×{w} must be a positive multiple of patch·8 = {unit}"
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.decoder_dim == 0 {
            return invalid("channels, mlp_ratio and decoder_dim must be positive");
        }
        if self.stage_dims[0] == 0 || self.stage_dims.windows(2).any(|p| p[0] >= p[1]) {
            return invalid(format!(
                "stage_dims must be strictly increasing, got {:?}",
                self.stage_dims
            ));
        }
        for i in 0..NUM_STAGES {
            if self.heads[i] == 0 || !self.stage_dims[i].is_multiple_of(self.heads[i]) {
                return invalid(format!(
                    "stage {} width {} is not divisible by {} heads",
                    i + 1,
                    self.stage_dims[i],
                    self.heads[i]
                ));
            }
        }
        if self.stage_depths.iter().sum::<usize>() == 0 {
            return invalid("the encoder needs at least one block");
        }
        Ok(())
    }

    /// Token grid `(h, w)` of `stage` (1-based).
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        let f = self.patch << (stage - 1);
        (self.resolution.0 / f, self.resolution.1 / f)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Pre-norm transformer block with global multi-head attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new(prefix: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            heads,
            norm1: LayerNorm::new(&format!("{prefix}.norm1"), dim),
            qkv: Linear::new(
                &format!("{prefix}.attn.qkv"),
                dim,
                3 * dim,
                Init::Xavier,
                rng,
            ),
            proj: Linear::new(&format!("{prefix}.attn.proj"), dim, dim, Init::Xavier, rng),
            norm2: LayerNorm::new(&format!("{prefix}.norm2"), dim),
            fc1: Linear::new(&format!("{prefix}.mlp.fc1"), dim, hidden, Init::Xavier, rng),
            fc2: Linear::new(&format!("{prefix}.mlp.fc2"), hidden, dim, Init::Xavier, rng),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let a = g.attention(qkv, self.heads);
        let a = self.proj.forward(g, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

impl Parameterized for Block {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.norm1.visit(f);
        self.qkv.visit(f);
        self.proj.visit(f);
        self.norm2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.norm1.visit_mut(f);
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
        self.norm2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub stages: Vec<Vec<Block>>,
    /// `merges[i]` maps stage `i+1` width to stage `i+2` width after 2×2 pooling.
    pub merges: Vec<Linear>,
}

impl Encoder {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let (h1, w1) = cfg.stage_grid(1);
        let c = cfg.base_dim();
        let patch_embed = Linear::new("encoder.patch_embed", cfg.patch_len(), c, Init::Xavier, rng);
        let pos_embed = Tensor::new(
            "encoder.pos_embed",
            crate::nn::init_array(h1 * w1, c, Init::Normal(0.02), rng),
        );
        let stages = (0..NUM_STAGES)
            .map(|i| {
                (0..cfg.stage_depths[i])
                    .map(|j| {
                        Block::new(
                            &format!("encoder.stage{}.block{}", i + 1, j + 1),
                            cfg.stage_dims[i],
                            cfg.heads[i],
                            cfg.mlp_ratio,
                            rng,
                        )
                    })
                    .collect()
            })
            .collect();
        let merges = (1..NUM_STAGES)
            .map(|i| {
                Linear::new(
                    &format!("encoder.merge{}", i + 1),
                    cfg.stage_dims[i - 1],
                    cfg.stage_dims[i],
                    Init::Xavier,
                    rng,
                )
            })
            .collect();
        Self {
            patch_embed,
            pos_embed,
            stages,
            merges,
        }
    }

    /// Patch-embedding tokens (before the positional embedding).
    pub fn embed<'a>(&'a self, g: &mut Graph<'a>, patches: Var) -> Var {
        self.patch_embed.forward(g, patches)
    }

    /// Runs the four stages from patch tokens; `prompts[i]` is added to every block input of stage `i+1`.
    pub fn run_stages<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: Var,
        grid: (usize, usize),
        prompts: Option<&[Var]>,
    ) -> Vec<Var> {
        let pos = self.pos_embed.forward(g);
        let mut x = g.add(tokens, pos);
        let (mut h, mut w) = grid;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                x = g.avg_pool2(x, h, w);
                h /= 2;
                w /= 2;
                x = self.merges[i - 1].forward(g, x);
            }
            for block in blocks {
                if let Some(p) = prompts {
                    x = g.add(x, p[i]);
                }
                x = block.forward(g, x);
            }
            out.push(x);
        }
        out
    }
}

impl Parameterized for Encoder {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.patch_embed.visit(f);
        self.pos_embed.visit(f);
        for blocks in &self.stages {
            blocks.visit(f);
        }
        self.merges.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.patch_embed.visit_mut(f);
        self.pos_embed.visit_mut(f);
        for blocks in &mut self.stages {
            blocks.visit_mut(f);
        }
        self.merges.visit_mut(f);
    }
}

/// Top-down fusion: `x ← gelu(up2(x) + lateral_i(f_i))` from stage 4 to stage 1, then a 1-channel head.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub laterals: Vec<Linear>,
    pub head: Linear,
}

impl Decoder {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let laterals = (0..NUM_STAGES)
            .map(|i| {
                Linear::new(
                    &format!("decoder.lateral{}", i + 1),
                    cfg.stage_dims[i],
                    cfg.decoder_dim,
                    Init::Xavier,
                    rng,
                )
            })
            .collect();
        let head = Linear::new("decoder.head", cfg.decoder_dim, 1, Init::Xavier, rng);
        Self { laterals, head }
    }

    /// `(H·W)×1` logits from the four stage token matrices.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, feats: &[Var], cfg: &BackboneConfig) -> Var {
        let mut x = self.laterals[NUM_STAGES - 1].forward(g, feats[NUM_STAGES - 1]);
        for i in (0..NUM_STAGES - 1).rev() {
            let from = cfg.stage_grid(i + 2);
            let to = cfg.stage_grid(i + 1);
            let up = g.resize(x, from, to);
            let skip = self.laterals[i].forward(g, feats[i]);
            let sum = g.add(up, skip);
            x = g.gelu(sum);
        }
        let logits = self.head.forward(g, x);
        g.resize(logits, cfg.stage_grid(1), cfg.resolution)
    }
}

impl Parameterized for Decoder {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.laterals.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.laterals.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// The four per-stage outputs of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub grids: Vec<FeatureGrid>,
}

impl StageFeatures {
    pub fn tokens(&self) -> Vec<Array2<f64>> {
        self.grids.iter().map(FeatureGrid::tokens).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl BackboneModel {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng);
        let decoder = Decoder::new(&config, rng);
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn check_image(&self, image: &ndarray::Array3<f64>) -> Result<()> {
        let (h, w, c) = image.dim();
        if (h, w) != self.config.resolution || c != self.config.channels {
            return shape_err(format!(
                "image is {h}×{w}×{c}, backbone expects {}×{}×{}",
                self.config.resolution.0, self.config.resolution.1, self.config.channels
            ));
        }
        Ok(())
    }

    /// Stage features for `image`, with `prompts[i]` injected into every block of stage `i+1`.
    pub fn encode(
        &self,
        image: &ndarray::Array3<f64>,
        prompts: Option<&[StagePrompt]>,
    ) -> Result<StageFeatures> {
        self.check_image(image)?;
        if let Some(ps) = prompts {
            if ps.len() != NUM_STAGES {
                return invalid(format!(
                    "expected {NUM_STAGES} stage prompts, got {}",
                    ps.len()
                ));
            }
            for (i, p) in ps.iter().enumerate() {
                let (h, w) = self.config.stage_grid(i + 1);
                let expected = (h, w, self.config.stage_dims[i]);
                if p.grid.dim() != expected {
                    return shape_err(format!(
                        "stage {} prompt is {:?}, expected {expected:?}",
                        i + 1,
                        p.grid.dim()
                    ));
                }
            }
        }
        let mut g = Graph::inference();
        let patches = g.constant(patchify(image, self.config.patch)?);
        let pe = self.encoder.embed(&mut g, patches);
        let prompt_vars = prompts.map(|ps| {
            ps.iter()
                .map(|p| g.constant(p.grid.tokens()))
                .collect::<Vec<_>>()
        });
        let feats = self.encoder.run_stages(
            &mut g,
            pe,
            self.config.stage_grid(1),
            prompt_vars.as_deref(),
        );
        let grids = feats
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (h, w) = self.config.stage_grid(i + 1);
                let tokens = g.value(v);
                if !tokens.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite(format!("stage {} activations", i + 1)));
                }
                FeatureGrid::from_tokens(tokens.clone(), h, w, Origin::StageFeature, Some(i + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StageFeatures { grids })
    }

    /// `H×W` logits from stage features.
    pub fn decode(&self, feats: &StageFeatures) -> Result<Array2<f64>> {
        if feats.grids.len() != NUM_STAGES {
            return invalid(format!(
                "expected {NUM_STAGES} stage grids, got {}",
                feats.grids.len()
            ));
        }
        for (i, grid) in feats.grids.iter().enumerate() {
            let (h, w) = self.config.stage_grid(i + 1);
            if grid.dim() != (h, w, self.config.stage_dims[i]) {
                return shape_err(format!(
                    "stage {} features are {:?}, decoder expects {:?}",
                    i + 1,
                    grid.dim(),
                    (h, w, self.config.stage_dims[i])
                ));
            }
        }
        let mut g = Graph::inference();
        let vars: Vec<Var> = feats.grids.iter().map(|f| g.constant(f.tokens())).collect();
        let out = self.decoder.forward(&mut g, &vars, &self.config);
        let (h, w) = self.config.resolution;
        Ok(g.value(out)
            .clone()
            .into_shape_with_order((h, w))
            .expect("decoder emits H·W logits"))
    }
}

impl Parameterized for BackboneModel {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Which parameter groups are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Adapters, prompt projections and decoder; encoder frozen.
    #[default]
    Sam2Adapter,
    DecoderOnly,
    Full,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Sam2Adapter => "sam2_adapter",
            Regime::DecoderOnly => "decoder_only",
            Regime::Full => "full",
        }
    }

    pub fn trains(self, name: &str) -> bool {
        match self {
            Regime::Sam2Adapter => {
                name.starts_with("adapter.")
                    || name.starts_with("decoder.")
                    || name.starts_with("prompt.")
            }
            Regime::DecoderOnly => name.starts_with("decoder."),
            Regime::Full => true,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sam2_adapter" => Ok(Regime::Sam2Adapter),
            "decoder_only" => Ok(Regime::DecoderOnly),
            "full" => Ok(Regime::Full),
            _ => invalid(format!("unknown regime `{s}`")),
        }
    }
}
