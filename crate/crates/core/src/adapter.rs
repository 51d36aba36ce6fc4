//! Stage-wise prompt adapters.
//!
//! Each adapter turns the composed task feature `F_i`, resampled to its stage's
//! resolution, into a prompt `P = up(gelu(tune(F_i)))` that is added to the input
//! of every transformer block of that stage. One prompt is computed per stage and
//! forward pass; all blocks of the stage receive the same grid.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{avg_pool2, Graph, Init, Linear, Parameterized, Var};
use crate::prompt::{FeatureGrid, Origin};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Four independent adapters, one per encoder stage.
    #[default]
    PerStage,
    /// One adapter for all stages, with a per-stage linear map matching each stage's width.
    SharedSingle,
}

impl AdapterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::PerStage => "per_stage",
            AdapterMode::SharedSingle => "shared_single",
        }
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_stage" => Ok(AdapterMode::PerStage),
            "shared_single" => Ok(AdapterMode::SharedSingle),
            _ => invalid(format!("unknown adapter mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub mode: AdapterMode,
    /// Bottleneck width; defaults to half the prompt width.
    pub hidden_dim: Option<usize>,
    /// Output width of the shared up-projection in `shared_single` mode; defaults to `hidden_dim`.
    pub shared_dim: Option<usize>,
}

impl AdapterConfig {
    pub fn hidden(&self, prompt_dim: usize) -> usize {
        self.hidden_dim.unwrap_or((prompt_dim / 2).max(1))
    }

    pub fn shared(&self, prompt_dim: usize) -> usize {
        self.shared_dim.unwrap_or_else(|| self.hidden(prompt_dim))
    }
}

/// One `tune → GELU → up` prompt generator.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStage {
    /// Stage served, or `None` for the adapter shared by all stages.
    pub stage: Option<usize>,
    pub tune: Linear,
    pub up: Linear,
}

impl AdapterStage {
    /// Random `tune`, zero `up`: a fresh adapter emits the zero prompt.
    pub fn new(
        stage: Option<usize>,
        prompt_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let prefix = match stage {
            Some(s) => format!("adapter.stage{s}"),
            None => "adapter.shared".to_string(),
        };
        Self {
            stage,
            tune: Linear::new(
                &format!("{prefix}.tune"),
                prompt_dim,
                hidden_dim,
                Init::Xavier,
                rng,
            ),
            up: Linear::new(
                &format!("{prefix}.up"),
                hidden_dim,
                out_dim,
                Init::Zeros,
                rng,
            ),
        }
    }

    pub fn from_linears(stage: Option<usize>, tune: Linear, up: Linear) -> Result<Self> {
        if tune.output_dim() != up.input_dim() {
            return shape_err(format!(
                "tune emits {} values but up expects {}",
                tune.output_dim(),
                up.input_dim()
            ));
        }
        Ok(Self { stage, tune, up })
    }

    pub fn prompt_dim(&self) -> usize {
        self.tune.input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.up.output_dim()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, f: Var) -> Var {
        let hidden = self.tune.forward(g, f);
        let act = g.gelu(hidden);
        self.up.forward(g, act)
    }
}

impl Parameterized for AdapterStage {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.tune.visit(f);
        self.up.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.tune.visit_mut(f);
        self.up.visit_mut(f);
    }
}

/// The adapters serving all four encoder stages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    mode: AdapterMode,
    stages: Vec<AdapterStage>,
    /// `shared_single` only: per-stage maps from the shared width to each stage width.
    match_maps: Vec<Linear>,
}

impl AdapterStack {
    pub fn new(
        config: &AdapterConfig,
        prompt_dim: usize,
        stage_dims: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if stage_dims.len() != NUM_STAGES {
            return invalid(format!(
                "adapters need {NUM_STAGES} stage widths, got {}",
                stage_dims.len()
            ));
        }
        let hidden = config.hidden(prompt_dim);
        match config.mode {
            AdapterMode::PerStage => {
                let stages = stage_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| AdapterStage::new(Some(i + 1), prompt_dim, hidden, d, rng))
                    .collect();
                Self::from_parts(AdapterMode::PerStage, stages, Vec::new())
            }
            AdapterMode::SharedSingle => {
                let shared_dim = config.shared(prompt_dim);
                let mut shared = AdapterStage::new(None, prompt_dim, hidden, shared_dim, rng);
                shared.up = Linear::new("adapter.shared.up", hidden, shared_dim, Init::Xavier, rng);
                let maps = stage_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        Linear::new(
                            &format!("adapter.stage{}.match", i + 1),
                            shared_dim,
                            d,
                            Init::Zeros,
                            rng,
                        )
                    })
                    .collect();
                Self::from_parts(AdapterMode::SharedSingle, vec![shared], maps)
            }
        }
    }

    pub fn from_parts(
        mode: AdapterMode,
        stages: Vec<AdapterStage>,
        match_maps: Vec<Linear>,
    ) -> Result<Self> {
        if stages.is_empty() {
            return invalid("an adapter stack needs at least one adapter");
        }
        match mode {
            AdapterMode::PerStage => {
                if stages.len() != NUM_STAGES || !match_maps.is_empty() {
                    return invalid(format!(
                        "per_stage mode needs exactly {NUM_STAGES} adapters"
                    ));
                }
                let dp = stages[0].prompt_dim();
                if stages.iter().any(|s| s.prompt_dim() != dp) {
                    return shape_err("per-stage adapters disagree on prompt width");
                }
            }
            AdapterMode::SharedSingle => {
                if stages.len() != 1 || match_maps.len() != NUM_STAGES {
                    return invalid(format!(
                        "shared_single mode needs one adapter and {NUM_STAGES} matching maps"
                    ));
                }
                if match_maps
                    .iter()
                    .any(|m| m.input_dim() != stages[0].out_dim())
                {
                    return shape_err("matching maps must accept the shared adapter's output");
                }
            }
        }
        Ok(Self {
            mode,
            stages,
            match_maps,
        })
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn stages(&self) -> &[AdapterStage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [AdapterStage] {
        &mut self.stages
    }

    pub fn match_maps(&self) -> &[Linear] {
        &self.match_maps
    }

    pub fn prompt_dim(&self) -> usize {
        self.stages[0].prompt_dim()
    }

    /// Width of the prompt for `stage` (1-based).
    pub fn stage_dim(&self, stage: usize) -> usize {
        match self.mode {
            AdapterMode::PerStage => self.stages[stage - 1].out_dim(),
            AdapterMode::SharedSingle => self.match_maps[stage - 1].output_dim(),
        }
    }

    /// Stage prompts from `F_i` given as `(h·w)×d_p` tokens at stage-1 resolution.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        composed: Var,
        grid: (usize, usize),
    ) -> Vec<Var> {
        let (mut h, mut w) = grid;
        let mut f = composed;
        let shared_hidden = match self.mode {
            AdapterMode::PerStage => None,
            AdapterMode::SharedSingle => Some(&self.stages[0]),
        };
        (1..=NUM_STAGES)
            .map(|stage| {
                if stage > 1 {
                    f = g.avg_pool2(f, h, w);
                    h /= 2;
                    w /= 2;
                }
                match shared_hidden {
                    None => self.stages[stage - 1].forward(g, f),
                    Some(shared) => {
                        let z = shared.forward(g, f);
                        self.match_maps[stage - 1].forward(g, z)
                    }
                }
            })
            .collect()
    }
}

impl Parameterized for AdapterStack {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.stages.visit(f);
        self.match_maps.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.stages.visit_mut(f);
        self.match_maps.visit_mut(f);
    }
}

/// A prompt grid bound to the stage it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePrompt {
    pub grid: FeatureGrid,
}

impl StagePrompt {
    pub fn new(grid: FeatureGrid) -> Result<Self> {
        if grid.origin != Origin::Prompt || grid.stage.is_none() {
            return invalid("a stage prompt needs origin=prompt and a stage index");
        }
        Ok(Self { grid })
    }

    pub fn zeros(stage: usize, h: usize, w: usize, d: usize) -> Self {
        Self {
            grid: FeatureGrid::zeros(h, w, d, Origin::Prompt, Some(stage)),
        }
    }

    pub fn stage(&self) -> usize {
        self.grid.stage.expect("checked at construction")
    }
}

/// 2×2 mean pooling applied `stage − 1` times.
pub fn resample_to_stage(f: &FeatureGrid, stage: usize) -> Result<FeatureGrid> {
    if !(1..=NUM_STAGES).contains(&stage) {
        return invalid(format!("stage {stage} outside 1..={NUM_STAGES}"));
    }
    let (mut h, mut w, _) = f.dim();
    let factor = 1 << (stage - 1);
    if h % factor != 0 || w % factor != 0 {
        return shape_err(format!("a {h}×{w} grid cannot be pooled by {factor}"));
    }
    let mut tokens = f.tokens();
    for _ in 1..stage {
        tokens = avg_pool2(tokens.view(), h, w);
        h /= 2;
        w /= 2;
    }
    FeatureGrid::from_tokens(tokens, h, w, f.origin, Some(stage))
}

/// `up(gelu(tune(t)))` for every token `t` of `f_stage`.
pub fn adapter_prompt(adapter: &AdapterStage, f_stage: &FeatureGrid) -> Result<StagePrompt> {
    let (h, w, d) = f_stage.dim();
    if d != adapter.prompt_dim() {
        return shape_err(format!(
            "adapter expects width {} but the feature grid has {d}",
            adapter.prompt_dim()
        ));
    }
    let mut g = Graph::inference();
    let x = g.constant(f_stage.tokens());
    let out = adapter.forward(&mut g, x);
    let stage = adapter.stage.or(f_stage.stage).unwrap_or(1);
    let grid = FeatureGrid::from_tokens(g.value(out).clone(), h, w, Origin::Prompt, Some(stage))?;
    StagePrompt::new(grid)
}

/// Elementwise `block_input + prompt`.
pub fn inject_prompt(block_input: &FeatureGrid, prompt: &StagePrompt) -> Result<FeatureGrid> {
    if block_input.dim() != prompt.grid.dim() {
        return shape_err(format!(
            "block input is {:?} but prompt is {:?}",
            block_input.dim(),
            prompt.grid.dim()
        ));
    }
    FeatureGrid::new(
        block_input.data() + prompt.grid.data(),
        block_input.origin,
        block_input.stage,
    )
}

/// Exact number of trainable adapter parameters.
pub fn count_trainable(adapters: &AdapterStack) -> usize {
    adapters.num_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_adapter(tw: f64, tb: f64, uw: f64, ub: f64) -> AdapterStage {
        AdapterStage::from_linears(
            Some(1),
            Linear::from_arrays("t", array![[tw]], array![[tb]]),
            Linear::from_arrays("u", array![[uw]], array![[ub]]),
        )
        .unwrap()
    }

    fn grid(data: Array3<f64>) -> FeatureGrid {
        FeatureGrid::new(data, Origin::Composed, Some(1)).unwrap()
    }

    #[test]
    fn scalar_prompt_value() {
        let adapter = scalar_adapter(2.0, 0.0, 3.0, 1.0);
        let p = adapter_prompt(&adapter, &grid(Array3::from_elem((1, 1, 1), 0.5))).unwrap();
        assert!((p.grid.data()[[0, 0, 0]] - 3.524_034).abs() < 1e-5);
    }

    #[test]
    fn zero_parameters_give_zero_prompt() {
        let adapter = scalar_adapter(0.0, 0.0, 0.0, 0.0);
        let p = adapter_prompt(&adapter, &grid(Array3::from_elem((3, 3, 1), 0.9))).unwrap();
        assert!(p.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prompt_shape_and_dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapter = AdapterStage::new(Some(2), 6, 3, 10, &mut rng);
        let p = adapter_prompt(&adapter, &grid(Array3::zeros((8, 8, 6)))).unwrap();
        assert_eq!(p.grid.dim(), (8, 8, 10));
        assert_eq!(p.stage(), 2);
        assert!(adapter_prompt(&adapter, &grid(Array3::zeros((8, 8, 5)))).is_err());
    }

    #[test]
    fn resampling() {
        let f = grid(Array3::from_elem((8, 8, 3), 0.25));
        assert_eq!(resample_to_stage(&f, 1).unwrap().data(), f.data());
        let s3 = resample_to_stage(&f, 3).unwrap();
        assert_eq!(s3.dim(), (2, 2, 3));
        assert!(s3.data().iter().all(|&v| v == 0.25));

        let distinct = grid(Array3::from_shape_fn((4, 4, 1), |(y, x, _)| {
            (y * 4 + x) as f64
        }));
        let s2 = resample_to_stage(&distinct, 2).unwrap();
        let expected = [[2.5, 4.5], [10.5, 12.5]];
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(s2.data()[[y, x, 0]], expected[y][x]);
            }
        }
        assert!(resample_to_stage(&grid(Array3::zeros((6, 6, 1))), 3).is_err());
        assert!(resample_to_stage(&f, 5).is_err());
    }

    #[test]
    fn injection() {
        let x = grid(array![[[0.1, -0.2]]]);
        let p = StagePrompt::new(
            FeatureGrid::new(array![[[0.3, 0.4]]], Origin::Prompt, Some(1)).unwrap(),
        )
        .unwrap();
        let y = inject_prompt(&x, &p).unwrap();
        assert!((y.data()[[0, 0, 0]] - 0.4).abs() < 1e-12);
        assert!((y.data()[[0, 0, 1]] - 0.2).abs() < 1e-12);

        let zero = StagePrompt::zeros(1, 1, 1, 2);
        assert_eq!(inject_prompt(&x, &zero).unwrap().data(), x.data());
        assert!(inject_prompt(&x, &StagePrompt::zeros(1, 1, 1, 3)).is_err());
    }

    #[test]
    fn injection_is_additive() {
        let x = grid(Array3::from_shape_fn((2, 2, 2), |(a, b, c)| {
            (a + 2 * b + 3 * c) as f64 * 0.1
        }));
        let mk = |s: f64| {
            StagePrompt::new(
                FeatureGrid::new(
                    Array3::from_shape_fn((2, 2, 2), |(a, b, c)| {
                        s * (a as f64 - b as f64 + c as f64)
                    }),
                    Origin::Prompt,
                    Some(1),
                )
                .unwrap(),
            )
            .unwrap()
        };
        let (p, q) = (mk(0.3), mk(-0.7));
        let pq = StagePrompt::new(
            FeatureGrid::new(p.grid.data() + q.grid.data(), Origin::Prompt, Some(1)).unwrap(),
        )
        .unwrap();
        let lhs = inject_prompt(&inject_prompt(&x, &p).unwrap(), &q).unwrap();
        let rhs = inject_prompt(&x, &pq).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn trainable_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AdapterConfig {
            hidden_dim: Some(1),
            ..Default::default()
        };
        let stack = AdapterStack::new(&cfg, 1, &[1, 1, 1, 1], &mut rng).unwrap();
        assert_eq!(count_trainable(&stack), 16);

        let per = AdapterStack::new(&AdapterConfig::default(), 32, &[32, 64, 128, 256], &mut rng)
            .unwrap();
        let shared_cfg = AdapterConfig {
            mode: AdapterMode::SharedSingle,
            ..Default::default()
        };
        let shared = AdapterStack::new(&shared_cfg, 32, &[32, 64, 128, 256], &mut rng).unwrap();
        assert_eq!(per.stages().len(), 4);
        assert_eq!(shared.stages().len(), 1);
        assert!(count_trainable(&per) > count_trainable(&shared));
        // Closed form: Σ (dp·dh + dh) + (dh·ds + ds).
        let expected: usize = [32, 64, 128, 256]
            .iter()
            .map(|ds| 32 * 16 + 16 + 16 * ds + ds)
            .sum();
        assert_eq!(count_trainable(&per), expected);
    }

    #[test]
    fn empty_stack_is_rejected() {
        assert!(AdapterStack::from_parts(AdapterMode::PerStage, vec![], vec![]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(AdapterStack::new(&AdapterConfig::default(), 4, &[], &mut rng).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "per_stage".parse::<AdapterMode>().unwrap(),
            AdapterMode::PerStage
        );
        assert_eq!(
            "shared_single".parse::<AdapterMode>().unwrap(),
            AdapterMode::SharedSingle
        );
        assert!("global".parse::<AdapterMode>().is_err());
    }
}
