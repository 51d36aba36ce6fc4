//! Three-way adaptation ablation: decoder only, one shared adapter, per-stage adapters.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{count_trainable, AdapterConfig, AdapterMode};
use crate::backbone::{toy_mae_pretrain, BackboneConfig, Encoder, MaeConfig, Preset, Regime};
use crate::data::{gen_synthetic, Dataset, SyntheticSpec, Task};
use crate::error::{invalid, Result};
use crate::metrics::{evaluate_as, Metric, MetricsReport};
use crate::model::{count_parameters, trainable_parameters, Segmenter};
use crate::prompt::PromptConfig;
use crate::training::{predict_dataset, train, LossKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DecoderOnly,
    SharedSingle,
    PerStage,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::DecoderOnly,
        Variant::SharedSingle,
        Variant::PerStage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DecoderOnly => "decoder_only",
            Variant::SharedSingle => "shared_single",
            Variant::PerStage => "per_stage",
        }
    }

    pub fn regime(self) -> Regime {
        match self {
            Variant::DecoderOnly => Regime::DecoderOnly,
            _ => Regime::Sam2Adapter,
        }
    }

    pub fn adapter(self) -> Option<AdapterConfig> {
        let mode = match self {
            Variant::DecoderOnly => return None,
            Variant::SharedSingle => AdapterMode::SharedSingle,
            Variant::PerStage => AdapterMode::PerStage,
        };
        Some(AdapterConfig {
            mode,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub task: Task,
    pub preset: Preset,
    pub resolution: (usize, usize),
    pub train_count: usize,
    pub test_count: usize,
    pub data_seed: u64,
    pub difficulty: f64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr0: f64,
    pub batch: usize,
    /// Masked-reconstruction pretraining of the shared encoder; `None` keeps a seeded random encoder.
    pub pretrain: Option<MaeConfig>,
    pub encoder_seed: u64,
    pub prompt: PromptConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            task: Task::Camouflage,
            preset: Preset::ToyHiera,
            resolution: (64, 64),
            train_count: 48,
            test_count: 24,
            data_seed: 2024,
            difficulty: 0.5,
            seeds: vec![0, 1, 2],
            epochs: 40,
            lr0: 5e-3,
            batch: 4,
            pretrain: Some(MaeConfig::default()),
            encoder_seed: 0,
            prompt: PromptConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return invalid("the ablation needs at least one seed");
        }
        if self.train_count == 0 || self.test_count == 0 {
            return invalid("train_count and test_count must be positive");
        }
        self.backbone().validate()?;
        self.prompt.validate()?;
        if let Some(m) = &self.pretrain {
            m.validate()?;
        }
        self.train_config(0, Regime::DecoderOnly).validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig::preset(self.preset, self.resolution)
    }

    fn spec(&self, count: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec::new(self.task, count, seed)
            .with_resolution(self.resolution.0, self.resolution.1)
            .with_difficulty(self.difficulty)
    }

    /// Train and test splits, generated from different seeds.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = gen_synthetic(&self.spec(self.train_count, self.data_seed))?;
        let test = gen_synthetic(&self.spec(self.test_count, self.data_seed.wrapping_add(1)))?;
        Ok((train, test))
    }

    pub fn train_config(&self, seed: u64, regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            loss: LossKind::for_task(self.task),
            lr0: self.lr0,
            epochs: self.epochs,
            batch: self.batch,
            seed,
            ..TrainConfig::for_task(self.task)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub adapter_params: usize,
    pub trainable_params: usize,
    pub seeds: Vec<u64>,
    /// One test-set report per seed (sample tables dropped).
    pub reports: Vec<MetricsReport>,
}

impl AblationRow {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        let vals: Vec<f64> = self.reports.iter().filter_map(|r| r.get(metric)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub encoder_pretrain_loss: Option<(f64, f64)>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Task metrics plus mDice and mIoU, deduplicated, in table order.
    pub fn columns(&self) -> Vec<Metric> {
        let mut cols: Vec<Metric> = Metric::for_task(self.config.task).to_vec();
        for m in [Metric::MDice, Metric::MIoU] {
            if !cols.contains(&m) {
                cols.push(m);
            }
        }
        cols
    }

    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let mut out = String::from("| config | adapter params | trainable params |");
        for c in &cols {
            let _ = write!(out, " {} |", c.label());
        }
        out.push_str("\n|---|---:|---:|");
        out.push_str(&"---:|".repeat(cols.len()));
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "| {} | {} | {} |",
                r.variant.as_str(),
                r.adapter_params,
                r.trainable_params
            );
            for &c in &cols {
                match r.mean(c) {
                    Some(v) => {
                        let _ = write!(out, " {v:.4} |");
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = String::from("config,adapter_params,trainable_params");
        for c in &cols {
            out.push(',');
            out.push_str(c.key());
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{}",
                r.variant.as_str(),
                r.adapter_params,
                r.trainable_params
            );
            for &c in &cols {
                let _ = write!(
                    out,
                    ",{}",
                    r.mean(c).map(|v| format!("{v:.6}")).unwrap_or_default()
                );
            }
            out.push('\n');
        }
        out
    }
}

/// The frozen encoder shared by every variant and seed.
pub fn shared_encoder(
    config: &AblationConfig,
    train_set: &Dataset,
) -> Result<(Encoder, Option<(f64, f64)>)> {
    let backbone = config.backbone();
    match &config.pretrain {
        Some(mae) => {
            let out = toy_mae_pretrain(&backbone, train_set, mae)?;
            Ok((out.encoder, Some((out.initial_loss, out.final_loss))))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.encoder_seed);
            Ok((Encoder::new(&backbone, &mut rng), None))
        }
    }
}

/// Trains one variant for one seed and scores it on `test`.
pub fn run_variant(
    config: &AblationConfig,
    variant: Variant,
    seed: u64,
    encoder: &Encoder,
    train_set: &Dataset,
    test: &Dataset,
) -> Result<(Segmenter, MetricsReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Segmenter::new(
        config.backbone(),
        variant.adapter().as_ref(),
        &config.prompt,
        &mut rng,
    )?;
    model.backbone.encoder = encoder.clone();
    let outcome = train(
        &config.train_config(seed, variant.regime()),
        model,
        train_set,
    )?;
    let preds = predict_dataset(&outcome.model, test)?;
    let report = evaluate_as(&preds, test, Task::Generic)?;
    Ok((outcome.model, report))
}

pub fn run_ablation(config: &AblationConfig) -> Result<AblationReport> {
    config.validate()?;
    let (train_set, test) = config.datasets()?;
    let (encoder, pretrain_loss) = shared_encoder(config, &train_set)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut reports = Vec::new();
        let mut counts = (0, 0);
        for &seed in &config.seeds {
            let (model, mut report) =
                run_variant(config, variant, seed, &encoder, &train_set, &test)?;
            report.samples.clear();
            report.task = config.task;
            report.model_id = Some(format!("{}-seed{seed}", variant.as_str()));
            reports.push(report);
            counts = (
                model.adapters.as_ref().map_or(0, count_trainable),
                count_parameters(&model, &trainable_parameters(&model, variant.regime())),
            );
        }
        rows.push(AblationRow {
            variant,
            adapter_params: counts.0,
            trainable_params: counts.1,
            seeds: config.seeds.clone(),
            reports,
        });
    }
    Ok(AblationReport {
        config: config.clone(),
        encoder_pretrain_loss: pretrain_loss,
        rows,
    })
}
