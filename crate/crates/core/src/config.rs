//! Run configuration: one TOML document covering data, model, training and outputs.
//!
//! Every command writes the resolved document next to its outputs; loading that
//! echo and re-running reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::backbone::{BackboneConfig, MaeConfig, Preset, Regime};
use crate::data::{
    gen_synthetic, load_paired_dataset, Dataset, SyntheticSpec, Task, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::experiment::AblationConfig;
use crate::model::Segmenter;
use crate::prompt::PromptConfig;
use crate::training::{load_checkpoint, AdamWConfig, LossKind, TrainConfig};

pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Falls back to the run seed.
    pub seed: Option<u64>,
    pub difficulty: f64,
    pub area_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 16,
            seed: None,
            difficulty: 0.5,
            area_range: (0.1, 0.3),
        }
    }
}

/// Where samples come from: a directory in the dataset layout, explicit image/mask
/// directories, or (when neither is given) the synthetic generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Taken from the dataset manifest when absent, else polyp.
    pub task: Option<Task>,
    pub root: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    /// Taken from the dataset manifest when absent, else 128×128.
    pub resolution: Option<(usize, usize)>,
    pub synth: SynthConfig,
}

impl DataConfig {
    fn dirs(&self) -> Option<(PathBuf, PathBuf)> {
        let root = self.root.as_deref();
        let images = self
            .images
            .clone()
            .or_else(|| root.map(|r| r.join("images")))?;
        let masks = self
            .masks
            .clone()
            .or_else(|| root.map(|r| r.join("masks")))?;
        Some((images, masks))
    }

    fn manifest(&self) -> Option<SyntheticSpec> {
        let text = fs::read_to_string(self.root.as_ref()?.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn is_synthetic(&self) -> bool {
        self.dirs().is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub preset: Preset,
    /// Checkpoint whose `encoder.*` arrays replace the random initialisation.
    pub encoder: Option<PathBuf>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            preset: Preset::ToyHiera,
            encoder: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub regime: Regime,
    /// Task default when absent.
    pub loss: Option<LossKind>,
    pub lr0: f64,
    /// Task default when absent.
    pub epochs: Option<usize>,
    pub batch: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            regime: Regime::Sam2Adapter,
            loss: None,
            lr0: 2e-4,
            epochs: None,
            batch: 4,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Omit wall-clock fields so that outputs are byte-reproducible.
    pub strict: bool,
    pub out: Option<PathBuf>,
    /// Model used by `predict`.
    pub checkpoint: Option<PathBuf>,
    /// Directory of probability maps scored by `eval`.
    pub predictions: Option<PathBuf>,
    pub data: DataConfig,
    pub backbone: BackboneSection,
    pub adapter: AdapterConfig,
    pub prompt: PromptConfig,
    pub train: TrainSection,
    pub pretrain: MaeConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the echo into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_ECHO_FILE), self.to_toml()?)?;
        Ok(())
    }

    /// Fills every defaulted field with the value the run will actually use.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let manifest = c.data.manifest();
        let task = c
            .data
            .task
            .or(manifest.as_ref().map(|m| m.task))
            .unwrap_or(Task::Polyp);
        c.data.task = Some(task);
        c.data.resolution = Some(
            c.data
                .resolution
                .or(manifest.as_ref().map(|m| m.resolution))
                .unwrap_or((128, 128)),
        );
        if c.data.is_synthetic() {
            c.data.synth.seed = Some(c.data.synth.seed.unwrap_or(c.seed));
        }
        c.train.loss = Some(c.train.loss.unwrap_or(LossKind::for_task(task)));
        c.train.epochs = Some(c.train.epochs.unwrap_or(TrainConfig::default_epochs(task)));
        c
    }

    pub fn task(&self) -> Task {
        self.resolved().data.task.expect("resolved")
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolved().data.resolution.expect("resolved")
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let r = self.resolved();
        let (h, w) = r.resolution();
        let s = &r.data.synth;
        SyntheticSpec::new(r.task(), s.count, s.seed.unwrap_or(r.seed))
            .with_resolution(h, w)
            .with_difficulty(s.difficulty)
            .with_area_range(s.area_range.0, s.area_range.1)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match self.data.dirs() {
            Some((images, masks)) => {
                load_paired_dataset(&images, &masks, self.resolution(), self.task())
            }
            None => gen_synthetic(&self.synthetic_spec()),
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig::preset(self.backbone.preset, self.resolution())
    }

    /// Adapters are built for every regime except decoder-only.
    pub fn adapter_config(&self) -> Option<AdapterConfig> {
        (self.train.regime != Regime::DecoderOnly).then(|| self.adapter.clone())
    }

    pub fn train_config(&self) -> TrainConfig {
        let r = self.resolved();
        let task = r.task();
        TrainConfig {
            task,
            regime: r.train.regime,
            loss: r.train.loss.expect("resolved"),
            lr0: r.train.lr0,
            epochs: r.train.epochs.expect("resolved"),
            batch: r.train.batch,
            seed: r.seed,
            optimizer: r.train.optimizer,
            strict: r.strict,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolved();
        if r.data.is_synthetic() {
            r.synthetic_spec().validate()?;
        } else if r.data.root.is_none() && (r.data.images.is_none() || r.data.masks.is_none()) {
            return Err(Error::Config(
                "data.images and data.masks must be given together".into(),
            ));
        }
        r.backbone_config().validate()?;
        r.prompt.validate()?;
        r.pretrain.validate()?;
        r.train_config().validate()
    }

    /// A freshly initialised model, seeded by the run seed, with the pretrained encoder if configured.
    pub fn build_model(&self) -> Result<Segmenter> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut model = Segmenter::new(
            self.backbone_config(),
            self.adapter_config().as_ref(),
            &self.prompt,
            &mut rng,
        )?;
        if let Some(path) = &self.backbone.encoder {
            let (source, _) = load_checkpoint(path)?;
            model.copy_encoder_from(&source.backbone)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("sede = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[train]\nlr = 1e-3"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml("seed = 3\n[train]\nlr0 = 1e-3").is_ok());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let c =
            RunConfig::from_toml("seed = 5\n[data]\ntask = \"shadow\"\n[data.synth]\ncount = 3")
                .unwrap();
        let r = c.resolved();
        assert_eq!(r.data.synth.seed, Some(5));
        assert_eq!(r.train.epochs, Some(90));
        assert_eq!(r.train.loss, Some(LossKind::BalancedBce));
        let back = RunConfig::from_toml(&r.to_toml().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolved(), r);
        assert_eq!(back.train_config(), c.train_config());
    }

    #[test]
    fn decoder_only_builds_no_adapters() {
        let mut c = RunConfig::default();
        c.data.resolution = Some((32, 32));
        c.train.regime = Regime::DecoderOnly;
        assert!(c.build_model().unwrap().adapters.is_none());
        c.train.regime = Regime::Sam2Adapter;
        assert!(c.build_model().unwrap().adapters.is_some());
    }

    #[test]
    fn invalid_synth_count() {
        let mut c = RunConfig::default();
        c.data.synth.count = 0;
        assert!(c.validate().unwrap_err().is_validation());
    }
}
