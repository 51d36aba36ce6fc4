//! Stage-wise prompted adapters for a frozen hierarchical image encoder.

pub mod adapter;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod spectral;
pub mod training;

pub use adapter::{AdapterConfig, AdapterMode, AdapterStack, AdapterStage, StagePrompt};
pub use backbone::{BackboneConfig, BackboneModel, Preset, Regime, StageFeatures};
pub use config::RunConfig;
pub use data::{Dataset, ImageSample, SyntheticSpec, Task};
pub use error::{Error, Result};
pub use metrics::{evaluate, MetricsReport};
pub use model::{trainable_parameters, Segmenter};
pub use prompt::{FeatureGrid, Origin, PromptConfig};
pub use training::{LossKind, TrainConfig, TrainHistory};
