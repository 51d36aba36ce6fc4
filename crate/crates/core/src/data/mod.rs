//! Image/mask samples, datasets, and their on-disk layout.

mod io;
mod mask;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

pub use io::{load_paired_dataset, write_dataset, write_manifest, MANIFEST_FILE};
pub use mask::{binarize, resize_bilinear, resize_nearest};
pub use synth::{color_histograms, gen_synthetic, histogram_gap};

/// Segmentation task family; selects the loss pairing and metric protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Camouflage,
    Shadow,
    Polyp,
    Generic,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Camouflage, Task::Shadow, Task::Polyp, Task::Generic];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Camouflage => "camouflage",
            Task::Shadow => "shadow",
            Task::Polyp => "polyp",
            Task::Generic => "generic",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unsupported task `{s}`")))
    }
}

/// One image/ground-truth pair. Image is `H×W×C`, mask is `H×W`, all values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Array3<f64>, mask: Array2<f64>) -> Result<Self> {
        let id = id.into();
        let (h, w, _) = image.dim();
        if mask.dim() != (h, w) {
            return shape_err(format!(
                "sample `{id}`: image is {h}×{w} but mask is {:?}",
                mask.dim()
            ));
        }
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        if !image.iter().all(in_range) || !mask.iter().all(in_range) {
            return invalid(format!("sample `{id}`: values outside [0, 1]"));
        }
        Ok(Self { id, image, mask })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// An ordered, resolution-homogeneous collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<ImageSample>,
    task: Task,
    resolution: (usize, usize),
}

impl Dataset {
    /// Sorts samples by id and checks that ids are unique and resolutions agree.
    pub fn new(mut samples: Vec<ImageSample>, task: Task) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("dataset has no samples");
        };
        let resolution = first.resolution();
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return invalid(format!("duplicate sample id `{}`", s.id));
            }
            if s.resolution() != resolution {
                return shape_err(format!(
                    "sample `{}` is {:?}, expected {:?}",
                    s.id,
                    s.resolution(),
                    resolution
                ));
            }
        }
        Ok(Self {
            samples,
            task,
            resolution,
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.samples[i])
    }
}

/// Parameters of a generated dataset. Equal specs generate bit-identical datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_resolution")]
    pub resolution: (usize, usize),
    /// 0 = easy, 1 = hardest. Camouflage: phase perturbation; shadow: darkening; polyp: hue shift.
    #[serde(default = "default_difficulty")]
    pub difficulty: f64,
    /// Inclusive range of the foreground area fraction of every mask.
    #[serde(default = "default_area_range")]
    pub area_range: (f64, f64),
}

fn default_resolution() -> (usize, usize) {
    (128, 128)
}

fn default_difficulty() -> f64 {
    0.5
}

fn default_area_range() -> (f64, f64) {
    (0.1, 0.3)
}

impl SyntheticSpec {
    pub fn new(task: Task, count: usize, seed: u64) -> Self {
        Self {
            task,
            count,
            seed,
            resolution: default_resolution(),
            difficulty: default_difficulty(),
            area_range: default_area_range(),
        }
    }

    pub fn with_resolution(mut self, h: usize, w: usize) -> Self {
        self.resolution = (h, w);
        self
    }

    pub fn with_difficulty(mut self, difficulty: f64) -> Self {
        self.difficulty = difficulty;
        self
    }

    pub fn with_area_range(mut self, lo: f64, hi: f64) -> Self {
        self.area_range = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return invalid("synthetic count must be at least 1");
        }
        if self.resolution.0 < 16 || self.resolution.1 < 16 {
            return invalid(format!(
                "synthetic resolution {:?} is below 16×16",
                self.resolution
            ));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return invalid(format!("difficulty {} outside [0, 1]", self.difficulty));
        }
        let (lo, hi) = self.area_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.9) {
            return invalid(format!(
                "area range ({lo}, {hi}) must satisfy 0 < lo ≤ hi < 0.9"
            ));
        }
        if self.task == Task::Generic {
            return invalid("synthetic generation does not support the generic task");
        }
        Ok(())
    }
}
