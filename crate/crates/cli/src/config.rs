//! Declarative experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pinet_core::layers::Arch;
use pinet_core::pinet::Variant;
use pinet_core::segmentation::{seg_arch, SegMode, ToyFloodsConfig};
use pinet_core::toyshapes::ToyShapesConfig;
use pinet_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{ExperimentError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Toyshapes,
    Toyfloods,
}

/// Everything an experiment can train. The Grad-CAM baseline is not listed:
/// every ToyShapes run trains it as the reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Naive,
    Soft,
    Default,
    Feedback,
    Strong,
    Ensemble,
    Segnet,
    PinetRegression,
}

impl VariantName {
    pub const TOYSHAPES: [VariantName; 6] = [
        VariantName::Naive,
        VariantName::Soft,
        VariantName::Default,
        VariantName::Feedback,
        VariantName::Strong,
        VariantName::Ensemble,
    ];
    pub const TOYFLOODS: [VariantName; 2] = [VariantName::Segnet, VariantName::PinetRegression];

    pub fn name(self) -> &'static str {
        match self {
            VariantName::Naive => "naive",
            VariantName::Soft => "soft",
            VariantName::Default => "default",
            VariantName::Feedback => "feedback",
            VariantName::Strong => "strong",
            VariantName::Ensemble => "ensemble",
            VariantName::Segnet => "segnet",
            VariantName::PinetRegression => "pinet_regression",
        }
    }

    pub fn task(self) -> Task {
        match self {
            VariantName::Segnet | VariantName::PinetRegression => Task::Toyfloods,
            _ => Task::Toyshapes,
        }
    }

    /// The single-network PiNet variant, if this is one.
    pub fn pinet(self) -> Option<Variant> {
        match self {
            VariantName::Naive => Some(Variant::Naive),
            VariantName::Soft => Some(Variant::Soft),
            VariantName::Default => Some(Variant::Default),
            VariantName::Feedback => Some(Variant::Feedback),
            VariantName::Strong => Some(Variant::Strong),
            _ => None,
        }
    }

    pub fn seg_mode(self) -> Option<SegMode> {
        match self {
            VariantName::Segnet => Some(SegMode::Segnet),
            VariantName::PinetRegression => Some(SegMode::PinetRegression),
            _ => None,
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantName {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        VariantName::TOYSHAPES
            .into_iter()
            .chain(VariantName::TOYFLOODS)
            .find(|v| v.name() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown variant `{s}`")))
    }
}

pub const DESK_RUNS: usize = 5;
pub const FULL_RUNS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// `None` selects every variant of the task.
    pub variants: Option<Vec<VariantName>>,
    pub n_runs: usize,
    /// Held-out examples per run.
    pub n_test: usize,
    /// Training attempts per model before a run counts as not accepted.
    pub max_attempts: usize,
    pub train: TrainConfig,
    /// `None` selects the task's default architecture.
    pub arch: Option<Arch>,
    pub toyshapes: ToyShapesConfig,
    pub toyfloods: ToyFloodsConfig,
    /// Also train the regression PiNet on spatially constant images.
    pub constant_control: bool,
    /// Maps written per model and run.
    pub gallery_size: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Toyshapes,
            variants: None,
            n_runs: DESK_RUNS,
            n_test: 1000,
            max_attempts: 3,
            train: TrainConfig::default(),
            arch: None,
            toyshapes: ToyShapesConfig::default(),
            toyfloods: ToyFloodsConfig::default(),
            constant_control: true,
            gallery_size: 16,
            out_dir: PathBuf::from("results"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn variants(&self) -> Vec<VariantName> {
        match (&self.variants, self.task) {
            (Some(v), _) => v.clone(),
            (None, Task::Toyshapes) => VariantName::TOYSHAPES.to_vec(),
            (None, Task::Toyfloods) => VariantName::TOYFLOODS.to_vec(),
        }
    }

    pub fn arch(&self) -> Arch {
        match (&self.arch, self.task) {
            (Some(a), _) => a.clone(),
            (None, Task::Toyshapes) => Arch::default(),
            (None, Task::Toyfloods) => seg_arch(),
        }
    }

    pub fn image_size(&self) -> usize {
        match self.task {
            Task::Toyshapes => self.toyshapes.image_size,
            Task::Toyfloods => self.toyfloods.image_size,
        }
    }

    /// Training settings with the run count and seed of the experiment.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_runs: self.n_runs,
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if self.n_test == 0 {
            return bad("n_test must be at least 1".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        let variants = self.variants();
        if variants.is_empty() {
            return bad("variants must name at least one variant".into());
        }
        if let Some(v) = variants.iter().find(|v| v.task() != self.task) {
            return bad(format!("variants: `{v}` does not belong to task {:?}", self.task));
        }
        let mut seen = variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != variants.len() {
            return bad("variants: duplicate entries".into());
        }
        self.train_config().validate()?;
        let arch = self.arch();
        arch.validate()?;
        match self.task {
            Task::Toyshapes => self.toyshapes.validate()?,
            Task::Toyfloods => self.toyfloods.validate()?,
        }
        if arch.image_size != self.image_size() {
            return bad(format!(
                "arch.image_size {} differs from the generator's {}",
                arch.image_size,
                self.image_size()
            ));
        }
        let (n_train, n_val) = self.train.split_sizes();
        if n_train == 0 || n_val == 0 {
            return bad("train.n_train and train.val_frac must leave a non-empty train and validation split".into());
        }
        Ok(())
    }
}

/// Reads, fills defaults into, and validates a JSON config.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|source| ExperimentError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    cfg.validate()?;
    Ok(cfg)
}
