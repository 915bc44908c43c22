//! TOML experiment configuration: one documented file covering the training
//! loop, the model, the active-learning protocol, and the dataset source.
//! Unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alloop::{ALConfig, SelectorKind};
use crate::contrastive::LossWeights;
use crate::data::SyntheticSpec;
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::optim::StepLrSchedule;
use crate::trainer::{SubsetMode, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Output directory for metrics.csv and checkpoints.
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelSection,
    pub train: TrainSection,
    pub al: AlSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            dataset: DatasetSource::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            al: AlSection::default(),
        }
    }
}

/// Either a synthetic recipe or a pair of IDX files per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub synthetic: SyntheticSection,
    /// IDX paths, used when kind = "idx".
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource {
            kind: DatasetKind::Synthetic,
            synthetic: SyntheticSection::default(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub train_counts: Option<Vec<usize>>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub noise_amplitude: f64,
    pub max_translation: i64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SyntheticSection {
            classes: s.classes,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            train_counts: s.train_counts,
            channels: s.channels,
            height: s.height,
            width: s.width,
            seed: s.seed,
            noise_amplitude: s.noise_amplitude,
            max_translation: s.max_translation,
        }
    }
}

impl SyntheticSection {
    pub fn to_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            train_counts: self.train_counts.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            seed: self.seed,
            noise_amplitude: self.noise_amplitude,
            max_translation: self.max_translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Ablation toggles (Table-2 style).
    pub use_predictor: bool,
    pub use_projector: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            in_channels: m.in_channels,
            widths: m.widths,
            embed_dim: m.embed_dim,
            num_classes: m.num_classes,
            use_predictor: m.use_predictor,
            use_projector: m.use_projector,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels,
            widths: self.widths,
            embed_dim: self.embed_dim,
            num_classes: self.num_classes,
            use_predictor: self.use_predictor,
            use_projector: self.use_projector,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fractions of the run at which the rate decays tenfold (paper-scale:
    /// 120/200 and 160/200).
    pub lr_milestones: Vec<f64>,
    pub lr_decay_factor: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Key-queue capacity m.
    pub queue_capacity: usize,
    pub temperature: f64,
    pub lambda_c: f64,
    /// Count the positive key among the InfoNCE negatives too (off =
    /// MoCo-style denominator).
    pub include_positive_in_negatives: bool,
    pub mode: TrainModeKey,
    pub use_strong_aug: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.schedule.base_lr,
            lr_milestones: t.schedule.milestones.clone(),
            lr_decay_factor: t.schedule.decay_factor,
            sgd_momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
            queue_capacity: t.queue_capacity,
            temperature: t.loss.temperature,
            lambda_c: t.loss.lambda_c,
            include_positive_in_negatives: t.loss.include_positive_in_negatives,
            mode: TrainModeKey::Joint,
            use_strong_aug: t.use_strong_aug,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainModeKey {
    Joint,
    MultiStage,
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: StepLrSchedule {
                base_lr: self.base_lr,
                milestones: self.lr_milestones.clone(),
                decay_factor: self.lr_decay_factor,
            },
            sgd_momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            queue_capacity: self.queue_capacity,
            loss: LossWeights {
                temperature: self.temperature,
                lambda_c: self.lambda_c,
                include_positive_in_negatives: self.include_positive_in_negatives,
            },
            mode: match self.mode {
                TrainModeKey::Joint => TrainMode::Joint,
                TrainModeKey::MultiStage => TrainMode::MultiStage,
            },
            use_strong_aug: self.use_strong_aug,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlSection {
    pub initial_labelled: usize,
    pub budget: usize,
    pub cycles: usize,
    pub selector: SelectorKey,
    pub subset_mode: SubsetModeKey,
    pub trial_seeds: Vec<u64>,
    /// Wall-clock seconds in metrics.csv; off keeps reruns byte-identical.
    pub record_timing: bool,
}

impl Default for AlSection {
    fn default() -> Self {
        let a = ALConfig::default();
        AlSection {
            initial_labelled: a.initial_labelled,
            budget: a.budget,
            cycles: a.cycles,
            selector: SelectorKey::Coreset,
            subset_mode: SubsetModeKey::LowestLoss,
            trial_seeds: a.trial_seeds,
            record_timing: a.record_timing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKey {
    Coreset,
    Entropy,
    Random,
    HighContrastive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetModeKey {
    LowestLoss,
    Random,
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::InvalidConfig(e.to_string()))
    }

    pub fn to_al_config(&self) -> ALConfig {
        ALConfig {
            initial_labelled: self.al.initial_labelled,
            budget: self.al.budget,
            cycles: self.al.cycles,
            selector: match self.al.selector {
                SelectorKey::Coreset => SelectorKind::Coreset,
                SelectorKey::Entropy => SelectorKind::Entropy,
                SelectorKey::Random => SelectorKind::Random,
                SelectorKey::HighContrastive => SelectorKind::HighContrastive,
            },
            subset_mode: match self.al.subset_mode {
                SubsetModeKey::LowestLoss => SubsetMode::LowestLoss,
                SubsetModeKey::Random => SubsetMode::Random,
            },
            trial_seeds: self.al.trial_seeds.clone(),
            train: self.train.to_train_config(),
            model: self.model.to_model_config(),
            record_timing: self.al.record_timing,
        }
    }

    /// Cross-section checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.kind == DatasetKind::Idx {
            for (name, p) in [
                ("train_images", &self.dataset.train_images),
                ("train_labels", &self.dataset.train_labels),
                ("test_images", &self.dataset.test_images),
                ("test_labels", &self.dataset.test_labels),
            ] {
                if p.is_none() {
                    return Err(CoreError::InvalidConfig(format!(
                        "dataset.kind = \"idx\" requires dataset.{name}"
                    )));
                }
            }
        } else {
            self.dataset.synthetic.to_spec().validate()?;
        }
        self.train.to_train_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip_is_fixed_point() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let parsed = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        // parse . serialize . parse is a fixed point.
        let text2 = parsed.to_toml().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse_str("frobnicate = 3").unwrap_err();
        assert!(matches!(err, CoreError::InvalidConfig(_)));
        let err = ExperimentConfig::parse_str("[train]\nepochz = 10").unwrap_err();
        assert!(matches!(err, CoreError::InvalidConfig(_)));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::parse_str(
            "[train]\nepochs = 7\n[al]\nbudget = 50\nselector = \"random\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.al.budget, 50);
        assert_eq!(cfg.al.selector, SelectorKey::Random);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn idx_kind_requires_paths() {
        let cfg = ExperimentConfig::parse_str("[dataset]\nkind = \"idx\"\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conversion_reaches_core_types() {
        let cfg = ExperimentConfig::default();
        let al = cfg.to_al_config();
        assert_eq!(al.train.loss.temperature, 0.2);
        assert_eq!(al.train.loss.lambda_c, 0.5);
        assert_eq!(al.model.embed_dim, 64);
        assert_eq!(al.budget, 100);
    }
}
