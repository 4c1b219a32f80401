//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::Path;

use dlvit::data::{Placement, SyntheticSpec};
use dlvit::dl::{DlSign, DEFAULT_RHO};
use dlvit::filter::{FilterTrainConfig, DEFAULT_THRESHOLD};
use dlvit::pipeline::{TrainOptions, TrainSchedule, DEFAULT_BATCH, DEFAULT_CHUNK, DEFAULT_WARMUP};
use dlvit::vit::{MaskMode, ModelConfig};
use dlvit::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorKind {
    #[default]
    Learned,
    /// Freshly initialized MLP, threshold calibrated to the label keep ratio.
    Random,
    AllKeep,
    /// Uniformly random tokens at the label keep ratio.
    RandomDiscard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub label: LabelConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            label: LabelConfig::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub scale_min: f32,
    pub scale_max: f32,
    pub noise: f32,
    /// Centre jitter as a fraction of the canvas; negative places objects
    /// uniformly.
    pub jitter: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_class: 60,
            val_per_class: 20,
            scale_min: 0.4,
            scale_max: 0.6,
            noise: 0.04,
            jitter: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub decay_every: usize,
    pub chunk: usize,
    pub mask_mode: MaskMode,
    /// Update the filter during fine-tuning.
    pub filter_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 30,
            finetune_epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            decay_every: 40,
            chunk: DEFAULT_CHUNK,
            mask_mode: MaskMode::Attn,
            filter_grad: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub rho: f64,
    /// When set, ρ is chosen so this fraction of tokens is labelled keep.
    pub keep_ratio: Option<f64>,
    pub dl_sign: DlSign,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            keep_ratio: None,
            dl_sign: DlSign::Importance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub selector: SelectorKind,
    pub use_global: bool,
    pub include_class: bool,
    pub threshold: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub pos_weight: Option<f32>,
    /// Weight positives by the negative/positive label ratio when
    /// `pos_weight` is unset.
    pub balance_labels: bool,
    /// Re-fit the threshold each fine-tune epoch to keep this token fraction.
    pub hold_keep: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let t = FilterTrainConfig::default();
        Self {
            selector: SelectorKind::Learned,
            use_global: true,
            include_class: false,
            threshold: DEFAULT_THRESHOLD,
            lr: t.lr,
            weight_decay: t.weight_decay,
            max_epochs: t.max_epochs,
            patience: t.patience,
            pos_weight: None,
            balance_labels: false,
            hold_keep: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub throughput: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
            warmup: DEFAULT_WARMUP,
            repeats: 5,
            throughput: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule(dlvit::pipeline::TrainMode::Pretrain).validate()?;
        if !(self.label.rho.is_finite()) {
            return Err(Error::Config("rho must be finite".into()));
        }
        if let Some(r) = self.label.keep_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("keep ratio must lie in (0, 1), got {r}")));
            }
        }
        if let Some(r) = self.filter.hold_keep {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("hold-keep ratio must lie in (0, 1], got {r}")));
            }
        }
        if !(0.0..=1.0).contains(&self.filter.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.filter.threshold)));
        }
        if self.eval.batch_size == 0 || self.eval.repeats == 0 {
            return Err(Error::Config("eval batch size and repeats must be positive".into()));
        }
        if self.train.chunk == 0 {
            return Err(Error::Config("gradient chunk must be positive".into()));
        }
        self.synthetic(0).validate()
    }

    pub fn synthetic(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            canvas: self.model.image_size,
            channels: self.model.channels,
            classes: self.model.num_classes,
            scale_range: (self.data.scale_min, self.data.scale_max),
            noise: self.data.noise,
            placement: if self.data.jitter < 0.0 {
                Placement::Uniform
            } else {
                Placement::Centered { jitter: self.data.jitter }
            },
            patch_size: self.model.patch_size,
            seed,
        }
    }

    pub fn schedule(&self, mode: dlvit::pipeline::TrainMode) -> TrainSchedule {
        use dlvit::pipeline::TrainMode;
        let (epochs, seed) = match mode {
            TrainMode::Pretrain => (self.train.pretrain_epochs, self.seed),
            TrainMode::Finetune => (self.train.finetune_epochs, self.seed.wrapping_add(1)),
        };
        let base = match mode {
            TrainMode::Pretrain => TrainSchedule::pretrain(epochs, seed),
            TrainMode::Finetune => TrainSchedule::finetune(epochs, seed),
        };
        TrainSchedule {
            base_lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            decay_every: Some(self.train.decay_every),
            batch_size: self.train.batch_size,
            ..base
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            mask_mode: self.train.mask_mode,
            chunk: self.train.chunk,
            hold_keep: self.filter.hold_keep,
            ..TrainOptions::default()
        }
    }

    pub fn filter_train(&self) -> FilterTrainConfig {
        FilterTrainConfig {
            lr: self.filter.lr,
            weight_decay: self.filter.weight_decay,
            max_epochs: self.filter.max_epochs,
            patience: self.filter.patience,
            pos_weight: self.filter.pos_weight,
            seed: self.seed,
            ..FilterTrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = toml::from_str("seed = 7\n[train]\nfinetune_epochs = 3\n[model]\ndepth = 2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.finetune_epochs, 3);
        assert_eq!(c.train.pretrain_epochs, 30);
        assert_eq!(c.model.depth, 2);
        assert_eq!(c.model.dim, 64);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
        let c = RunConfig {
            filter: FilterConfig {
                threshold: 1.5,
                ..FilterConfig::default()
            },
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
