//! Experiment configuration, read from and echoed as TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dgfnet_core::data::{DataConfig, Split};
use dgfnet_core::fusion::FusionMode;
use dgfnet_core::model::{ModelConfig, SpectralConfig};
use dgfnet_core::train::TrainConfig;
use dgfnet_core::transformer::TransformerConfig;
use dgfnet_core::unet::UNetConfig;
use dgfnet_core::Error;
use serde::{Deserialize, Serialize};

/// Output root used when a run directory is relative.
pub const OUT_ROOT_VAR: &str = "DGFNET_OUT_ROOT";
/// Name of the echoed config inside a run directory.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Run directory. Relative paths resolve against `$DGFNET_OUT_ROOT`
    /// (or the working directory when unset).
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub spectral: SpectralConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Sources per mixture.
    pub k: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub synth: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub fusion: FusionMode,
    /// `attention` is ignored; it follows `fusion`.
    pub unet: UNetConfig,
    pub transformer: TransformerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub lr: f64,
    /// Decoupled weight decay on transformer parameters.
    pub transformer_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Score the test split after every epoch.
    pub eval_each_epoch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Distortion filter length of the BSS decomposition (1 or 512).
    pub filter_taps: usize,
}

impl ExperimentConfig {
    /// Small CPU-friendly setup: 8 classes, pairs, 64 x 64 log spectrograms.
    pub fn desk() -> Self {
        let synth = DataConfig::default();
        let model = ModelConfig::desk(&synth, FusionMode::DgfmAttention);
        Self {
            name: "desk".into(),
            output_dir: PathBuf::from("runs/desk"),
            data: DataSection {
                k: 2,
                train_examples: 2000,
                test_examples: 200,
                train_seed: 1,
                test_seed: 2,
                synth,
            },
            spectral: SpectralConfig::desk(),
            model: ModelSection {
                fusion: model.fusion,
                unet: model.unet,
                transformer: model.transformer,
            },
            train: TrainSection {
                lr: 1e-3,
                transformer_decay: 1e-4,
                batch_size: 8,
                epochs: 2,
                seed: 0,
                checkpoint_every: 100,
                eval_each_epoch: false,
            },
            eval: EvalSection { filter_taps: 1 },
        }
    }

    /// Full-size grid and network: 256 x 256 log spectrograms, batch 20,
    /// 100 epochs.
    pub fn full() -> Self {
        let mut cfg = Self::desk();
        cfg.name = "full".into();
        cfg.output_dir = PathBuf::from("runs/full");
        cfg.spectral = SpectralConfig::full();
        cfg.data.synth.classes = 11;
        cfg.data.synth.clip_len = cfg.spectral.natural_clip_len();
        cfg.data.synth.motion_frames = 64;
        cfg.model.unet = UNetConfig {
            depth: 5,
            base_channels: 16,
            bottleneck_channels: 128,
            final_channels: 32,
            attention: true,
            attention_groups: 8,
        };
        cfg.model.transformer = TransformerConfig::default();
        cfg.train.lr = 1e-4;
        cfg.train.batch_size = 20;
        cfg.train.epochs = 100;
        cfg.train.checkpoint_every = 1000;
        cfg
    }

    pub fn preset(name: &str) -> anyhow::Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Contract(format!("unknown preset `{name}` (expected desk or full)")).into()),
        }
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(Error::from)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.data;
        if d.k == 0 || d.k > d.synth.classes {
            bail!(Error::Contract(format!("k = {} must lie in [1, {}]", d.k, d.synth.classes)));
        }
        if d.train_examples == 0 {
            bail!(Error::Contract("the training split is empty".into()));
        }
        d.synth.validate()?;
        self.spectral.validate()?;
        if d.synth.clip_len != self.spectral.natural_clip_len() {
            bail!(Error::Contract(format!(
                "clip_len {} does not match the spectral grid (expected {})",
                d.synth.clip_len,
                self.spectral.natural_clip_len()
            )));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.eval.filter_taps == 0 {
            bail!(Error::Contract("filter_taps must be positive".into()));
        }
        Ok(())
    }

    pub fn with_fusion(&self, fusion: FusionMode) -> Self {
        let mut cfg = self.clone();
        cfg.model.fusion = fusion;
        cfg
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            classes: self.data.synth.classes,
            object_dim: self.data.synth.object_dim,
            motion_dim: self.data.synth.motion_dim,
            fusion: self.model.fusion,
            unet: self.model.unet.clone(),
            transformer: self.model.transformer.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            transformer_decay: self.train.transformer_decay,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.train.seed,
        }
    }

    pub fn train_split(&self) -> Split {
        Split {
            base_seed: self.data.train_seed,
            len: self.data.train_examples,
            k: self.data.k,
        }
    }

    pub fn test_split(&self) -> Split {
        Split {
            base_seed: self.data.test_seed,
            len: self.data.test_examples,
            k: self.data.k,
        }
    }

    /// The run directory, resolved against the output root.
    pub fn run_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
