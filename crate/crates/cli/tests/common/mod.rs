#![allow(dead_code)]

use std::path::Path;

use dgfnet_cli::ExperimentConfig;
use dgfnet_core::fusion::FusionMode;
use dgfnet_core::transformer::TransformerConfig;
use dgfnet_core::unet::UNetConfig;

/// A config small enough to train in seconds.
pub fn tiny(dir: &Path, fusion: FusionMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk().with_fusion(fusion);
    cfg.name = "tiny".into();
    cfg.output_dir = dir.to_path_buf();
    cfg.data.train_examples = 16;
    cfg.data.test_examples = 4;
    cfg.model.unet = UNetConfig {
        depth: 3,
        base_channels: 4,
        bottleneck_channels: 8,
        final_channels: 4,
        attention: true,
        attention_groups: 2,
    };
    cfg.model.transformer = TransformerConfig {
        width: 8,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
        positional: false,
    };
    cfg.train.batch_size = 4;
    cfg.train.epochs = 2;
    cfg.train.checkpoint_every = 2;
    cfg.train.lr = 3e-3;
    cfg
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml()).unwrap();
}
