//! Decoder backbone with per-layer adapters and its training loops.

mod backbone;
mod train;

pub use backbone::{BackboneConfig, DecodeCache, GraphPath, LayerCache, StkModel};
pub use train::{
    compute_loss, example_forward, pretrain_backbone, target_pairs, train_adapters, Example, PretrainConfig,
    StepRecord, TrainConfig,
};
