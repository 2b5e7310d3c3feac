//! The frozen feature extractor, per-task adapters, and their weights file.

mod adapter;
mod backbone;
mod pretrain;
pub mod weights;

pub use adapter::{
    adapter_forward, count_trainable_params, default_adapter_blocks, init_adapter, Adapter,
    AdapterBlock, AdapterRegistry, AdapterSpec,
};
pub use backbone::{extract, extract_batch, Backbone, Block};
pub use pretrain::{pretrain_backbone, PretrainOutcome};
