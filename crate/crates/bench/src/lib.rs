//! Shared fixtures for the criterion benchmarks.

use tinytrain_core::graph::{build_backbone, BackboneConfig, GraphMode, ModelBundle};

pub fn mbv2_bundle() -> ModelBundle {
    build_backbone(&BackboneConfig::mbv2_w035(10), GraphMode::Quantized, 7).expect("build")
}

pub fn toy_bundle(blocks: usize) -> ModelBundle {
    build_backbone(&BackboneConfig::toy(blocks, 8, 4, 8), GraphMode::Quantized, 7).expect("build")
}
