//! Pre-trained model surrogate: fine-tune the float twin on a pretext task
//! (linear probe first, then full fine-tuning at a smaller rate), then
//! post-training-quantize with activation calibration on pretext samples.
//! Downstream experiments transfer the resulting int8 bundle to new tasks.

use crate::data::Dataset;
use crate::error::Result;
use crate::graph::{build_backbone, quantize_bundle, BackboneConfig, GraphMode, ModelBundle};
use crate::sparse::{SelectPolicy, UpdateScheme};
use crate::train::{compile_model, train, OptimizerConfig, TrainState};

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    /// Linear-probe phase: classifier-only training.
    pub probe_lr: f64,
    pub probe_epochs: usize,
    /// Full fine-tuning phase.
    pub fine_lr: f64,
    pub fine_epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            probe_lr: 0.1,
            probe_epochs: 8,
            fine_lr: 0.0005,
            fine_epochs: 25,
        }
    }
}

/// A pretrained model pair: the deployable int8 bundle and the float
/// weights it was quantized from (the shadow-model starting point).
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub quantized: ModelBundle,
    pub float: ModelBundle,
    pub pretext_accuracy: f64,
}

/// Train the float twin on the pretext dataset, then post-training-quantize
/// with calibration on pretext samples.
pub fn pretrain_and_quantize(
    cfg: &BackboneConfig,
    seed: u64,
    pretext: &Dataset,
    pc: &PretrainConfig,
) -> Result<Pretrained> {
    let mut float_bundle = build_backbone(cfg, GraphMode::Float, seed)?;
    let layers = float_bundle.graph.layers.len();

    // phase 1: settle the classifier on frozen random features
    let probe = compile_model(
        &float_bundle,
        &UpdateScheme::classifier_only(),
        SelectPolicy::Magnitude,
        seed,
    )?;
    let mut state = TrainState::new(
        probe,
        OptimizerConfig {
            lr: pc.probe_lr,
            epochs: pc.probe_epochs,
            qas_enabled: false,
            grad_clip: Some(1.0),
            ..Default::default()
        },
        seed,
    )?;
    train(&mut state, pretext, None, "pretrain-probe")?;
    float_bundle.params = state.params;

    // phase 2: full fine-tuning at a small rate
    let full = compile_model(
        &float_bundle,
        &UpdateScheme::full_update(layers),
        SelectPolicy::Magnitude,
        seed,
    )?;
    let mut state = TrainState::new(
        full,
        OptimizerConfig {
            lr: pc.fine_lr,
            epochs: pc.fine_epochs,
            qas_enabled: false,
            grad_clip: Some(0.5),
            schedule: crate::train::LrSchedule::CosineWarmup { warmup_epochs: 2 },
            ..Default::default()
        },
        seed,
    )?;
    let records = train(&mut state, pretext, None, "pretrain-full")?;
    let acc = records.last().map(|r| r.accuracy).unwrap_or(0.0);
    float_bundle.params = state.params;

    let quantized = quantize_bundle(&float_bundle, &pretext.images, seed)?;
    Ok(Pretrained {
        quantized,
        float: float_bundle,
        pretext_accuracy: acc,
    })
}
