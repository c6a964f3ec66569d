//! Contribution measurement: short fine-tuning probes on a proxy dataset
//! that quantify the accuracy gain of each update choice.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::ModelBundle;
use crate::sparse::{Ratio, SelectPolicy, UpdateScheme, WeightUpdate};
use crate::train::{compile_model, evaluate, train, OptimizerConfig, TrainState};

use super::{ContributionTable, TableMetadata};

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub optimizer: OptimizerConfig,
    pub policy: SelectPolicy,
    pub seed: u64,
}

/// Fine-tune `bundle` under `scheme` for the probe epochs and return eval
/// accuracy in percentage points.
pub fn probe_accuracy(
    bundle: &ModelBundle,
    scheme: &UpdateScheme,
    train_set: &Dataset,
    eval_set: &Dataset,
    probe: &ProbeConfig,
) -> Result<f64> {
    let compiled = compile_model(bundle, scheme, probe.policy, probe.seed)?;
    let mut state = TrainState::new(compiled, probe.optimizer.clone(), probe.seed)?;
    train(&mut state, train_set, Some(eval_set), "probe")?;
    Ok(evaluate(&state, eval_set)? * 100.0)
}

/// Accuracy gain of bias-only update at depth `k` over classifier-only
/// training, identical config and seed. `k = 0` is 0.0 by definition.
pub fn measure_bias_contrib(
    bundle: &ModelBundle,
    train_set: &Dataset,
    eval_set: &Dataset,
    k: usize,
    probe: &ProbeConfig,
) -> Result<f64> {
    if k == 0 {
        return Ok(0.0);
    }
    let base = probe_accuracy(bundle, &UpdateScheme::classifier_only(), train_set, eval_set, probe)?;
    let acc = probe_accuracy(bundle, &UpdateScheme::bias_only(k), train_set, eval_set, probe)?;
    Ok(acc - base)
}

/// Accuracy gain of additionally updating layer `i` at ratio `r` over pure
/// bias-only update (full depth).
pub fn measure_weight_contrib(
    bundle: &ModelBundle,
    train_set: &Dataset,
    eval_set: &Dataset,
    layer: usize,
    ratio: Ratio,
    probe: &ProbeConfig,
) -> Result<f64> {
    let layers = bundle.graph.layers.len();
    if layer >= layers {
        return Err(Error::Scheme(format!("layer {layer} out of range")));
    }
    let base = probe_accuracy(bundle, &UpdateScheme::bias_only(layers), train_set, eval_set, probe)?;
    let mut scheme = UpdateScheme::bias_only(layers);
    scheme.weight_updates.push(WeightUpdate { layer, ratio });
    let acc = probe_accuracy(bundle, &scheme, train_set, eval_set, probe)?;
    Ok(acc - base)
}

/// Measure the full table: every bias depth and every (layer, ratio) pair.
/// Probes that fail (training divergence) are reported as missing entries,
/// never silently zeroed.
pub fn build_table(
    bundle: &ModelBundle,
    train_set: &Dataset,
    eval_set: &Dataset,
    probe: &ProbeConfig,
) -> Result<(ContributionTable, Vec<String>)> {
    let layers = bundle.graph.layers.len();
    let mut missing = Vec::new();

    let classifier_acc =
        probe_accuracy(bundle, &UpdateScheme::classifier_only(), train_set, eval_set, probe)?;

    let mut bias = vec![0.0];
    let mut bias_full_acc = classifier_acc;
    for k in 1..=layers {
        match probe_accuracy(bundle, &UpdateScheme::bias_only(k), train_set, eval_set, probe) {
            Ok(acc) => {
                bias.push(acc - classifier_acc);
                if k == layers {
                    bias_full_acc = acc;
                }
            }
            Err(e) => {
                missing.push(format!("bias k={k}: {e}"));
                bias.push(*bias.last().unwrap());
            }
        }
    }

    let mut weights = std::collections::BTreeMap::new();
    for layer in 0..layers {
        let mut row = std::collections::BTreeMap::new();
        // depthwise layers cannot slice output channels alone; only the
        // full-tensor update is in their search space
        let depthwise = bundle.graph.layers[layer].kind == crate::graph::LayerKind::Depthwise;
        for ratio in Ratio::ALL {
            if depthwise && ratio != Ratio::Full {
                continue;
            }
            let mut scheme = UpdateScheme::bias_only(layers);
            scheme.weight_updates.push(WeightUpdate { layer, ratio });
            match probe_accuracy(bundle, &scheme, train_set, eval_set, probe) {
                Ok(acc) => {
                    row.insert(ratio, acc - bias_full_acc);
                }
                Err(e) => missing.push(format!("weight layer={layer} ratio={ratio:?}: {e}")),
            }
        }
        weights.insert(layer, row);
    }

    let table = ContributionTable {
        bias,
        weights,
        metadata: TableMetadata {
            model: format!("{:?}", bundle.config.blocks.len()),
            proxy_dataset: format!("{} samples", train_set.len()),
            probe_epochs: probe.optimizer.epochs,
        },
    };
    Ok((table, missing))
}

#[derive(Debug, Clone, Serialize)]
pub struct AdditivityReport {
    /// Spearman correlation between the summed-contribution criterion and
    /// realized accuracy; None when undefined (no variance).
    pub spearman: Option<f64>,
    pub points: Vec<AdditivityPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdditivityPoint {
    pub criterion: f64,
    pub accuracy: f64,
}

/// Train each sampled scheme for real and correlate realized accuracy with
/// the additive criterion.
pub fn validate_additivity(
    bundle: &ModelBundle,
    table: &ContributionTable,
    schemes: &[UpdateScheme],
    train_set: &Dataset,
    eval_set: &Dataset,
    probe: &ProbeConfig,
) -> Result<AdditivityReport> {
    let mut points = Vec::new();
    for scheme in schemes {
        let accuracy = probe_accuracy(bundle, scheme, train_set, eval_set, probe)?;
        points.push(AdditivityPoint {
            criterion: table.criterion(scheme),
            accuracy,
        });
    }
    let criteria: Vec<f64> = points.iter().map(|p| p.criterion).collect();
    let accs: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    Ok(AdditivityReport {
        spearman: super::spearman(&criteria, &accs),
        points,
    })
}
