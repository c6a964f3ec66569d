//! Contribution analysis and constrained scheme search: measure per-tensor
//! accuracy contributions on a proxy task, then maximize their sum under an
//! analytic memory budget with evolutionary search (random search is the
//! baseline).

mod evolve;
mod measure;
mod stats;

pub use evolve::{evolutionary_search, exhaustive_best, random_search, Candidate, MemModel, SearchConfig, SearchOutcome};
pub use measure::{build_table, measure_bias_contrib, measure_weight_contrib, probe_accuracy,
    validate_additivity, AdditivityPoint, AdditivityReport, ProbeConfig};
pub use stats::spearman;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Ratio, UpdateScheme};

/// Measured accuracy contributions in percentage points: `bias[k]` is the
/// gain of updating the last `k` biases over classifier-only training;
/// `weights[(i, r)]` the gain of additionally updating layer `i` at ratio
/// `r` over bias-only training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionTable {
    /// Indexed by k; entry 0 is 0.0 by definition.
    pub bias: Vec<f64>,
    pub weights: BTreeMap<usize, BTreeMap<Ratio, f64>>,
    pub metadata: TableMetadata,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub model: String,
    pub proxy_dataset: String,
    pub probe_epochs: usize,
}

impl ContributionTable {
    pub fn layer_count(&self) -> usize {
        self.bias.len().saturating_sub(1)
    }

    /// The table must cover every k in 0..=L and carry at least the full
    /// ratio for every layer. Partial ratios may be absent where sub-tensor
    /// slicing does not apply (depthwise layers slice their inputs too);
    /// the search space is exactly the set of measured entries.
    pub fn validate(&self) -> Result<()> {
        if self.bias.is_empty() || self.bias[0] != 0.0 {
            return Err(Error::Config("bias contributions must start at k=0 with 0.0".into()));
        }
        let layers = self.layer_count();
        for layer in 0..layers {
            let row = self
                .weights
                .get(&layer)
                .ok_or_else(|| Error::Config(format!("missing weight contributions for layer {layer}")))?;
            if !row.contains_key(&Ratio::Full) {
                return Err(Error::Config(format!(
                    "missing full-ratio weight contribution for layer {layer}"
                )));
            }
        }
        Ok(())
    }

    /// Ratios admissible for a layer, ascending.
    pub fn ratio_options(&self, layer: usize) -> Vec<Ratio> {
        self.weights
            .get(&layer)
            .map(|row| row.keys().copied().collect())
            .unwrap_or_default()
    }

    /// The Eq.-5 objective: total contribution of a scheme.
    pub fn criterion(&self, scheme: &UpdateScheme) -> f64 {
        let mut total = self.bias[scheme.bias_depth_k.min(self.bias.len() - 1)];
        for wu in &scheme.weight_updates {
            if let Some(v) = self.weights.get(&wu.layer).and_then(|row| row.get(&wu.ratio)) {
                total += v;
            }
        }
        total
    }
}
