//! Sparse-update schemes and the backward-graph transforms that realize
//! them: pruning frozen-weight gradient nodes, dead-code elimination, and
//! sub-operator slicing of layers into trainable/frozen channel slices.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    Attrs, Graph, LayerPart, ModelBundle, Node, OpKind, ParamInfo, ParamKind, StorageClass,
};
use crate::qtensor::{dequantize, QuantData, QuantParams, QuantizedTensor, Shape, Tensor};

/// Channel update ratio, restricted to {1/8, 1/4, 1/2, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ratio {
    #[serde(rename = "1/8")]
    Eighth,
    #[serde(rename = "1/4")]
    Quarter,
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "1")]
    Full,
}

impl Ratio {
    pub const ALL: [Ratio; 4] = [Ratio::Eighth, Ratio::Quarter, Ratio::Half, Ratio::Full];

    pub fn value(self) -> f64 {
        match self {
            Ratio::Eighth => 0.125,
            Ratio::Quarter => 0.25,
            Ratio::Half => 0.5,
            Ratio::Full => 1.0,
        }
    }

    pub fn step_up(self) -> Ratio {
        match self {
            Ratio::Eighth => Ratio::Quarter,
            Ratio::Quarter => Ratio::Half,
            _ => Ratio::Full,
        }
    }

    pub fn step_down(self) -> Ratio {
        match self {
            Ratio::Full => Ratio::Half,
            Ratio::Half => Ratio::Quarter,
            _ => Ratio::Eighth,
        }
    }
}

/// `round(r * channels)`, round-half-to-even; zero is rejected.
pub fn selected_channel_count(channels: usize, ratio: f64) -> Result<usize> {
    let count = (ratio * channels as f64).round_ties_even() as usize;
    if count == 0 {
        return Err(Error::Scheme(format!(
            "ratio {ratio} of {channels} channels rounds to zero"
        )));
    }
    Ok(count.min(channels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightUpdate {
    pub layer: usize,
    pub ratio: Ratio,
}

/// The decision variable of scheme search: bias backpropagation depth `k`,
/// the set of weight-updated layers with channel ratios, and the classifier
/// flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateScheme {
    pub bias_depth_k: usize,
    pub weight_updates: Vec<WeightUpdate>,
    pub classifier_trainable: bool,
}

impl UpdateScheme {
    pub fn classifier_only() -> Self {
        UpdateScheme {
            bias_depth_k: 0,
            weight_updates: Vec::new(),
            classifier_trainable: true,
        }
    }

    pub fn bias_only(k: usize) -> Self {
        UpdateScheme {
            bias_depth_k: k,
            weight_updates: Vec::new(),
            classifier_trainable: true,
        }
    }

    pub fn full_update(layer_count: usize) -> Self {
        UpdateScheme {
            bias_depth_k: layer_count,
            weight_updates: (0..layer_count)
                .map(|layer| WeightUpdate {
                    layer,
                    ratio: Ratio::Full,
                })
                .collect(),
            classifier_trainable: true,
        }
    }

    /// A weight cannot update without backpropagating to its layer: every
    /// weight-update index must lie within the last `k` layers. Duplicates
    /// are forbidden.
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.bias_depth_k > layer_count {
            return Err(Error::Scheme(format!(
                "bias depth {} exceeds {layer_count} layers",
                self.bias_depth_k
            )));
        }
        let mut seen = BTreeSet::new();
        for wu in &self.weight_updates {
            if wu.layer >= layer_count {
                return Err(Error::Scheme(format!(
                    "weight update references nonexistent layer {}",
                    wu.layer
                )));
            }
            if wu.layer + self.bias_depth_k < layer_count {
                return Err(Error::Scheme(format!(
                    "weight update at layer {} lies outside the last {} layers",
                    wu.layer, self.bias_depth_k
                )));
            }
            if !seen.insert(wu.layer) {
                return Err(Error::Scheme(format!("duplicate weight update for layer {}", wu.layer)));
            }
        }
        Ok(())
    }

    pub fn ratio_for(&self, layer: usize) -> Option<Ratio> {
        self.weight_updates
            .iter()
            .find(|wu| wu.layer == layer)
            .map(|wu| wu.ratio)
    }
}

/// Output channels of one layer selected for sub-tensor update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layer_index: usize,
    /// Strictly increasing.
    pub selected_channels: Vec<usize>,
}

impl ChannelMask {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.selected_channels.is_empty() {
            return Err(Error::Scheme("empty channel mask".into()));
        }
        if !self.selected_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Scheme("mask channels must be strictly increasing".into()));
        }
        if *self.selected_channels.last().unwrap() >= channels {
            return Err(Error::Scheme("mask channel out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectPolicy {
    Magnitude,
    Random,
    InverseMagnitude,
}

/// Pick `round(r * C)` output channels of a weight tensor. The magnitude
/// policy takes the largest L2 norms of the dequantized weights, ties broken
/// by lower channel index.
pub fn select_channels(
    weight: &QuantizedTensor,
    layer_index: usize,
    ratio: Ratio,
    policy: SelectPolicy,
    seed: u64,
) -> Result<ChannelMask> {
    let channels = weight.shape.dims()[0];
    let count = selected_channel_count(channels, ratio.value())?;
    let mut selected: Vec<usize> = match policy {
        SelectPolicy::Magnitude | SelectPolicy::InverseMagnitude => {
            let f = dequantize(weight);
            let stride = weight.shape.channel_stride();
            let mut norms: Vec<(usize, f64)> = (0..channels)
                .map(|c| {
                    let chunk = &f.values[c * stride..(c + 1) * stride];
                    let n: f64 = chunk.iter().map(|&v| (v as f64) * (v as f64)).sum();
                    (c, n.sqrt())
                })
                .collect();
            match policy {
                SelectPolicy::Magnitude => norms.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
                }),
                _ => norms.sort_by(|a, b| {
                    a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0))
                }),
            }
            norms.into_iter().take(count).map(|(c, _)| c).collect()
        }
        SelectPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<usize> = (0..channels).collect();
            all.shuffle(&mut rng);
            all.into_iter().take(count).collect()
        }
    };
    selected.sort_unstable();
    let mask = ChannelMask {
        layer_index,
        selected_channels: selected,
    };
    mask.validate(channels)?;
    Ok(mask)
}

/// Set trainable flags and storage classes according to a scheme. Must run
/// after any slicing: a partial-ratio layer must already be split, and its
/// trainable slice is `parts[0]` by construction.
pub fn apply_scheme(graph: &mut Graph, scheme: &UpdateScheme) -> Result<()> {
    let layer_count = graph.layers.len();
    scheme.validate(layer_count)?;
    let layers = graph.layers.clone();
    for wu in &scheme.weight_updates {
        if wu.ratio != Ratio::Full && layers[wu.layer].parts.len() != 2 {
            return Err(Error::Scheme(format!(
                "partial ratio at layer {} requires a sliced layer",
                wu.layer
            )));
        }
    }
    for p in &mut graph.params {
        let trainable = match (p.kind, p.layer) {
            (ParamKind::ClassifierWeight | ParamKind::ClassifierBias, _) => {
                scheme.classifier_trainable
            }
            (ParamKind::Bias, Some(layer)) => layer + scheme.bias_depth_k >= layer_count,
            (ParamKind::Weight, Some(layer)) => match scheme.ratio_for(layer) {
                None => false,
                Some(Ratio::Full) => true,
                Some(_) => layers[layer].parts[0].weight == p.tensor,
            },
            _ => false,
        };
        p.trainable = trainable;
        // classifier parameters stay in SRAM either way (fp32 head)
        if p.layer.is_some() {
            let tensor = graph.tensors.get_mut(&p.tensor).unwrap();
            tensor.storage = if trainable {
                StorageClass::SramUpdatedWeight
            } else {
                StorageClass::FlashWeight
            };
        }
    }
    Ok(())
}

/// Remove nodes whose outputs are never consumed and are not results (loss,
/// updated parameters). Runs to fixpoint; orphaned tensors are dropped.
pub fn dead_code_elim(graph: &mut Graph) {
    let roots: BTreeSet<_> = graph.result_tensors().into_iter().collect();
    loop {
        let consumers = graph.consumers();
        let dead: Vec<usize> = graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                n.outputs.iter().all(|out| {
                    !roots.contains(out)
                        && consumers.get(out).map(|v| v.is_empty()).unwrap_or(true)
                })
            })
            .map(|(i, _)| i)
            .collect();
        if dead.is_empty() {
            break;
        }
        for i in dead.into_iter().rev() {
            let node = graph.nodes.remove(i);
            for out in node.outputs {
                graph.tensors.remove(&out);
            }
        }
    }
    // orphaned tensors: not referenced by any node, not inputs, not params
    let mut referenced: BTreeSet<_> = graph.inputs.iter().copied().collect();
    referenced.extend(graph.params.iter().map(|p| p.tensor));
    for node in &graph.nodes {
        referenced.extend(node.inputs.iter().copied());
        referenced.extend(node.outputs.iter().copied());
    }
    // layer bookkeeping must stay resolvable
    for layer in &graph.layers {
        referenced.insert(layer.input);
        referenced.insert(layer.output);
        for part in &layer.parts {
            referenced.insert(part.weight);
            referenced.insert(part.bias);
        }
    }
    graph.tensors.retain(|id, _| referenced.contains(id));
}

/// Prune the backward graph for a sparse-update scheme: apply the scheme's
/// trainable mask, drop GradDescent nodes of frozen parameters, and let
/// dead-code elimination remove the now-unused gradient chain and saved
/// activations. The surviving updates are bit-identical to running the full
/// backward graph and discarding frozen-parameter updates.
pub fn prune_backward(graph: &Graph, scheme: &UpdateScheme) -> Result<Graph> {
    let mut pruned = graph.clone();
    apply_scheme(&mut pruned, scheme)?;
    let frozen: BTreeSet<_> = pruned
        .params
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| p.tensor)
        .collect();
    pruned
        .nodes
        .retain(|n| n.op != OpKind::GradDescent || !frozen.contains(&n.inputs[0]));
    // outputs of removed GradDescent nodes are gone
    let produced: BTreeSet<_> = pruned
        .nodes
        .iter()
        .flat_map(|n| n.outputs.iter().copied())
        .collect();
    let keep_free: BTreeSet<_> = pruned.free_tensors();
    pruned
        .tensors
        .retain(|id, _| produced.contains(id) || keep_free.contains(id));
    dead_code_elim(&mut pruned);
    Ok(pruned)
}

/// Split one layer's weights into a trainable slice (the masked channels)
/// and a frozen slice. The forward output is restored bit-exactly by a
/// channel-scatter Concat of the two partial outputs; only the trainable
/// slice will receive a backward path.
pub fn slice_suboperator(bundle: &ModelBundle, mask: &ChannelMask) -> Result<ModelBundle> {
    let graph = &bundle.graph;
    let layer = graph
        .layers
        .get(mask.layer_index)
        .ok_or_else(|| Error::Scheme(format!("no layer {}", mask.layer_index)))?
        .clone();
    mask.validate(layer.out_channels)?;
    if layer.parts.len() != 1 {
        return Err(Error::Scheme("layer is already sliced".into()));
    }
    if layer.kind == crate::graph::LayerKind::Depthwise {
        return Err(Error::Scheme(
            "depthwise layers slice their input channels too; not supported".into(),
        ));
    }
    if mask.selected_channels.len() == layer.out_channels {
        return Ok(bundle.clone()); // full mask: nothing to split
    }

    let mut out = bundle.clone();
    let part = layer.parts[0].clone();
    let node_idx = out
        .graph
        .nodes
        .iter()
        .position(|n| n.id == part.node)
        .ok_or_else(|| Error::Graph("layer node missing".into()))?;
    let orig_node = out.graph.nodes[node_idx].clone();

    let selected = mask.selected_channels.clone();
    let complement: Vec<usize> = (0..layer.out_channels)
        .filter(|c| !selected.contains(c))
        .collect();

    // split parameter values by output channel
    let w_tensor = out
        .params
        .get(&part.weight)
        .cloned()
        .ok_or_else(|| Error::Graph("weight value missing".into()))?;
    let b_tensor = out
        .params
        .get(&part.bias)
        .cloned()
        .ok_or_else(|| Error::Graph("bias value missing".into()))?;
    let (w_sel, w_frz) = split_quant(&w_tensor, &selected, &complement)?;
    let (b_sel, b_frz) = split_quant(&b_tensor, &selected, &complement)?;

    let mut g = &mut out.graph;
    let w_sel_id = g.add_tensor(w_sel_shape(&w_sel), crate::graph::DType::I8, StorageClass::SramUpdatedWeight);
    let w_frz_id = g.add_tensor(w_sel_shape(&w_frz), crate::graph::DType::I8, StorageClass::FlashWeight);
    let b_sel_id = g.add_tensor(w_sel_shape(&b_sel), crate::graph::DType::I32, StorageClass::SramUpdatedWeight);
    let b_frz_id = g.add_tensor(w_sel_shape(&b_frz), crate::graph::DType::I32, StorageClass::SramUpdatedWeight);

    out.params.remove(&part.weight);
    out.params.remove(&part.bias);
    out.params.insert(w_sel_id, w_sel);
    out.params.insert(w_frz_id, w_frz);
    out.params.insert(b_sel_id, b_sel);
    out.params.insert(b_frz_id, b_frz);

    // two partial convolutions with the original output attrs
    let x = orig_node.inputs[0];
    let sel_out = g.add_tensor(
        partial_out_shape(g.tensor(orig_node.outputs[0]).shape.clone(), selected.len()),
        g.tensor(orig_node.outputs[0]).dtype,
        StorageClass::SramActivation,
    );
    let frz_out = g.add_tensor(
        partial_out_shape(g.tensor(orig_node.outputs[0]).shape.clone(), complement.len()),
        g.tensor(orig_node.outputs[0]).dtype,
        StorageClass::SramActivation,
    );
    let next_id = g.nodes.iter().map(|n| n.id.0 + 1).max().unwrap_or(0);
    let sel_node = Node {
        id: crate::graph::NodeId(next_id),
        op: orig_node.op,
        inputs: vec![x, w_sel_id, b_sel_id],
        outputs: vec![sel_out],
        attrs: orig_node.attrs.clone(),
    };
    let frz_node = Node {
        id: crate::graph::NodeId(next_id + 1),
        op: orig_node.op,
        inputs: vec![x, w_frz_id, b_frz_id],
        outputs: vec![frz_out],
        attrs: orig_node.attrs.clone(),
    };
    // scatter-concat restoring original channel order, producing the
    // original output tensor id so consumers stay untouched
    let concat_attrs = Attrs::new()
        .with_int("axis", 1)
        .with_ints("dest_0", selected.iter().map(|&c| c as i64).collect())
        .with_ints("dest_1", complement.iter().map(|&c| c as i64).collect());
    let concat_node = Node {
        id: crate::graph::NodeId(next_id + 2),
        op: OpKind::Concat,
        inputs: vec![sel_out, frz_out],
        outputs: vec![orig_node.outputs[0]],
        attrs: concat_attrs,
    };
    g.nodes
        .splice(node_idx..=node_idx, [sel_node.clone(), frz_node.clone(), concat_node]);
    g.bump_ids(next_id + 3);

    // parameter and layer bookkeeping
    let layer_idx = mask.layer_index;
    g.params.retain(|p| p.tensor != part.weight && p.tensor != part.bias);
    g.params.push(ParamInfo {
        tensor: w_sel_id,
        kind: ParamKind::Weight,
        layer: Some(layer_idx),
        trainable: true,
        channels: selected.clone(),
    });
    g.params.push(ParamInfo {
        tensor: w_frz_id,
        kind: ParamKind::Weight,
        layer: Some(layer_idx),
        trainable: false,
        channels: complement.clone(),
    });
    g.params.push(ParamInfo {
        tensor: b_sel_id,
        kind: ParamKind::Bias,
        layer: Some(layer_idx),
        trainable: true,
        channels: selected.clone(),
    });
    g.params.push(ParamInfo {
        tensor: b_frz_id,
        kind: ParamKind::Bias,
        layer: Some(layer_idx),
        trainable: true,
        channels: complement.clone(),
    });
    let linfo = &mut g.layers[layer_idx];
    linfo.parts = vec![
        LayerPart {
            node: sel_node.id,
            weight: w_sel_id,
            bias: b_sel_id,
            channels: selected,
        },
        LayerPart {
            node: frz_node.id,
            weight: w_frz_id,
            bias: b_frz_id,
            channels: complement,
        },
    ];
    let _ = &mut g;
    Ok(out)
}

fn w_sel_shape(t: &Tensor) -> Shape {
    match t {
        Tensor::Quant(q) => q.shape.clone(),
        Tensor::Float(f) => f.shape.clone(),
    }
}

fn partial_out_shape(mut shape: Shape, channels: usize) -> Shape {
    let mut dims = shape.dims().to_vec();
    dims[1] = channels;
    shape = Shape::new(&dims).unwrap();
    shape
}

/// Split a per-channel quantized tensor along dim 0.
fn split_quant(t: &Tensor, selected: &[usize], complement: &[usize]) -> Result<(Tensor, Tensor)> {
    let q = match t {
        Tensor::Quant(q) => q,
        Tensor::Float(_) => return Err(Error::Scheme("cannot slice a float parameter".into())),
    };
    let stride = q.shape.channel_stride();
    let pick = |channels: &[usize]| -> Result<Tensor> {
        let mut dims = q.shape.dims().to_vec();
        dims[0] = channels.len();
        let shape = Shape::new(&dims)?;
        let params = QuantParams::per_channel(
            channels.iter().map(|&c| q.params.scales[scale_idx(q, c)]).collect(),
        );
        let data = match &q.data {
            QuantData::I8(v) => {
                let mut out = Vec::with_capacity(channels.len() * stride);
                for &c in channels {
                    out.extend_from_slice(&v[c * stride..(c + 1) * stride]);
                }
                QuantData::I8(out)
            }
            QuantData::I32(v) => {
                let mut out = Vec::with_capacity(channels.len() * stride);
                for &c in channels {
                    out.extend_from_slice(&v[c * stride..(c + 1) * stride]);
                }
                QuantData::I32(out)
            }
        };
        Ok(Tensor::Quant(QuantizedTensor::new(shape, data, params)?))
    };
    Ok((pick(selected)?, pick(complement)?))
}

fn scale_idx(q: &QuantizedTensor, channel: usize) -> usize {
    if q.params.scales.len() == 1 {
        0
    } else {
        channel
    }
}
