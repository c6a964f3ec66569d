//! Static computation-graph IR: forward networks, compile-time derived
//! backward graphs, and embedded gradient-descent operator nodes.
//!
//! Graphs are built once, transformed by pure passes (pruning, slicing,
//! scheduling) and then executed by [`crate::exec`]. Completed graphs are
//! immutable and freely shareable across threads.

mod autodiff;
mod build;
pub mod ops;
mod serialize;

pub use autodiff::derive_backward;
pub use build::{
    build_backbone, quantize_bundle, BackboneConfig, BlockSpec, GraphMode, ModelBundle,
    ParamStore,
};
pub use ops::OpKind;
pub use serialize::{graph_from_json, graph_to_json};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I8,
    I32,
    F32,
}

impl DType {
    pub fn bytes_per_elem(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::I32 | DType::F32 => 4,
        }
    }
}

/// Where a tensor lives on the target: read-only flash for frozen weights,
/// SRAM classes for everything materialized at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorageClass {
    FlashWeight,
    SramActivation,
    SramGradient,
    SramUpdatedWeight,
}

/// Shape and dtype pair used by shape rules.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub shape: Shape,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub id: TensorId,
    pub shape: Shape,
    pub dtype: DType,
    pub storage: StorageClass,
}

impl TensorInfo {
    pub fn bytes(&self) -> usize {
        self.shape.elem_count() * self.dtype.bytes_per_elem()
    }

    pub fn spec(&self) -> TensorSpec {
        TensorSpec {
            shape: self.shape.clone(),
            dtype: self.dtype,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f32),
    IntList(Vec<i64>),
    FloatList(Vec<f32>),
    Str(String),
}

/// Attribute map attached to a node (stride, padding, slice ranges,
/// learning-rate handles, ...). Ordered so serialization is stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Attrs(pub BTreeMap<String, AttrValue>);

impl Attrs {
    pub fn new() -> Self {
        Attrs(BTreeMap::new())
    }

    pub fn with_int(mut self, key: &str, v: i64) -> Self {
        self.0.insert(key.into(), AttrValue::Int(v));
        self
    }

    pub fn with_float(mut self, key: &str, v: f32) -> Self {
        self.0.insert(key.into(), AttrValue::Float(v));
        self
    }

    pub fn with_ints(mut self, key: &str, v: Vec<i64>) -> Self {
        self.0.insert(key.into(), AttrValue::IntList(v));
        self
    }

    pub fn with_str(mut self, key: &str, v: &str) -> Self {
        self.0.insert(key.into(), AttrValue::Str(v.into()));
        self
    }

    pub fn get_int(&self, key: &str) -> Result<i64> {
        match self.0.get(key) {
            Some(AttrValue::Int(v)) => Ok(*v),
            _ => Err(Error::Graph(format!("missing int attr {key:?}"))),
        }
    }

    pub fn get_float(&self, key: &str) -> Result<f32> {
        match self.0.get(key) {
            // JSON round-trips may decode a whole float as an integer
            Some(AttrValue::Float(v)) => Ok(*v),
            Some(AttrValue::Int(v)) => Ok(*v as f32),
            _ => Err(Error::Graph(format!("missing float attr {key:?}"))),
        }
    }

    pub fn get_ints(&self, key: &str) -> Result<Vec<i64>> {
        match self.0.get(key) {
            Some(AttrValue::IntList(v)) => Ok(v.clone()),
            _ => Err(Error::Graph(format!("missing int-list attr {key:?}"))),
        }
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        match self.0.get(key) {
            Some(AttrValue::Str(v)) => Ok(v),
            _ => Err(Error::Graph(format!("missing string attr {key:?}"))),
        }
    }

    pub fn opt_float(&self, key: &str) -> Option<f32> {
        self.get_float(key).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub op: OpKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub attrs: Attrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    ClassifierWeight,
    ClassifierBias,
}

/// One parameter tensor (possibly a channel slice of a logical layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub tensor: TensorId,
    pub kind: ParamKind,
    /// Parameter-layer index in forward order; None for the classifier.
    pub layer: Option<usize>,
    pub trainable: bool,
    /// Original output channels covered by this tensor (ascending).
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Linear,
}

/// One forward operator owning this part of the layer's output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPart {
    pub node: NodeId,
    pub weight: TensorId,
    pub bias: TensorId,
    /// Original channel indices produced by this part (ascending).
    pub channels: Vec<usize>,
}

/// A parameterized layer of the backbone (conv / depthwise / linear). The
/// classifier head is tracked separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: usize,
    pub kind: LayerKind,
    /// Input activation of the layer (the tensor saved for weight gradients).
    pub input: TensorId,
    /// Layer output (after any fused activation and channel concat).
    pub output: TensorId,
    pub out_channels: usize,
    pub parts: Vec<LayerPart>,
}

/// A structural violation found by [`Graph::validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// Topologically ordered.
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<TensorId, TensorInfo>,
    /// Graph inputs (image, and labels when a loss is present).
    pub inputs: Vec<TensorId>,
    pub loss: Option<TensorId>,
    pub params: Vec<ParamInfo>,
    pub layers: Vec<LayerInfo>,
    next_tensor: u32,
    next_node: u32,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            tensors: BTreeMap::new(),
            inputs: Vec::new(),
            loss: None,
            params: Vec::new(),
            layers: Vec::new(),
            next_tensor: 0,
            next_node: 0,
        }
    }

    pub fn add_tensor(&mut self, shape: Shape, dtype: DType, storage: StorageClass) -> TensorId {
        let id = TensorId(self.next_tensor);
        self.next_tensor += 1;
        self.tensors.insert(
            id,
            TensorInfo {
                id,
                shape,
                dtype,
                storage,
            },
        );
        id
    }

    pub fn tensor(&self, id: TensorId) -> &TensorInfo {
        &self.tensors[&id]
    }

    /// Append a node, inferring and registering its outputs.
    pub fn add_node(
        &mut self,
        op: OpKind,
        inputs: Vec<TensorId>,
        attrs: Attrs,
        out_storage: StorageClass,
    ) -> Result<(NodeId, Vec<TensorId>)> {
        let specs: Vec<TensorSpec> = inputs.iter().map(|t| self.tensor(*t).spec()).collect();
        let out_specs = ops::output_specs(op, &specs, &attrs)?;
        let outputs: Vec<TensorId> = out_specs
            .into_iter()
            .map(|s| self.add_tensor(s.shape, s.dtype, out_storage))
            .collect();
        let id = NodeId(self.next_node);
        self.next_node += 1;
        self.nodes.push(Node {
            id,
            op,
            inputs,
            outputs: outputs.clone(),
            attrs,
        });
        Ok((id, outputs))
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::Graph(format!("no node {id:?}")))
    }

    /// Producing node of each tensor. Parameters and graph inputs have none.
    pub fn producers(&self) -> BTreeMap<TensorId, NodeId> {
        let mut map = BTreeMap::new();
        for node in &self.nodes {
            for &out in &node.outputs {
                map.insert(out, node.id);
            }
        }
        map
    }

    /// Consumers of each tensor, in node order.
    pub fn consumers(&self) -> BTreeMap<TensorId, Vec<NodeId>> {
        let mut map: BTreeMap<TensorId, Vec<NodeId>> = BTreeMap::new();
        for node in &self.nodes {
            for &inp in &node.inputs {
                map.entry(inp).or_default().push(node.id);
            }
        }
        map
    }

    pub fn param(&self, tensor: TensorId) -> Option<&ParamInfo> {
        self.params.iter().find(|p| p.tensor == tensor)
    }

    /// Tensors that must stay alive at the end of a step: the loss and every
    /// updated-parameter output.
    pub fn result_tensors(&self) -> Vec<TensorId> {
        let mut keep: Vec<TensorId> = self.loss.into_iter().collect();
        for node in &self.nodes {
            if node.op == OpKind::GradDescent {
                keep.extend(node.outputs.iter().copied());
            }
        }
        keep
    }

    /// Tensors that are not produced by any node: inputs and parameters.
    pub fn free_tensors(&self) -> BTreeSet<TensorId> {
        let produced: BTreeSet<TensorId> = self
            .nodes
            .iter()
            .flat_map(|n| n.outputs.iter().copied())
            .collect();
        self.tensors
            .keys()
            .copied()
            .filter(|t| !produced.contains(t))
            .collect()
    }

    /// Check acyclicity, topological order, single-producer rule, and
    /// shape/dtype consistency. Violations are data, not errors.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();

        // single producer + all referenced tensors registered
        let mut producer: BTreeMap<TensorId, NodeId> = BTreeMap::new();
        for node in &self.nodes {
            for &t in node.inputs.iter().chain(&node.outputs) {
                if !self.tensors.contains_key(&t) {
                    violations.push(Violation {
                        node: Some(node.id),
                        message: format!("references unregistered tensor {t:?}"),
                    });
                }
            }
            for &out in &node.outputs {
                if let Some(prev) = producer.insert(out, node.id) {
                    violations.push(Violation {
                        node: Some(node.id),
                        message: format!(
                            "tensor {out:?} produced by both {prev:?} and {:?}",
                            node.id
                        ),
                    });
                }
            }
        }

        // flash weights are never written
        for node in &self.nodes {
            for &out in &node.outputs {
                if let Some(info) = self.tensors.get(&out) {
                    if info.storage == StorageClass::FlashWeight {
                        violations.push(Violation {
                            node: Some(node.id),
                            message: format!("flash-weight tensor {out:?} is written"),
                        });
                    }
                }
            }
        }

        // acyclicity via Kahn's algorithm on node dependencies
        let consumers = self.consumers();
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut edges: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for node in &self.nodes {
            indegree.entry(node.id).or_insert(0);
        }
        for node in &self.nodes {
            for &out in &node.outputs {
                for &c in consumers.get(&out).map(|v| v.as_slice()).unwrap_or(&[]) {
                    edges.entry(node.id).or_default().push(c);
                    *indegree.entry(c).or_insert(0) += 1;
                }
            }
        }
        let mut queue: Vec<NodeId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&n, _)| n)
            .collect();
        let mut visited = 0usize;
        while let Some(n) = queue.pop() {
            visited += 1;
            for &c in edges.get(&n).map(|v| v.as_slice()).unwrap_or(&[]) {
                let d = indegree.get_mut(&c).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push(c);
                }
            }
        }
        if visited != self.nodes.len() {
            let stuck: Vec<NodeId> = indegree
                .iter()
                .filter(|(_, &d)| d > 0)
                .map(|(&n, _)| n)
                .collect();
            violations.push(Violation {
                node: None,
                message: format!("graph contains a cycle through {stuck:?}"),
            });
        }

        // declared node order must be topological
        let mut defined: BTreeSet<TensorId> = self.free_tensors();
        for node in &self.nodes {
            for &inp in &node.inputs {
                if !defined.contains(&inp) && producer.contains_key(&inp) {
                    violations.push(Violation {
                        node: Some(node.id),
                        message: format!("input {inp:?} used before its producer runs"),
                    });
                }
            }
            for &out in &node.outputs {
                defined.insert(out);
            }
        }

        // shape/dtype consistency against the rule table
        for node in &self.nodes {
            let specs: Vec<TensorSpec> = node
                .inputs
                .iter()
                .filter_map(|t| self.tensors.get(t).map(|i| i.spec()))
                .collect();
            if specs.len() != node.inputs.len() {
                continue; // already reported as unregistered
            }
            match ops::output_specs(node.op, &specs, &node.attrs) {
                Err(e) => violations.push(Violation {
                    node: Some(node.id),
                    message: format!(
                        "shape rule failed for {:?} (inputs {:?}): {e}",
                        node.op, node.inputs
                    ),
                }),
                Ok(out_specs) => {
                    if out_specs.len() != node.outputs.len() {
                        violations.push(Violation {
                            node: Some(node.id),
                            message: "output arity mismatch".into(),
                        });
                        continue;
                    }
                    for (spec, &out) in out_specs.iter().zip(&node.outputs) {
                        if let Some(info) = self.tensors.get(&out) {
                            if info.shape != spec.shape || info.dtype != spec.dtype {
                                violations.push(Violation {
                                    node: Some(node.id),
                                    message: format!(
                                        "output {out:?} declared {} {:?} but rule gives {} {:?}",
                                        info.shape, info.dtype, spec.shape, spec.dtype
                                    ),
                                });
                            }
                        }
                    }
                }
            }
        }

        violations
    }

    /// Raise the id counters after passes that construct nodes manually.
    pub fn bump_ids(&mut self, next_node: u32) {
        self.next_node = self.next_node.max(next_node);
        self.next_tensor = self
            .next_tensor
            .max(self.tensors.keys().map(|t| t.0 + 1).max().unwrap_or(0));
    }

    /// Number of GradDescent nodes (one per trainable parameter tensor).
    pub fn grad_descent_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op == OpKind::GradDescent).count()
    }

    /// Input activations of parameterized layers that the backward graph
    /// references ("saved activations").
    pub fn saved_activations(&self) -> Vec<TensorId> {
        let layer_inputs: BTreeSet<TensorId> = self.layers.iter().map(|l| l.input).collect();
        let mut saved = BTreeSet::new();
        for node in &self.nodes {
            if node.op.is_weight_grad() {
                for &inp in &node.inputs {
                    if layer_inputs.contains(&inp) {
                        saved.insert(inp);
                    }
                }
            }
        }
        saved.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::Shape;

    fn toy_graph() -> Graph {
        let mut g = Graph::new();
        let x = g.add_tensor(
            Shape::new(&[1, 4]).unwrap(),
            DType::F32,
            StorageClass::SramActivation,
        );
        g.inputs.push(x);
        let w = g.add_tensor(
            Shape::new(&[3, 4]).unwrap(),
            DType::F32,
            StorageClass::SramUpdatedWeight,
        );
        let b = g.add_tensor(
            Shape::new(&[3]).unwrap(),
            DType::F32,
            StorageClass::SramUpdatedWeight,
        );
        g.add_node(
            OpKind::FloatLinear,
            vec![x, w, b],
            Attrs::new(),
            StorageClass::SramActivation,
        )
        .unwrap();
        g
    }

    #[test]
    fn valid_toy_graph_has_empty_report() {
        let g = toy_graph();
        assert!(g.validate().is_empty());
    }

    #[test]
    fn cycle_injection_yields_one_acyclicity_violation() {
        let mut g = toy_graph();
        // make the linear node consume its own output
        let out = g.nodes[0].outputs[0];
        let x = g.inputs[0];
        g.nodes[0].inputs[0] = out;
        let _ = x;
        let report = g.validate();
        let cycles: Vec<_> = report
            .iter()
            .filter(|v| v.message.contains("cycle"))
            .collect();
        assert_eq!(cycles.len(), 1, "{report:?}");
    }

    #[test]
    fn shape_mismatched_add_names_both_tensors() {
        let mut g = Graph::new();
        let a = g.add_tensor(
            Shape::new(&[1, 4]).unwrap(),
            DType::F32,
            StorageClass::SramActivation,
        );
        let b = g.add_tensor(
            Shape::new(&[1, 5]).unwrap(),
            DType::F32,
            StorageClass::SramActivation,
        );
        g.inputs.extend([a, b]);
        // bypass eager inference to inject an invalid node
        let out = g.add_tensor(
            Shape::new(&[1, 4]).unwrap(),
            DType::F32,
            StorageClass::SramActivation,
        );
        g.nodes.push(Node {
            id: NodeId(0),
            op: OpKind::Add,
            inputs: vec![a, b],
            outputs: vec![out],
            attrs: Attrs::new(),
        });
        let report = g.validate();
        assert_eq!(report.len(), 1);
        assert!(report[0].message.contains("[1, 4]"), "{report:?}");
        assert!(report[0].message.contains("[1, 5]"), "{report:?}");
    }

    #[test]
    fn writing_flash_weight_is_reported() {
        let mut g = toy_graph();
        let out = g.nodes[0].outputs[0];
        g.tensors.get_mut(&out).unwrap().storage = StorageClass::FlashWeight;
        let report = g.validate();
        assert!(report.iter().any(|v| v.message.contains("flash-weight")));
    }
}
