//! Compile-time differentiation: extend a forward graph into a single static
//! graph containing forward nodes, backward nodes, and one GradDescent node
//! per trainable parameter.
//!
//! The derivative registry is a static match over op kinds; there is no
//! runtime tape. Gradient flows only into subgraphs that can reach a
//! trainable parameter, so the derived graph carries no dead backward nodes.
//!
//! Convention: rescale casts and activation clamps fused into quantized
//! (and float-twin) conv/linear operators are differentiated straight
//! through; the standalone float ReLU6 uses its true mask and therefore
//! consumes its saved input.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{Attrs, Graph, Node, OpKind, StorageClass, TensorId};

struct Deriver {
    graph: Graph,
    /// Pending gradient contributions per forward tensor.
    contributions: BTreeMap<TensorId, Vec<TensorId>>,
    needs_grad: BTreeSet<TensorId>,
}

impl Deriver {
    fn contribute(&mut self, tensor: TensorId, grad: TensorId) {
        self.contributions.entry(tensor).or_default().push(grad);
    }

    /// Combine pending contributions with gradient-mode Add nodes.
    fn total_grad(&mut self, tensor: TensorId) -> Result<Option<TensorId>> {
        let list = match self.contributions.get(&tensor) {
            Some(list) if !list.is_empty() => list.clone(),
            _ => return Ok(None),
        };
        let mut acc = list[0];
        for &next in &list[1..] {
            let (_, outs) = self.graph.add_node(
                OpKind::Add,
                vec![acc, next],
                Attrs::new(),
                StorageClass::SramGradient,
            )?;
            acc = outs[0];
        }
        self.contributions.insert(tensor, vec![acc]);
        Ok(Some(acc))
    }

    fn trainable(&self, tensor: TensorId) -> bool {
        self.graph
            .param(tensor)
            .map(|p| p.trainable)
            .unwrap_or(false)
    }

    fn emit(&mut self, op: OpKind, inputs: Vec<TensorId>, attrs: Attrs) -> Result<TensorId> {
        let (_, outs) = self
            .graph
            .add_node(op, inputs, attrs, StorageClass::SramGradient)?;
        Ok(outs[0])
    }

    fn emit_grad_descent(&mut self, param: TensorId, grad: TensorId) -> Result<()> {
        let info = self
            .graph
            .param(param)
            .ok_or_else(|| Error::Graph("GradDescent target is not a parameter".into()))?;
        let attrs = Attrs::new()
            .with_str(
                "param_kind",
                match info.kind {
                    crate::graph::ParamKind::Weight => "weight",
                    crate::graph::ParamKind::Bias => "bias",
                    crate::graph::ParamKind::ClassifierWeight => "classifier-weight",
                    crate::graph::ParamKind::ClassifierBias => "classifier-bias",
                },
            )
            .with_int("alias", param.0 as i64);
        let (_, _outs) = self.graph.add_node(
            OpKind::GradDescent,
            vec![param, grad],
            attrs,
            StorageClass::SramUpdatedWeight,
        )?;
        Ok(())
    }
}

/// Derive the static backward graph of `g`.
///
/// Requires a scalar loss and fails on op kinds without a registered
/// derivative along a path that needs gradient.
pub fn derive_backward(g: &Graph) -> Result<Graph> {
    let loss = g
        .loss
        .ok_or_else(|| Error::Graph("derive_backward requires a loss".into()))?;
    if g.tensor(loss).shape.dims() != [1] {
        return Err(Error::Graph("loss must be scalar".into()));
    }
    if g.nodes.iter().any(|n| {
        n.op.is_weight_grad()
            || n.op.is_input_grad()
            || matches!(
                n.op,
                OpKind::GradDescent
                    | OpKind::SoftmaxCrossEntropyGrad
                    | OpKind::GradQuantize
                    | OpKind::ReLU6Grad
                    | OpKind::AvgPoolGrad
            )
    }) {
        return Err(Error::Graph("graph already contains backward nodes".into()));
    }

    // tensors whose producing subgraph contains a trainable parameter
    let mut needs_grad: BTreeSet<TensorId> = g
        .params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.tensor)
        .collect();
    for node in &g.nodes {
        if node.inputs.iter().any(|t| needs_grad.contains(t)) {
            needs_grad.extend(node.outputs.iter().copied());
        }
    }

    let mut d = Deriver {
        graph: g.clone(),
        contributions: BTreeMap::new(),
        needs_grad,
    };

    let forward_nodes: Vec<Node> = g.nodes.clone();
    for node in forward_nodes.iter().rev() {
        derive_node(&mut d, node, loss)?;
    }

    Ok(d.graph)
}

fn derive_node(d: &mut Deriver, node: &Node, loss: TensorId) -> Result<()> {
    use OpKind::*;

    // the loss node seeds the chain with dLoss/dLoss = 1 folded in
    if node.op == SoftmaxCrossEntropy && node.outputs[0] == loss {
        let logits = node.inputs[0];
        if d.needs_grad.contains(&logits) {
            let g = d.emit(
                SoftmaxCrossEntropyGrad,
                vec![logits, node.inputs[1]],
                Attrs::new(),
            )?;
            d.contribute(logits, g);
        }
        return Ok(());
    }

    let out_grad = match node.outputs.first() {
        Some(&out) => match d.total_grad(out)? {
            Some(g) => g,
            None => return Ok(()), // dead branch: nothing consumed this output
        },
        None => return Ok(()),
    };

    match node.op {
        FloatLinear | QLinear => {
            let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
            let quant = node.op == QLinear;
            if d.trainable(w) {
                let op = if quant { QLinearGradWeight } else { FloatLinearGradWeight };
                let gw = d.emit(op, vec![out_grad, x], Attrs::new())?;
                d.emit_grad_descent(w, gw)?;
            }
            if d.trainable(b) {
                let gb = d.emit(Sum, vec![out_grad], Attrs::new().with_ints("axes", vec![0]))?;
                d.emit_grad_descent(b, gb)?;
            }
            if d.needs_grad.contains(&x) {
                let op = if quant { QLinearGradInput } else { FloatLinearGradInput };
                let gx = d.emit(op, vec![out_grad, w], Attrs::new())?;
                d.contribute(x, gx);
            }
        }
        FloatConv2d | QConv2d | FloatDepthwiseConv2d | QDepthwiseConv2d => {
            let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
            let depthwise = matches!(node.op, FloatDepthwiseConv2d | QDepthwiseConv2d);
            let quant = matches!(node.op, QConv2d | QDepthwiseConv2d);
            let stride = node.attrs.get_int("stride")?;
            let padding = node.attrs.get_int("padding")?;
            let wdims = d.graph.tensor(w).shape.dims().to_vec();
            let xdims = d.graph.tensor(x).shape.dims().to_vec();
            if d.trainable(w) {
                let op = match (quant, depthwise) {
                    (true, false) => QConv2dGradWeight,
                    (true, true) => QDepthwiseGradWeight,
                    (false, false) => FloatConv2dGradWeight,
                    (false, true) => FloatDepthwiseGradWeight,
                };
                let attrs = Attrs::new()
                    .with_int("stride", stride)
                    .with_int("padding", padding)
                    .with_int("kh", wdims[2] as i64)
                    .with_int("kw", wdims[3] as i64);
                let gw = d.emit(op, vec![out_grad, x], attrs)?;
                d.emit_grad_descent(w, gw)?;
            }
            if d.trainable(b) {
                let gb = d.emit(
                    Sum,
                    vec![out_grad],
                    Attrs::new().with_ints("axes", vec![0, 2, 3]),
                )?;
                d.emit_grad_descent(b, gb)?;
            }
            if d.needs_grad.contains(&x) {
                let op = match (quant, depthwise) {
                    (true, false) => QConv2dGradInput,
                    (true, true) => QDepthwiseGradInput,
                    (false, false) => FloatConv2dGradInput,
                    (false, true) => FloatDepthwiseGradInput,
                };
                let attrs = Attrs::new()
                    .with_int("stride", stride)
                    .with_int("padding", padding)
                    .with_int("in_h", xdims[2] as i64)
                    .with_int("in_w", xdims[3] as i64);
                let gx = d.emit(op, vec![out_grad, w], attrs)?;
                d.contribute(x, gx);
            }
        }
        Add => {
            for &inp in &node.inputs {
                if d.needs_grad.contains(&inp) {
                    d.contribute(inp, out_grad);
                }
            }
        }
        ReLU6 => {
            let x = node.inputs[0];
            if !d.needs_grad.contains(&x) {
                return Ok(());
            }
            match d.graph.tensor(x).dtype {
                crate::graph::DType::F32 => {
                    let mut attrs = Attrs::new();
                    if let Some(lo) = node.attrs.opt_float("act_lo") {
                        attrs = attrs.with_float("act_lo", lo);
                    }
                    if let Some(hi) = node.attrs.opt_float("act_hi") {
                        attrs = attrs.with_float("act_hi", hi);
                    }
                    let gx = d.emit(ReLU6Grad, vec![out_grad, x], attrs)?;
                    d.contribute(x, gx);
                }
                // quantized clamp: straight-through
                _ => d.contribute(x, out_grad),
            }
        }
        AvgPool => {
            let x = node.inputs[0];
            if d.needs_grad.contains(&x) {
                let xd = d.graph.tensor(x).shape.dims().to_vec();
                let attrs = Attrs::new()
                    .with_int("in_h", xd[2] as i64)
                    .with_int("in_w", xd[3] as i64);
                let gx = d.emit(AvgPoolGrad, vec![out_grad], attrs)?;
                d.contribute(x, gx);
            }
        }
        Flatten => {
            let x = node.inputs[0];
            if d.needs_grad.contains(&x) {
                let to: Vec<i64> = d
                    .graph
                    .tensor(x)
                    .shape
                    .dims()
                    .iter()
                    .map(|&v| v as i64)
                    .collect();
                let gx = d.emit(Flatten, vec![out_grad], Attrs::new().with_ints("to", to))?;
                d.contribute(x, gx);
            }
        }
        Transpose => {
            let x = node.inputs[0];
            if d.needs_grad.contains(&x) {
                let gx = d.emit(Transpose, vec![out_grad], Attrs::new())?;
                d.contribute(x, gx);
            }
        }
        Dequantize => {
            // identity in real units: the gradient crosses into the int8
            // gradient domain by dynamic requantization alone
            let x = node.inputs[0];
            if d.needs_grad.contains(&x) {
                let gx = d.emit(GradQuantize, vec![out_grad], Attrs::new())?;
                d.contribute(x, gx);
            }
        }
        Quantize => {
            // image input is never trainable; gradient stops here
        }
        Concat => {
            for (i, &inp) in node.inputs.iter().enumerate() {
                if d.needs_grad.contains(&inp) {
                    let dest = node.attrs.get_ints(&format!("dest_{i}"))?;
                    let axis = node.attrs.get_int("axis")?;
                    let gx = d.emit(
                        Slice,
                        vec![out_grad],
                        Attrs::new().with_int("axis", axis).with_ints("channels", dest),
                    )?;
                    d.contribute(inp, gx);
                }
            }
        }
        SoftmaxCrossEntropy => {
            return Err(Error::Graph(
                "only the loss-producing SoftmaxCrossEntropy can be differentiated".into(),
            ));
        }
        other => {
            return Err(Error::Graph(format!(
                "op kind {other:?} has no registered derivative"
            )));
        }
    }
    Ok(())
}
