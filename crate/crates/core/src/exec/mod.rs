//! Graph interpreter for forward and forward+backward execution.
//!
//! Activation gradients flow as int8 tensors with a dynamic per-tensor scale
//! (zero point 0); parameter gradients are held as int32 plus a float scale
//! and feed GradDescent nodes. All integer matmuls accumulate in int32; the
//! per-op requantization points are the documented kernel formulation.
//!
//! Execution is SSA: a node never overwrites an existing value, so any
//! schedule that respects data dependencies produces bit-identical results.
//! In-place annotations only affect the memory simulation.

mod fkernels;
mod qgrad;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeId, OpKind, ParamStore, TensorId};
use crate::qtensor::{
    cast2int8, dequantize, FloatTensor, IntRange, QuantData, QuantParams, QuantizedTensor, Shape,
    Tensor,
};
use crate::train::update::{self, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Execute forward operators only.
    Forward,
    /// Execute the full graph; GradDescent nodes record their gradients but
    /// leave parameters untouched (used by the training loop, which applies
    /// accumulated updates itself).
    CollectGrads,
    /// Execute the full graph including in-graph SGD updates, the deployment
    /// semantic of the GradDescent operator.
    Inline,
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub mode: RunMode,
    /// Learning rate consumed by inline GradDescent nodes.
    pub lr: f64,
    /// Apply quantization-aware scaling inside inline GradDescent nodes.
    pub qas: bool,
    /// Execution order; defaults to graph node order.
    pub schedule: Option<Vec<NodeId>>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            mode: RunMode::Forward,
            lr: 0.0,
            qas: true,
            schedule: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExecResult {
    /// Every tensor value produced during the step.
    pub values: BTreeMap<TensorId, Tensor>,
    /// Raw (pre-scaling) gradients keyed by parameter tensor id.
    pub grads: BTreeMap<TensorId, Tensor>,
    /// Updated parameter values keyed by parameter tensor id (inline mode).
    pub updated: BTreeMap<TensorId, Tensor>,
    pub loss: Option<f64>,
    /// Inline updates whose integer delta rounded to zero on a nonzero
    /// gradient element.
    pub zero_delta_updates: u64,
}

/// Backward nodes are identified by what they produce: gradient-class
/// tensors or parameter updates. Polymorphic kinds (Add, Sum, Slice, ...)
/// appear on both sides of the graph.
fn is_backward(graph: &Graph, node: &Node) -> bool {
    node.op == OpKind::GradDescent
        || node
            .outputs
            .iter()
            .any(|t| graph.tensor(*t).storage == crate::graph::StorageClass::SramGradient)
}

struct Ctx<'a> {
    params: &'a ParamStore,
    values: BTreeMap<TensorId, Tensor>,
    grads: BTreeMap<TensorId, Tensor>,
    updated: BTreeMap<TensorId, Tensor>,
    zero_delta: u64,
    opts: &'a ExecOptions,
}

impl<'a> Ctx<'a> {
    fn value(&self, id: TensorId) -> Result<&Tensor> {
        self.values
            .get(&id)
            .or_else(|| self.params.get(&id))
            .ok_or_else(|| Error::Graph(format!("tensor {id:?} has no value")))
    }

    fn quant(&self, id: TensorId) -> Result<&QuantizedTensor> {
        match self.value(id)? {
            Tensor::Quant(q) => Ok(q),
            Tensor::Float(_) => Err(Error::Graph(format!("tensor {id:?} expected quantized"))),
        }
    }

    fn float(&self, id: TensorId) -> Result<&FloatTensor> {
        match self.value(id)? {
            Tensor::Float(f) => Ok(f),
            Tensor::Quant(_) => Err(Error::Graph(format!("tensor {id:?} expected float"))),
        }
    }
}

/// Run the graph. Parameters are read from `params`; updated values are
/// returned in [`ExecResult::updated`] and committed by the caller.
pub fn run(
    graph: &Graph,
    params: &ParamStore,
    feeds: &BTreeMap<TensorId, Tensor>,
    opts: &ExecOptions,
) -> Result<ExecResult> {
    let order: Vec<NodeId> = match &opts.schedule {
        Some(order) => order.clone(),
        None => graph.nodes.iter().map(|n| n.id).collect(),
    };
    if order.len() != graph.nodes.len() {
        return Err(Error::Graph(format!(
            "schedule covers {} of {} nodes",
            order.len(),
            graph.nodes.len()
        )));
    }
    let by_id: BTreeMap<NodeId, &Node> = graph.nodes.iter().map(|n| (n.id, n)).collect();

    let mut ctx = Ctx {
        params,
        values: feeds.clone(),
        grads: BTreeMap::new(),
        updated: BTreeMap::new(),
        zero_delta: 0,
        opts,
    };

    for nid in &order {
        let node = by_id
            .get(nid)
            .ok_or_else(|| Error::Graph(format!("schedule names unknown node {nid:?}")))?;
        if opts.mode == RunMode::Forward && is_backward(graph, node) {
            continue;
        }
        exec_node(&mut ctx, node)?;
    }

    let loss = match graph.loss {
        Some(id) => match ctx.values.get(&id) {
            Some(Tensor::Float(f)) => Some(f.values[0] as f64),
            _ => None,
        },
        None => None,
    };
    Ok(ExecResult {
        values: ctx.values,
        grads: ctx.grads,
        updated: ctx.updated,
        loss,
        zero_delta_updates: ctx.zero_delta,
    })
}

/// Forward-only convenience wrapper returning all computed values.
pub fn run_forward(
    graph: &Graph,
    params: &ParamStore,
    feeds: &BTreeMap<TensorId, Tensor>,
) -> Result<BTreeMap<TensorId, Tensor>> {
    Ok(run(graph, params, feeds, &ExecOptions::default())?.values)
}

fn store(ctx: &mut Ctx, id: TensorId, value: Tensor) -> Result<()> {
    if ctx.values.insert(id, value).is_some() {
        return Err(Error::Graph(format!("tensor {id:?} written twice")));
    }
    Ok(())
}

fn exec_node(ctx: &mut Ctx, node: &Node) -> Result<()> {
    use OpKind::*;
    match node.op {
        QLinear => {
            let x = ctx.quant(node.inputs[0])?;
            let w = ctx.quant(node.inputs[1])?;
            let b = ctx.quant(node.inputs[2])?;
            let out = crate::qtensor::qlinear_forward(x, w, b, &out_params(node)?, act_of(node))?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        QConv2d => {
            let x = ctx.quant(node.inputs[0])?;
            let w = ctx.quant(node.inputs[1])?;
            let b = ctx.quant(node.inputs[2])?;
            let out = crate::qtensor::qconv2d_forward(
                x,
                w,
                b,
                geom(node)?,
                &out_params(node)?,
                act_of(node),
            )?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        QDepthwiseConv2d => {
            let x = ctx.quant(node.inputs[0])?;
            let w = ctx.quant(node.inputs[1])?;
            let b = ctx.quant(node.inputs[2])?;
            let out = crate::qtensor::qdepthwise_forward(
                x,
                w,
                b,
                geom(node)?,
                &out_params(node)?,
                act_of(node),
            )?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        Quantize => {
            let x = ctx.float(node.inputs[0])?;
            let scale = node.attrs.get_float("out_scale")?;
            let zp = node.attrs.get_int("out_zp")? as i32;
            let data: Vec<i8> = x
                .values
                .iter()
                .map(|&v| cast2int8(v as f64 / scale as f64 + zp as f64, IntRange::Full))
                .collect();
            let q = QuantizedTensor::new(
                x.shape.clone(),
                QuantData::I8(data),
                QuantParams::per_tensor(scale, zp),
            )?;
            store(ctx, node.outputs[0], Tensor::Quant(q))
        }
        Dequantize => {
            let x = ctx.quant(node.inputs[0])?;
            store(ctx, node.outputs[0], Tensor::Float(dequantize(x)))
        }
        Add => exec_add(ctx, node),
        ReLU6 => exec_relu6(ctx, node),
        AvgPool => exec_avgpool(ctx, node),
        Flatten => {
            let to: Vec<usize> = node
                .attrs
                .get_ints("to")?
                .iter()
                .map(|&v| v as usize)
                .collect();
            let shape = Shape::new(&to)?;
            let out = match ctx.value(node.inputs[0])? {
                Tensor::Float(f) => Tensor::Float(FloatTensor::new(shape, f.values.clone())?),
                Tensor::Quant(q) => Tensor::Quant(QuantizedTensor::new(
                    shape,
                    q.data.clone(),
                    q.params.clone(),
                )?),
            };
            store(ctx, node.outputs[0], out)
        }
        Slice => exec_slice(ctx, node),
        Concat => exec_concat(ctx, node),
        Transpose => {
            let x = ctx.float(node.inputs[0])?;
            let d = x.shape.dims();
            let (r, c) = (d[0], d[1]);
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.values[i * c + j];
                }
            }
            store(
                ctx,
                node.outputs[0],
                Tensor::Float(FloatTensor::new(Shape::new(&[c, r])?, out)?),
            )
        }
        Sum => exec_sum(ctx, node),
        FloatLinear => {
            let x = ctx.float(node.inputs[0])?;
            let w = ctx.float(node.inputs[1])?;
            let b = ctx.float(node.inputs[2])?;
            let out = fkernels::linear_forward(x, w, b, act_bounds(node));
            store(ctx, node.outputs[0], Tensor::Float(out))
        }
        FloatConv2d => {
            let x = ctx.float(node.inputs[0])?;
            let w = ctx.float(node.inputs[1])?;
            let b = ctx.float(node.inputs[2])?;
            let out = fkernels::conv2d_forward(x, w, b, geom(node)?, act_bounds(node), false)?;
            store(ctx, node.outputs[0], Tensor::Float(out))
        }
        FloatDepthwiseConv2d => {
            let x = ctx.float(node.inputs[0])?;
            let w = ctx.float(node.inputs[1])?;
            let b = ctx.float(node.inputs[2])?;
            let out = fkernels::conv2d_forward(x, w, b, geom(node)?, act_bounds(node), true)?;
            store(ctx, node.outputs[0], Tensor::Float(out))
        }
        SoftmaxCrossEntropy => {
            let logits = ctx.float(node.inputs[0])?;
            let labels = ctx.quant(node.inputs[1])?;
            let loss = fkernels::softmax_cross_entropy(logits, labels.i32_values()?)?;
            store(
                ctx,
                node.outputs[0],
                Tensor::Float(FloatTensor::new(Shape::new(&[1])?, vec![loss as f32])?),
            )
        }
        SoftmaxCrossEntropyGrad => {
            let logits = ctx.float(node.inputs[0])?;
            let labels = ctx.quant(node.inputs[1])?;
            let g = fkernels::softmax_cross_entropy_grad(logits, labels.i32_values()?)?;
            store(ctx, node.outputs[0], Tensor::Float(g))
        }
        ReLU6Grad => {
            let g = ctx.value(node.inputs[0])?.clone();
            let x = ctx.value(node.inputs[1])?;
            let out = exec_relu6_grad(node, &g, x)?;
            store(ctx, node.outputs[0], out)
        }
        AvgPoolGrad => exec_avgpool_grad(ctx, node),
        GradQuantize => {
            let g = ctx.float(node.inputs[0])?;
            let out = qgrad::quantize_gradient(&g.values, &g.shape)?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        QLinearGradInput => {
            let g = ctx.quant(node.inputs[0])?;
            let w = ctx.quant(node.inputs[1])?;
            let out = qgrad::linear_grad_input(g, w)?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        QLinearGradWeight => {
            let g = ctx.quant(node.inputs[0])?;
            let x = ctx.quant(node.inputs[1])?;
            let out = qgrad::linear_grad_weight(g, x)?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        QConv2dGradInput | QDepthwiseGradInput => {
            let g = ctx.quant(node.inputs[0])?;
            let w = ctx.quant(node.inputs[1])?;
            let in_h = node.attrs.get_int("in_h")? as usize;
            let in_w = node.attrs.get_int("in_w")? as usize;
            let depthwise = node.op == QDepthwiseGradInput;
            let out = qgrad::conv_grad_input(g, w, geom(node)?, (in_h, in_w), depthwise)?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        QConv2dGradWeight | QDepthwiseGradWeight => {
            let g = ctx.quant(node.inputs[0])?;
            let x = ctx.quant(node.inputs[1])?;
            let kh = node.attrs.get_int("kh")? as usize;
            let kw = node.attrs.get_int("kw")? as usize;
            let depthwise = node.op == QDepthwiseGradWeight;
            let out = qgrad::conv_grad_weight(g, x, geom(node)?, (kh, kw), depthwise)?;
            store(ctx, node.outputs[0], Tensor::Quant(out))
        }
        FloatLinearGradInput => {
            let g = ctx.float(node.inputs[0])?;
            let w = ctx.float(node.inputs[1])?;
            let out = fkernels::linear_grad_input(g, w)?;
            store(ctx, node.outputs[0], Tensor::Float(out))
        }
        FloatLinearGradWeight => {
            let g = ctx.float(node.inputs[0])?;
            let x = ctx.float(node.inputs[1])?;
            let out = fkernels::linear_grad_weight(g, x)?;
            store(ctx, node.outputs[0], Tensor::Float(out))
        }
        FloatConv2dGradInput | FloatDepthwiseGradInput => {
            let g = ctx.float(node.inputs[0])?;
            let w = ctx.float(node.inputs[1])?;
            let in_h = node.attrs.get_int("in_h")? as usize;
            let in_w = node.attrs.get_int("in_w")? as usize;
            let depthwise = node.op == FloatDepthwiseGradInput;
            let out = fkernels::conv_grad_input(g, w, geom(node)?, (in_h, in_w), depthwise)?;
            store(ctx, node.outputs[0], Tensor::Float(out))
        }
        FloatConv2dGradWeight | FloatDepthwiseGradWeight => {
            let g = ctx.float(node.inputs[0])?;
            let x = ctx.float(node.inputs[1])?;
            let kh = node.attrs.get_int("kh")? as usize;
            let kw = node.attrs.get_int("kw")? as usize;
            let depthwise = node.op == FloatDepthwiseGradWeight;
            let out = fkernels::conv_grad_weight(g, x, geom(node)?, (kh, kw), depthwise)?;
            store(ctx, node.outputs[0], Tensor::Float(out))
        }
        GradDescent => exec_grad_descent(ctx, node),
    }
}

fn geom(node: &Node) -> Result<crate::qtensor::Conv2dGeometry> {
    Ok(crate::qtensor::Conv2dGeometry {
        stride: node.attrs.get_int("stride")? as usize,
        padding: node.attrs.get_int("padding")? as usize,
    })
}

fn out_params(node: &Node) -> Result<QuantParams> {
    Ok(QuantParams::per_tensor(
        node.attrs.get_float("out_scale")?,
        node.attrs.get_int("out_zp")? as i32,
    ))
}

fn act_bounds(node: &Node) -> Option<(f32, f32)> {
    match (node.attrs.opt_float("act_lo"), node.attrs.opt_float("act_hi")) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        _ => None,
    }
}

fn act_of(node: &Node) -> Option<crate::qtensor::ActClamp> {
    act_bounds(node).map(|(lo, hi)| crate::qtensor::ActClamp { lo, hi })
}

fn exec_add(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let a = ctx.value(node.inputs[0])?.clone();
    let b = ctx.value(node.inputs[1])?.clone();
    let out = match (&a, &b) {
        (Tensor::Float(fa), Tensor::Float(fb)) => {
            let values = fa.values.iter().zip(&fb.values).map(|(x, y)| x + y).collect();
            Tensor::Float(FloatTensor::new(fa.shape.clone(), values)?)
        }
        (Tensor::Quant(qa), Tensor::Quant(qb)) => {
            if let Ok(scale) = node.attrs.get_float("out_scale") {
                // activation add: rescale both operands into the output grid
                let zp = node.attrs.get_int("out_zp")? as i32;
                let n = qa.data.len();
                let mut data = vec![0i8; n];
                for i in 0..n {
                    let real = qa.real(i) as f64 + qb.real(i) as f64;
                    data[i] = cast2int8(real / scale as f64 + zp as f64, IntRange::Full);
                }
                Tensor::Quant(QuantizedTensor::new(
                    qa.shape.clone(),
                    QuantData::I8(data),
                    QuantParams::per_tensor(scale, zp),
                )?)
            } else {
                // gradient fan-in: combine in real units and requantize
                let n = qa.data.len();
                let reals: Vec<f64> = (0..n).map(|i| qa.real(i) as f64 + qb.real(i) as f64).collect();
                Tensor::Quant(qgrad::requantize_real(&reals, &qa.shape)?)
            }
        }
        _ => return Err(Error::Graph("Add operands must share a dtype".into())),
    };
    store(ctx, node.outputs[0], out)
}

fn exec_relu6(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let lo = node.attrs.opt_float("act_lo").unwrap_or(0.0);
    let hi = node.attrs.opt_float("act_hi").unwrap_or(6.0);
    let out = match ctx.value(node.inputs[0])? {
        Tensor::Float(f) => {
            let values = f.values.iter().map(|&v| v.clamp(lo, hi)).collect();
            Tensor::Float(FloatTensor::new(f.shape.clone(), values)?)
        }
        Tensor::Quant(q) => {
            let scale = q.params.scales[0];
            let zp = q.params.zero_points[0];
            let clamp = crate::qtensor::ActClamp { lo, hi };
            let (qlo, qhi) = clamp_bounds(&clamp, scale, zp);
            let data: Vec<i8> = q
                .i8_values()?
                .iter()
                .map(|&v| (v as i32).clamp(qlo, qhi) as i8)
                .collect();
            Tensor::Quant(QuantizedTensor::new(
                q.shape.clone(),
                QuantData::I8(data),
                q.params.clone(),
            )?)
        }
    };
    store(ctx, node.outputs[0], out)
}

fn clamp_bounds(clamp: &crate::qtensor::ActClamp, scale: f32, zp: i32) -> (i32, i32) {
    let lo = zp + (clamp.lo as f64 / scale as f64).round_ties_even() as i32;
    let hi = zp + (clamp.hi as f64 / scale as f64).round_ties_even() as i32;
    (lo.max(-128), hi.min(127))
}

fn exec_relu6_grad(node: &Node, g: &Tensor, x: &Tensor) -> Result<Tensor> {
    let lo = node.attrs.opt_float("act_lo").unwrap_or(0.0);
    let hi = node.attrs.opt_float("act_hi").unwrap_or(6.0);
    match (g, x) {
        (Tensor::Float(gf), Tensor::Float(xf)) => {
            let values = gf
                .values
                .iter()
                .zip(&xf.values)
                .map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 })
                .collect();
            Ok(Tensor::Float(FloatTensor::new(gf.shape.clone(), values)?))
        }
        (Tensor::Quant(gq), Tensor::Quant(xq)) => {
            let (qlo, qhi) = clamp_bounds(
                &crate::qtensor::ActClamp { lo, hi },
                xq.params.scales[0],
                xq.params.zero_points[0],
            );
            let xs = xq.i8_values()?;
            let data: Vec<i8> = gq
                .i8_values()?
                .iter()
                .zip(xs)
                .map(|(&g, &x)| if (x as i32) > qlo && (x as i32) < qhi { g } else { 0 })
                .collect();
            Ok(Tensor::Quant(QuantizedTensor::new(
                gq.shape.clone(),
                QuantData::I8(data),
                gq.params.clone(),
            )?))
        }
        _ => Err(Error::Graph("ReLU6Grad operands must share a dtype".into())),
    }
}

fn exec_avgpool(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let out = match ctx.value(node.inputs[0])? {
        Tensor::Float(f) => {
            let d = f.shape.dims();
            let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
            let mut values = vec![0.0f32; n * c];
            for i in 0..n * c {
                let mut acc = 0.0f64;
                for j in 0..h * w {
                    acc += f.values[i * h * w + j] as f64;
                }
                values[i] = (acc / (h * w) as f64) as f32;
            }
            Tensor::Float(FloatTensor::new(Shape::new(&[n, c, 1, 1])?, values)?)
        }
        Tensor::Quant(q) => {
            let d = q.shape.dims();
            let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
            let zp = q.params.zero_points[0];
            let xs = q.i8_values()?;
            let mut data = vec![0i8; n * c];
            for i in 0..n * c {
                let mut acc: i32 = 0;
                for j in 0..h * w {
                    acc += xs[i * h * w + j] as i32 - zp;
                }
                let v = zp as f64 + acc as f64 / (h * w) as f64;
                data[i] = cast2int8(v, IntRange::Full);
            }
            Tensor::Quant(QuantizedTensor::new(
                Shape::new(&[n, c, 1, 1])?,
                QuantData::I8(data),
                q.params.clone(),
            )?)
        }
    };
    store(ctx, node.outputs[0], out)
}

fn exec_avgpool_grad(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let h = node.attrs.get_int("in_h")? as usize;
    let w = node.attrs.get_int("in_w")? as usize;
    let out = match ctx.value(node.inputs[0])? {
        Tensor::Float(g) => {
            let d = g.shape.dims();
            let (n, c) = (d[0], d[1]);
            let mut values = vec![0.0f32; n * c * h * w];
            for i in 0..n * c {
                let v = g.values[i] / (h * w) as f32;
                for j in 0..h * w {
                    values[i * h * w + j] = v;
                }
            }
            Tensor::Float(FloatTensor::new(Shape::new(&[n, c, h, w])?, values)?)
        }
        Tensor::Quant(g) => {
            // replicate int values; fold 1/(H*W) into the scale
            let d = g.shape.dims();
            let (n, c) = (d[0], d[1]);
            let gs = g.i8_values()?;
            let mut data = vec![0i8; n * c * h * w];
            for i in 0..n * c {
                for j in 0..h * w {
                    data[i * h * w + j] = gs[i];
                }
            }
            let scale = g.params.scales[0] / (h * w) as f32;
            Tensor::Quant(QuantizedTensor::new(
                Shape::new(&[n, c, h, w])?,
                QuantData::I8(data),
                QuantParams::per_tensor(scale, 0),
            )?)
        }
    };
    store(ctx, node.outputs[0], out)
}

fn exec_sum(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let axes: Vec<usize> = node
        .attrs
        .get_ints("axes")?
        .iter()
        .map(|&v| v as usize)
        .collect();
    let (in_shape, out) = match ctx.value(node.inputs[0])? {
        Tensor::Float(f) => {
            let (shape, idx) = sum_layout(&f.shape, &axes)?;
            let mut acc = vec![0.0f64; shape.elem_count()];
            for (i, &v) in f.values.iter().enumerate() {
                acc[idx[i]] += v as f64;
            }
            (
                f.shape.clone(),
                Tensor::Float(FloatTensor::new(
                    shape,
                    acc.into_iter().map(|v| v as f32).collect(),
                )?),
            )
        }
        Tensor::Quant(q) => {
            // integer gradient reduction: int32 accumulate, same scale
            let (shape, idx) = sum_layout(&q.shape, &axes)?;
            let mut acc = vec![0i32; shape.elem_count()];
            match &q.data {
                QuantData::I8(v) => {
                    for (i, &x) in v.iter().enumerate() {
                        acc[idx[i]] += x as i32;
                    }
                }
                QuantData::I32(v) => {
                    for (i, &x) in v.iter().enumerate() {
                        acc[idx[i]] = acc[idx[i]].checked_add(x).ok_or_else(|| {
                            Error::Numeric("int32 overflow in gradient sum".into())
                        })?;
                    }
                }
            }
            (
                q.shape.clone(),
                Tensor::Quant(QuantizedTensor::new(
                    shape,
                    QuantData::I32(acc),
                    QuantParams::per_tensor(q.params.scales[0], 0),
                )?),
            )
        }
    };
    let _ = in_shape;
    store(ctx, node.outputs[0], out)
}

/// Map each input flat index to its output flat index under axis reduction.
fn sum_layout(shape: &Shape, axes: &[usize]) -> Result<(Shape, Vec<usize>)> {
    let dims = shape.dims();
    let kept: Vec<usize> = (0..dims.len()).filter(|i| !axes.contains(i)).collect();
    let out_dims: Vec<usize> = kept.iter().map(|&i| dims[i]).collect();
    let out_shape = if out_dims.is_empty() {
        Shape::new(&[1])?
    } else {
        Shape::new(&out_dims)?
    };
    let mut idx = vec![0usize; shape.elem_count()];
    for flat in 0..shape.elem_count() {
        let mut rem = flat;
        let mut coords = vec![0usize; dims.len()];
        for i in (0..dims.len()).rev() {
            coords[i] = rem % dims[i];
            rem /= dims[i];
        }
        let mut out = 0usize;
        for &k in &kept {
            out = out * dims[k] + coords[k];
        }
        idx[flat] = out;
    }
    Ok((out_shape, idx))
}

fn exec_slice(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let axis = node.attrs.get_int("axis")? as usize;
    let channels: Vec<usize> = node
        .attrs
        .get_ints("channels")?
        .iter()
        .map(|&v| v as usize)
        .collect();
    let out = match ctx.value(node.inputs[0])? {
        Tensor::Float(f) => {
            let (shape, values) = slice_axis(&f.shape, &f.values, axis, &channels)?;
            Tensor::Float(FloatTensor::new(shape, values)?)
        }
        Tensor::Quant(q) => {
            let vals = q.i8_values()?;
            let (shape, values) = slice_axis(&q.shape, vals, axis, &channels)?;
            if q.params.granularity != crate::qtensor::Granularity::PerTensor {
                return Err(Error::Graph("runtime Slice expects per-tensor params".into()));
            }
            Tensor::Quant(QuantizedTensor::new(
                shape,
                QuantData::I8(values),
                q.params.clone(),
            )?)
        }
    };
    store(ctx, node.outputs[0], out)
}

fn slice_axis<T: Copy>(
    shape: &Shape,
    values: &[T],
    axis: usize,
    channels: &[usize],
) -> Result<(Shape, Vec<T>)> {
    let dims = shape.dims();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out_dims = dims.to_vec();
    out_dims[axis] = channels.len();
    let mut out = Vec::with_capacity(outer * channels.len() * inner);
    for o in 0..outer {
        for &c in channels {
            let base = (o * dims[axis] + c) * inner;
            out.extend_from_slice(&values[base..base + inner]);
        }
    }
    Ok((Shape::new(&out_dims)?, out))
}

fn exec_concat(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let axis = node.attrs.get_int("axis")? as usize;
    let first = ctx.value(node.inputs[0])?.clone();
    match first {
        Tensor::Quant(q0) => {
            let dims = q0.shape.dims().to_vec();
            let mut total = 0usize;
            for (i, _) in node.inputs.iter().enumerate() {
                total += node.attrs.get_ints(&format!("dest_{i}"))?.len();
            }
            let mut out_dims = dims.clone();
            out_dims[axis] = total;
            let out_shape = Shape::new(&out_dims)?;
            let inner: usize = dims[axis + 1..].iter().product();
            let outer: usize = dims[..axis].iter().product();
            let mut out = vec![0i8; out_shape.elem_count()];
            for (i, &inp) in node.inputs.iter().enumerate() {
                let q = ctx.quant(inp)?;
                if q.params != q0.params {
                    return Err(Error::Graph("Concat inputs must share quant params".into()));
                }
                let dest = node.attrs.get_ints(&format!("dest_{i}"))?;
                let vals = q.i8_values()?;
                let part_c = q.shape.dims()[axis];
                for o in 0..outer {
                    for (j, &d) in dest.iter().enumerate() {
                        let src = (o * part_c + j) * inner;
                        let dst = (o * total + d as usize) * inner;
                        out[dst..dst + inner].copy_from_slice(&vals[src..src + inner]);
                    }
                }
            }
            store(
                ctx,
                node.outputs[0],
                Tensor::Quant(QuantizedTensor::new(
                    out_shape,
                    QuantData::I8(out),
                    q0.params.clone(),
                )?),
            )
        }
        Tensor::Float(f0) => {
            let dims = f0.shape.dims().to_vec();
            let mut total = 0usize;
            for (i, _) in node.inputs.iter().enumerate() {
                total += node.attrs.get_ints(&format!("dest_{i}"))?.len();
            }
            let mut out_dims = dims.clone();
            out_dims[axis] = total;
            let out_shape = Shape::new(&out_dims)?;
            let inner: usize = dims[axis + 1..].iter().product();
            let outer: usize = dims[..axis].iter().product();
            let mut out = vec![0.0f32; out_shape.elem_count()];
            for (i, &inp) in node.inputs.iter().enumerate() {
                let f = ctx.float(inp)?;
                let dest = node.attrs.get_ints(&format!("dest_{i}"))?;
                let part_c = f.shape.dims()[axis];
                for o in 0..outer {
                    for (j, &d) in dest.iter().enumerate() {
                        let src = (o * part_c + j) * inner;
                        let dst = (o * total + d as usize) * inner;
                        out[dst..dst + inner].copy_from_slice(&f.values[src..src + inner]);
                    }
                }
            }
            store(
                ctx,
                node.outputs[0],
                Tensor::Float(FloatTensor::new(out_shape, out)?),
            )
        }
    }
}

fn exec_grad_descent(ctx: &mut Ctx, node: &Node) -> Result<()> {
    let param_id = node.inputs[0];
    let grad_id = node.inputs[1];
    let grad = ctx.value(grad_id)?.clone();
    let param = ctx.value(param_id)?.clone();

    ctx.grads.insert(param_id, grad.clone());

    let out = if ctx.opts.mode == RunMode::Inline {
        let rule = UpdateRule {
            lr: ctx.opts.lr,
            qas: ctx.opts.qas,
        };
        let (updated, zero_delta) = update::sgd_update(&param, &grad, &rule)?;
        ctx.zero_delta += zero_delta;
        ctx.updated.insert(param_id, updated.clone());
        updated
    } else {
        param
    };
    store(ctx, node.outputs[0], out)
}
