//! Test fixtures shared between the crate's integration tests and the
//! acceptance suite: an independent f64 reference interpreter for float
//! graphs, a random micro-graph generator, and feed helpers.
//!
//! Everything here is oracle-side code: the interpreter re-implements the
//! float ops in f64 with no code shared with the engine's kernels.

#![doc(hidden)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::{self, ExecOptions, RunMode};
use crate::graph::{
    derive_backward, Attrs, DType, Graph, OpKind, ParamInfo, ParamKind, ParamStore, StorageClass,
    TensorId,
};
use crate::qtensor::{FloatTensor, QuantData, QuantParams, QuantizedTensor, Shape, Tensor};

/// Independent f64 forward interpreter for float graphs.
pub struct RefEval<'a> {
    pub graph: &'a Graph,
    pub values: BTreeMap<TensorId, Vec<f64>>,
    pub labels: Vec<i32>,
}

impl<'a> RefEval<'a> {
    fn shape(&self, id: TensorId) -> &[usize] {
        self.graph.tensor(id).shape.dims()
    }

    pub fn run(&mut self) -> f64 {
        for node in &self.graph.nodes {
            match node.op {
                OpKind::FloatLinear => {
                    let x = self.values[&node.inputs[0]].clone();
                    let w = self.values[&node.inputs[1]].clone();
                    let b = self.values[&node.inputs[2]].clone();
                    let (n, i) = (self.shape(node.inputs[0])[0], self.shape(node.inputs[0])[1]);
                    let o = self.shape(node.inputs[1])[0];
                    let mut out = vec![0.0; n * o];
                    for nn in 0..n {
                        for oo in 0..o {
                            let mut acc = b[oo];
                            for ii in 0..i {
                                acc += x[nn * i + ii] * w[oo * i + ii];
                            }
                            out[nn * o + oo] = acc;
                        }
                    }
                    self.values.insert(node.outputs[0], out);
                }
                OpKind::FloatConv2d | OpKind::FloatDepthwiseConv2d => {
                    let depthwise = node.op == OpKind::FloatDepthwiseConv2d;
                    let x = self.values[&node.inputs[0]].clone();
                    let w = self.values[&node.inputs[1]].clone();
                    let b = self.values[&node.inputs[2]].clone();
                    let xd = self.shape(node.inputs[0]).to_vec();
                    let wd = self.shape(node.inputs[1]).to_vec();
                    let stride = node.attrs.get_int("stride").unwrap() as usize;
                    let pad = node.attrs.get_int("padding").unwrap() as usize;
                    let (n, cin, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
                    let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
                    let oh = (h + 2 * pad - kh) / stride + 1;
                    let ow = (wi + 2 * pad - kw) / stride + 1;
                    let mut out = vec![0.0; n * cout * oh * ow];
                    for nn in 0..n {
                        for o in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut acc = b[o];
                                    let channels: Vec<usize> =
                                        if depthwise { vec![o] } else { (0..cin).collect() };
                                    for (wc, &c) in channels.iter().enumerate() {
                                        let wc = if depthwise { 0 } else { wc };
                                        for ky in 0..kh {
                                            for kx in 0..kw {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                let ix = (ox * stride + kx) as isize - pad as isize;
                                                if iy < 0
                                                    || ix < 0
                                                    || iy >= h as isize
                                                    || ix >= wi as isize
                                                {
                                                    continue;
                                                }
                                                acc += x[((nn * cin + c) * h + iy as usize) * wi
                                                    + ix as usize]
                                                    * w[((o * wd[1] + wc) * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                    out[((nn * cout + o) * oh + oy) * ow + ox] = acc;
                                }
                            }
                        }
                    }
                    self.values.insert(node.outputs[0], out);
                }
                OpKind::Add => {
                    let a = &self.values[&node.inputs[0]];
                    let b = &self.values[&node.inputs[1]];
                    let out = a.iter().zip(b).map(|(x, y)| x + y).collect();
                    self.values.insert(node.outputs[0], out);
                }
                OpKind::ReLU6 => {
                    let lo = node.attrs.opt_float("act_lo").unwrap_or(0.0) as f64;
                    let hi = node.attrs.opt_float("act_hi").unwrap_or(6.0) as f64;
                    let out = self.values[&node.inputs[0]]
                        .iter()
                        .map(|&v| v.clamp(lo, hi))
                        .collect();
                    self.values.insert(node.outputs[0], out);
                }
                OpKind::AvgPool => {
                    let xd = self.shape(node.inputs[0]).to_vec();
                    let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
                    let x = &self.values[&node.inputs[0]];
                    let mut out = vec![0.0; n * c];
                    for i in 0..n * c {
                        out[i] =
                            x[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
                    }
                    self.values.insert(node.outputs[0], out);
                }
                OpKind::Flatten => {
                    let v = self.values[&node.inputs[0]].clone();
                    self.values.insert(node.outputs[0], v);
                }
                OpKind::SoftmaxCrossEntropy => {
                    let logits = &self.values[&node.inputs[0]];
                    let ld = self.shape(node.inputs[0]).to_vec();
                    let (n, c) = (ld[0], ld[1]);
                    let mut total = 0.0;
                    for nn in 0..n {
                        let row = &logits[nn * c..(nn + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        total += m + sum.ln() - row[self.labels[nn] as usize];
                    }
                    self.values.insert(node.outputs[0], vec![total / n as f64]);
                }
                other => panic!("reference interpreter has no rule for {other:?}"),
            }
        }
        self.values[&self.graph.loss.unwrap()][0]
    }
}

pub fn ref_loss(
    graph: &Graph,
    params: &BTreeMap<TensorId, Vec<f64>>,
    input: &[f64],
    labels: &[i32],
) -> f64 {
    let mut values = params.clone();
    values.insert(graph.inputs[0], input.to_vec());
    RefEval {
        graph,
        values,
        labels: labels.to_vec(),
    }
    .run()
}

/// A random float micro-graph with its parameters in both f32 and f64.
pub struct MicroGraph {
    pub graph: Graph,
    pub params: ParamStore,
    pub params_f64: BTreeMap<TensorId, Vec<f64>>,
    pub input: Vec<f64>,
    pub labels: Vec<i32>,
}

fn add_param(
    g: &mut Graph,
    store: &mut ParamStore,
    f64s: &mut BTreeMap<TensorId, Vec<f64>>,
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    kind: ParamKind,
    scale: f32,
) -> TensorId {
    let shape = Shape::new(dims).unwrap();
    let values: Vec<f32> = (0..shape.elem_count())
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    let id = g.add_tensor(shape.clone(), DType::F32, StorageClass::SramUpdatedWeight);
    f64s.insert(id, values.iter().map(|&v| v as f64).collect());
    store.insert(id, Tensor::Float(FloatTensor::new(shape, values).unwrap()));
    g.params.push(ParamInfo {
        tensor: id,
        kind,
        layer: None,
        trainable: true,
        channels: (0..dims[0]).collect(),
    });
    id
}

/// Random graph of at most `max_ops` float ops plus an fp32 classifier and
/// softmax cross-entropy loss.
pub fn random_micrograph(seed: u64, max_ops: usize) -> MicroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let mut f64s = BTreeMap::new();

    let conv_family = rng.gen_bool(0.5);
    let classes = rng.gen_range(2..5);
    let batch = 1usize;

    let mut cursor;
    let mut ops_left = max_ops.saturating_sub(1);
    if conv_family {
        let c = rng.gen_range(1..3);
        let h = rng.gen_range(3..6);
        let input = g.add_tensor(
            Shape::new(&[batch, c, h, h]).unwrap(),
            DType::F32,
            StorageClass::SramActivation,
        );
        g.inputs.push(input);
        cursor = input;
        while ops_left > 1 {
            let cur_dims = g.tensor(cursor).shape.dims().to_vec();
            match rng.gen_range(0..4) {
                0 => {
                    let cout = rng.gen_range(1..4);
                    let k = if cur_dims[2] >= 3 && rng.gen_bool(0.5) { 3 } else { 1 };
                    let w = add_param(&mut g, &mut store, &mut f64s, &mut rng,
                        &[cout, cur_dims[1], k, k], ParamKind::Weight, 0.6);
                    let b = add_param(&mut g, &mut store, &mut f64s, &mut rng,
                        &[cout], ParamKind::Bias, 0.3);
                    let attrs = Attrs::new().with_int("stride", 1).with_int("padding", (k / 2) as i64);
                    let (_, outs) = g
                        .add_node(OpKind::FloatConv2d, vec![cursor, w, b], attrs,
                            StorageClass::SramActivation)
                        .unwrap();
                    cursor = outs[0];
                }
                1 => {
                    if cur_dims[2] < 3 {
                        continue;
                    }
                    let w = add_param(&mut g, &mut store, &mut f64s, &mut rng,
                        &[cur_dims[1], 1, 3, 3], ParamKind::Weight, 0.6);
                    let b = add_param(&mut g, &mut store, &mut f64s, &mut rng,
                        &[cur_dims[1]], ParamKind::Bias, 0.3);
                    let attrs = Attrs::new().with_int("stride", 1).with_int("padding", 1);
                    let (_, outs) = g
                        .add_node(OpKind::FloatDepthwiseConv2d, vec![cursor, w, b], attrs,
                            StorageClass::SramActivation)
                        .unwrap();
                    cursor = outs[0];
                }
                2 => {
                    let (_, outs) = g
                        .add_node(OpKind::ReLU6, vec![cursor], Attrs::new(),
                            StorageClass::SramActivation)
                        .unwrap();
                    cursor = outs[0];
                }
                _ => {
                    let (_, outs) = g
                        .add_node(OpKind::Add, vec![cursor, cursor], Attrs::new(),
                            StorageClass::SramActivation)
                        .unwrap();
                    cursor = outs[0];
                }
            }
            ops_left -= 1;
        }
        let (_, outs) = g
            .add_node(OpKind::AvgPool, vec![cursor], Attrs::new(), StorageClass::SramActivation)
            .unwrap();
        cursor = outs[0];
        let feat = g.tensor(cursor).shape.dims()[1];
        let (_, outs) = g
            .add_node(OpKind::Flatten, vec![cursor],
                Attrs::new().with_ints("to", vec![batch as i64, feat as i64]),
                StorageClass::SramActivation)
            .unwrap();
        cursor = outs[0];
    } else {
        let d = rng.gen_range(2..7);
        let input = g.add_tensor(
            Shape::new(&[batch, d]).unwrap(),
            DType::F32,
            StorageClass::SramActivation,
        );
        g.inputs.push(input);
        cursor = input;
        while ops_left > 1 {
            let cur = g.tensor(cursor).shape.dims()[1];
            match rng.gen_range(0..3) {
                0 => {
                    let o = rng.gen_range(2..7);
                    let w = add_param(&mut g, &mut store, &mut f64s, &mut rng,
                        &[o, cur], ParamKind::Weight, 0.8);
                    let b = add_param(&mut g, &mut store, &mut f64s, &mut rng,
                        &[o], ParamKind::Bias, 0.4);
                    let (_, outs) = g
                        .add_node(OpKind::FloatLinear, vec![cursor, w, b], Attrs::new(),
                            StorageClass::SramActivation)
                        .unwrap();
                    cursor = outs[0];
                }
                1 => {
                    let (_, outs) = g
                        .add_node(OpKind::ReLU6, vec![cursor], Attrs::new(),
                            StorageClass::SramActivation)
                        .unwrap();
                    cursor = outs[0];
                }
                _ => {
                    let (_, outs) = g
                        .add_node(OpKind::Add, vec![cursor, cursor], Attrs::new(),
                            StorageClass::SramActivation)
                        .unwrap();
                    cursor = outs[0];
                }
            }
            ops_left -= 1;
        }
    }

    let feat = g.tensor(cursor).shape.dims()[1];
    let w = add_param(&mut g, &mut store, &mut f64s, &mut rng,
        &[classes, feat], ParamKind::ClassifierWeight, 0.8);
    let b = add_param(&mut g, &mut store, &mut f64s, &mut rng,
        &[classes], ParamKind::ClassifierBias, 0.4);
    let (_, outs) = g
        .add_node(OpKind::FloatLinear, vec![cursor, w, b], Attrs::new(),
            StorageClass::SramActivation)
        .unwrap();
    cursor = outs[0];
    let labels_id = g.add_tensor(
        Shape::new(&[batch]).unwrap(),
        DType::I32,
        StorageClass::SramActivation,
    );
    g.inputs.push(labels_id);
    let (_, outs) = g
        .add_node(OpKind::SoftmaxCrossEntropy, vec![cursor, labels_id], Attrs::new(),
            StorageClass::SramActivation)
        .unwrap();
    g.loss = Some(outs[0]);

    let input_len = g.tensor(g.inputs[0]).shape.elem_count();
    let input: Vec<f64> = (0..input_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = vec![rng.gen_range(0..classes) as i32];
    MicroGraph {
        graph: g,
        params: store,
        params_f64: f64s,
        input,
        labels,
    }
}

/// Values near a clamp kink make finite differences unreliable.
pub fn near_kink(mg: &MicroGraph) -> bool {
    let mut values = mg.params_f64.clone();
    values.insert(mg.graph.inputs[0], mg.input.clone());
    let mut ev = RefEval {
        graph: &mg.graph,
        values,
        labels: mg.labels.clone(),
    };
    ev.run();
    for node in &mg.graph.nodes {
        if node.op == OpKind::ReLU6 {
            let lo = node.attrs.opt_float("act_lo").unwrap_or(0.0) as f64;
            let hi = node.attrs.opt_float("act_hi").unwrap_or(6.0) as f64;
            for &v in &ev.values[&node.inputs[0]] {
                if (v - lo).abs() < 5e-3 || (v - hi).abs() < 5e-3 {
                    return true;
                }
            }
        }
    }
    false
}

/// Collected analytic gradients from the engine (real units).
pub fn exec_grads(mg: &MicroGraph) -> BTreeMap<TensorId, Vec<f64>> {
    let derived = derive_backward(&mg.graph).unwrap();
    assert!(derived.validate().is_empty(), "{:?}", derived.validate());
    let mut feeds = BTreeMap::new();
    let in_shape = mg.graph.tensor(mg.graph.inputs[0]).shape.clone();
    feeds.insert(
        mg.graph.inputs[0],
        Tensor::Float(
            FloatTensor::new(in_shape, mg.input.iter().map(|&v| v as f32).collect()).unwrap(),
        ),
    );
    feeds.insert(
        mg.graph.inputs[1],
        Tensor::Quant(
            QuantizedTensor::new(
                Shape::new(&[mg.labels.len()]).unwrap(),
                QuantData::I32(mg.labels.clone()),
                QuantParams::per_tensor(1.0, 0),
            )
            .unwrap(),
        ),
    );
    let opts = ExecOptions {
        mode: RunMode::CollectGrads,
        lr: 0.0,
        qas: false,
        schedule: None,
    };
    let result = exec::run(&derived, &mg.params, &feeds, &opts).unwrap();
    result
        .grads
        .iter()
        .map(|(&id, g)| (id, crate::train::grad_to_real(g)))
        .collect()
}

/// Worst relative error between analytic gradients and f64 central
/// differences over every parameter element.
pub fn max_rel_error(mg: &MicroGraph) -> f64 {
    let grads = exec_grads(mg);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (&pid, f64vals) in &mg.params_f64 {
        let analytic = grads.get(&pid).unwrap_or_else(|| panic!("no grad for {pid:?}"));
        for i in 0..f64vals.len() {
            let mut plus = mg.params_f64.clone();
            plus.get_mut(&pid).unwrap()[i] += h;
            let mut minus = mg.params_f64.clone();
            minus.get_mut(&pid).unwrap()[i] -= h;
            let fd = (ref_loss(&mg.graph, &plus, &mg.input, &mg.labels)
                - ref_loss(&mg.graph, &minus, &mg.input, &mg.labels))
                / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
    }
    worst
}
