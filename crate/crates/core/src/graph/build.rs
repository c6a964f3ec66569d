//! Forward-graph construction: inverted-residual backbones with a float
//! classifier head, in float or real-quantized form.
//!
//! The quantized form is produced in three steps: build the float twin with
//! seeded initialization, calibrate activation ranges on a handful of random
//! inputs, then assemble the int8 graph with per-channel weight quantization
//! and the calibrated activation parameters.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::{
    quantize, quantize_bias, FloatTensor, Granularity, Shape, Tensor,
};

use super::{
    Attrs, DType, Graph, LayerInfo, LayerKind, LayerPart, OpKind, ParamInfo, ParamKind,
    StorageClass, TensorId,
};

/// Runtime values for parameter tensors, keyed by tensor id.
pub type ParamStore = BTreeMap<TensorId, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Float,
    Quantized,
}

/// One inverted-residual block: `pw1 (expand) -> dw -> pw2`, with a residual
/// add when the stride is 1 and the channel count is preserved. An expand
/// factor of 1 skips pw1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expand: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    ///180-style stem conv (3x3); None attaches the first block directly to
    /// the input image.
    pub stem_channels: Option<usize>,
    pub stem_stride: usize,
    pub blocks: Vec<BlockSpec>,
    pub resolution: usize,
    pub classes: usize,
    /// Attach a softmax cross-entropy loss and a label input.
    pub include_loss: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.blocks.is_empty() && self.stem_channels.is_none() {
            return Err(Error::Config("backbone has no layers".into()));
        }
        if self.blocks.iter().any(|b| b.expand == 0 || b.out_channels == 0 || b.stride == 0) {
            return Err(Error::Config("invalid block spec".into()));
        }
        if self.resolution == 0 || self.in_channels == 0 {
            return Err(Error::Config("invalid input spec".into()));
        }
        Ok(())
    }

    /// Small n-block test network.
    pub fn toy(blocks: usize, width: usize, classes: usize, resolution: usize) -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: Some(width),
            stem_stride: 1,
            blocks: (0..blocks)
                .map(|i| BlockSpec {
                    expand: 2,
                    out_channels: width,
                    stride: if i == blocks / 2 && resolution >= 8 { 2 } else { 1 },
                })
                .collect(),
            resolution,
            classes,
            include_loss: true,
        }
    }

    /// MobileNetV2 at width multiplier 0.35: 17 inverted-residual blocks,
    /// ~0.25M backbone parameters.
    pub fn mbv2_w035(classes: usize) -> Self {
        let mut blocks = Vec::new();
        let mut push = |expand: usize, out: usize, n: usize, stride: usize| {
            for i in 0..n {
                blocks.push(BlockSpec {
                    expand,
                    out_channels: out,
                    stride: if i == 0 { stride } else { 1 },
                });
            }
        };
        push(1, 8, 1, 1);
        push(6, 8, 2, 2);
        push(6, 16, 3, 2);
        push(6, 24, 4, 2);
        push(6, 32, 3, 1);
        push(6, 56, 3, 2);
        push(6, 112, 1, 1);
        BackboneConfig {
            in_channels: 3,
            stem_channels: Some(16),
            stem_stride: 2,
            blocks,
            resolution: 128,
            classes,
            include_loss: true,
        }
    }

    /// A network shaped like the MCUNet 5FPS ImageNet model: ~0.48M backbone
    /// parameters spread over 12 inverted-residual blocks.
    pub fn mcunet5fps_like(classes: usize) -> Self {
        let mut blocks = Vec::new();
        let mut push = |expand: usize, out: usize, n: usize, stride: usize| {
            for i in 0..n {
                blocks.push(BlockSpec {
                    expand,
                    out_channels: out,
                    stride: if i == 0 { stride } else { 1 },
                });
            }
        };
        push(3, 16, 1, 1);
        push(6, 24, 2, 2);
        push(6, 40, 3, 2);
        push(6, 48, 3, 2);
        push(6, 96, 2, 2);
        push(6, 144, 1, 1);
        BackboneConfig {
            in_channels: 3,
            stem_channels: Some(16),
            stem_stride: 2,
            blocks,
            resolution: 128,
            classes,
            include_loss: true,
        }
    }
}

/// A compiled model: graph structure plus parameter values.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub graph: Graph,
    pub params: ParamStore,
    pub mode: GraphMode,
    pub config: BackboneConfig,
}

impl ModelBundle {
    /// Total element count of backbone parameters (weights and biases,
    /// classifier excluded).
    pub fn backbone_param_count(&self) -> usize {
        self.graph
            .params
            .iter()
            .filter(|p| p.layer.is_some())
            .map(|p| self.graph.tensor(p.tensor).shape.elem_count())
            .sum()
    }

    /// Number of parameterized backbone layers.
    pub fn layer_count(&self) -> usize {
        self.graph.layers.len()
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &Shape, fan_in: usize) -> FloatTensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let values = (0..shape.elem_count())
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    FloatTensor {
        shape: shape.clone(),
        values,
    }
}

/// Map a calibrated value range to per-tensor asymmetric int8 parameters.
/// The range is extended to include zero so padding stays exact.
pub fn range_to_qparams(lo: f32, hi: f32) -> (f32, i32) {
    let lo = lo.min(0.0);
    let hi = hi.max(0.0);
    let scale = if hi == lo { 1.0 } else { (hi - lo) / 255.0 };
    let zp = (-128.0 - (lo / scale) as f64).round_ties_even().clamp(-128.0, 127.0) as i32;
    (scale, zp)
}

struct FloatParams {
    /// Per parameter-layer: (weight, bias).
    layers: Vec<(FloatTensor, FloatTensor)>,
    classifier_w: FloatTensor,
    classifier_b: FloatTensor,
}

/// Layer geometry walked identically by init, float assembly and quantized
/// assembly. `(kind, cin, cout, k, stride, padding, relu6)`
struct LayerPlan {
    kind: LayerKind,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    relu6: bool,
}

fn plan_layers(cfg: &BackboneConfig) -> Vec<LayerPlan> {
    let mut plans = Vec::new();
    let mut ch = cfg.in_channels;
    if let Some(stem) = cfg.stem_channels {
        plans.push(LayerPlan {
            kind: LayerKind::Conv,
            cin: ch,
            cout: stem,
            k: 3,
            stride: cfg.stem_stride,
            padding: 1,
            relu6: true,
        });
        ch = stem;
    }
    for block in &cfg.blocks {
        let hidden = ch * block.expand;
        if block.expand > 1 {
            plans.push(LayerPlan {
                kind: LayerKind::Conv,
                cin: ch,
                cout: hidden,
                k: 1,
                stride: 1,
                padding: 0,
                relu6: true,
            });
        }
        plans.push(LayerPlan {
            kind: LayerKind::Depthwise,
            cin: hidden,
            cout: hidden,
            k: 3,
            stride: block.stride,
            padding: 1,
            relu6: true,
        });
        plans.push(LayerPlan {
            kind: LayerKind::Conv,
            cin: hidden,
            cout: block.out_channels,
            k: 1,
            stride: 1,
            padding: 0,
            relu6: false,
        });
        ch = block.out_channels;
    }
    plans
}

fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<FloatParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for plan in plan_layers(cfg) {
        let (wshape, fan_in) = match plan.kind {
            LayerKind::Depthwise => (
                Shape::new(&[plan.cout, 1, plan.k, plan.k])?,
                plan.k * plan.k,
            ),
            _ => (
                Shape::new(&[plan.cout, plan.cin, plan.k, plan.k])?,
                plan.cin * plan.k * plan.k,
            ),
        };
        let w = he_uniform(&mut rng, &wshape, fan_in);
        let b = FloatTensor::zeros(Shape::new(&[plan.cout])?);
        layers.push((w, b));
    }
    let feat = plan_layers(cfg).last().map(|p| p.cout).unwrap_or(cfg.in_channels);
    let classifier_w = he_uniform(&mut rng, &Shape::new(&[cfg.classes, feat])?, feat);
    let classifier_b = FloatTensor::zeros(Shape::new(&[cfg.classes])?);
    Ok(FloatParams {
        layers,
        classifier_w,
        classifier_b,
    })
}

/// Activation quantization parameters consumed in tensor-creation order
/// during quantized assembly.
struct ActParams {
    seq: Vec<(f32, i32)>,
    cursor: usize,
}

impl ActParams {
    fn next(&mut self) -> Result<(f32, i32)> {
        let v = self.seq.get(self.cursor).copied().ok_or_else(|| {
            Error::Graph("calibration sequence shorter than activation count".into())
        })?;
        self.cursor += 1;
        Ok(v)
    }
}

fn assemble(
    cfg: &BackboneConfig,
    mode: GraphMode,
    float_params: &FloatParams,
    act_params: Option<&mut ActParams>,
) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut g = Graph::new();
    let mut store: ParamStore = BTreeMap::new();
    let mut acts = act_params;

    let n = 1usize;
    let image = g.add_tensor(
        Shape::new(&[n, cfg.in_channels, cfg.resolution, cfg.resolution])?,
        DType::F32,
        StorageClass::SramActivation,
    );
    g.inputs.push(image);

    // (current activation tensor, its quant scale/zp when in int8)
    let mut cursor = image;
    let mut cur_q: Option<(f32, i32)> = None;

    if mode == GraphMode::Quantized {
        let (scale, zp) = acts.as_deref_mut().unwrap().next()?;
        let attrs = Attrs::new().with_float("out_scale", scale).with_int("out_zp", zp as i64);
        let (_, outs) = g.add_node(OpKind::Quantize, vec![cursor], attrs, StorageClass::SramActivation)?;
        cursor = outs[0];
        cur_q = Some((scale, zp));
    }

    let plans = plan_layers(cfg);
    // block boundaries: plan index where each block starts, and for the plan
    // entry that ends a block, whether a residual add follows
    let mut block_starts: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    let mut block_of_plan: Vec<Option<bool>> = vec![None; plans.len()];
    {
        let mut plan_idx = if cfg.stem_channels.is_some() { 1 } else { 0 };
        let mut ch = cfg.stem_channels.unwrap_or(cfg.in_channels);
        for block in &cfg.blocks {
            block_starts.insert(plan_idx);
            let n_layers = if block.expand > 1 { 3 } else { 2 };
            let residual = block.stride == 1 && ch == block.out_channels;
            block_of_plan[plan_idx + n_layers - 1] = Some(residual);
            plan_idx += n_layers;
            ch = block.out_channels;
        }
    }

    let mut block_entry: (TensorId, Option<(f32, i32)>) = (cursor, cur_q);

    for (li, plan) in plans.iter().enumerate() {
        if block_starts.contains(&li) {
            block_entry = (cursor, cur_q);
        }
        let (wf, bf) = &float_params.layers[li];
        let layer_input = cursor;

        let (w_id, b_id, out_id, node_id, out_q);
        match mode {
            GraphMode::Float => {
                let w = g.add_tensor(wf.shape.clone(), DType::F32, StorageClass::SramUpdatedWeight);
                let b = g.add_tensor(bf.shape.clone(), DType::F32, StorageClass::SramUpdatedWeight);
                store.insert(w, Tensor::Float(wf.clone()));
                store.insert(b, Tensor::Float(bf.clone()));
                let mut attrs = Attrs::new()
                    .with_int("stride", plan.stride as i64)
                    .with_int("padding", plan.padding as i64);
                if plan.relu6 {
                    attrs = attrs.with_float("act_lo", 0.0).with_float("act_hi", 6.0);
                }
                let op = match plan.kind {
                    LayerKind::Conv => OpKind::FloatConv2d,
                    LayerKind::Depthwise => OpKind::FloatDepthwiseConv2d,
                    LayerKind::Linear => OpKind::FloatLinear,
                };
                let (nid, outs) = g.add_node(op, vec![cursor, w, b], attrs, StorageClass::SramActivation)?;
                (w_id, b_id, out_id, node_id, out_q) = (w, b, outs[0], nid, None);
            }
            GraphMode::Quantized => {
                let wq = quantize(wf, Granularity::PerChannel, true)?;
                let (s_x, _) = cur_q.ok_or_else(|| Error::Graph("missing input qparams".into()))?;
                let bscales: Vec<f32> = wq.params.scales.iter().map(|s| s * s_x).collect();
                let bq = quantize_bias(bf, &bscales)?;
                let w = g.add_tensor(wq.shape.clone(), DType::I8, StorageClass::SramUpdatedWeight);
                let b = g.add_tensor(bq.shape.clone(), DType::I32, StorageClass::SramUpdatedWeight);
                store.insert(w, Tensor::Quant(wq));
                store.insert(b, Tensor::Quant(bq));
                let (scale, zp) = acts.as_deref_mut().unwrap().next()?;
                let mut attrs = Attrs::new()
                    .with_int("stride", plan.stride as i64)
                    .with_int("padding", plan.padding as i64)
                    .with_float("out_scale", scale)
                    .with_int("out_zp", zp as i64);
                if plan.relu6 {
                    attrs = attrs.with_float("act_lo", 0.0).with_float("act_hi", 6.0);
                }
                let op = match plan.kind {
                    LayerKind::Conv => OpKind::QConv2d,
                    LayerKind::Depthwise => OpKind::QDepthwiseConv2d,
                    LayerKind::Linear => OpKind::QLinear,
                };
                let (nid, outs) = g.add_node(op, vec![cursor, w, b], attrs, StorageClass::SramActivation)?;
                (w_id, b_id, out_id, node_id, out_q) = (w, b, outs[0], nid, Some((scale, zp)));
            }
        }

        let layer_index = g.layers.len();
        g.params.push(ParamInfo {
            tensor: w_id,
            kind: ParamKind::Weight,
            layer: Some(layer_index),
            trainable: true,
            channels: (0..plan.cout).collect(),
        });
        g.params.push(ParamInfo {
            tensor: b_id,
            kind: ParamKind::Bias,
            layer: Some(layer_index),
            trainable: true,
            channels: (0..plan.cout).collect(),
        });
        g.layers.push(LayerInfo {
            index: layer_index,
            kind: plan.kind,
            input: layer_input,
            output: out_id,
            out_channels: plan.cout,
            parts: vec![LayerPart {
                node: node_id,
                weight: w_id,
                bias: b_id,
                channels: (0..plan.cout).collect(),
            }],
        });

        cursor = out_id;
        cur_q = out_q;

        if let Some(residual) = block_of_plan[li] {
            if residual {
                let (entry, _entry_q) = block_entry;
                let mut attrs = Attrs::new();
                if mode == GraphMode::Quantized {
                    let (scale, zp) = acts.as_deref_mut().unwrap().next()?;
                    attrs = attrs.with_float("out_scale", scale).with_int("out_zp", zp as i64);
                    cur_q = Some((scale, zp));
                }
                let (_, outs) =
                    g.add_node(OpKind::Add, vec![cursor, entry], attrs, StorageClass::SramActivation)?;
                cursor = outs[0];
                // fix the layer's logical output to the post-add tensor
                g.layers.last_mut().unwrap().output = cursor;
            }
        }
    }

    // global pool + flatten
    let (_, outs) = g.add_node(OpKind::AvgPool, vec![cursor], Attrs::new(), StorageClass::SramActivation)?;
    cursor = outs[0];
    let feat = g.tensor(cursor).shape.dims()[1];
    let (_, outs) = g.add_node(
        OpKind::Flatten,
        vec![cursor],
        Attrs::new().with_ints("to", vec![n as i64, feat as i64]),
        StorageClass::SramActivation,
    )?;
    cursor = outs[0];

    if mode == GraphMode::Quantized {
        let (_, outs) = g.add_node(OpKind::Dequantize, vec![cursor], Attrs::new(), StorageClass::SramActivation)?;
        cursor = outs[0];
    }

    // fp32 classifier
    let w = g.add_tensor(
        float_params.classifier_w.shape.clone(),
        DType::F32,
        StorageClass::SramUpdatedWeight,
    );
    let b = g.add_tensor(
        float_params.classifier_b.shape.clone(),
        DType::F32,
        StorageClass::SramUpdatedWeight,
    );
    store.insert(w, Tensor::Float(float_params.classifier_w.clone()));
    store.insert(b, Tensor::Float(float_params.classifier_b.clone()));
    g.params.push(ParamInfo {
        tensor: w,
        kind: ParamKind::ClassifierWeight,
        layer: None,
        trainable: true,
        channels: (0..cfg.classes).collect(),
    });
    g.params.push(ParamInfo {
        tensor: b,
        kind: ParamKind::ClassifierBias,
        layer: None,
        trainable: true,
        channels: (0..cfg.classes).collect(),
    });
    let (_, outs) = g.add_node(
        OpKind::FloatLinear,
        vec![cursor, w, b],
        Attrs::new(),
        StorageClass::SramActivation,
    )?;
    cursor = outs[0];

    if cfg.include_loss {
        let labels = g.add_tensor(Shape::new(&[n])?, DType::I32, StorageClass::SramActivation);
        g.inputs.push(labels);
        let (_, outs) = g.add_node(
            OpKind::SoftmaxCrossEntropy,
            vec![cursor, labels],
            Attrs::new(),
            StorageClass::SramActivation,
        )?;
        g.loss = Some(outs[0]);
    }

    Ok(ModelBundle {
        graph: g,
        params: store,
        mode,
        config: cfg.clone(),
    })
}

/// Activation tensors that receive calibrated quantization parameters, in
/// assembly order: the quantize input point, each layer output, each
/// residual-add output.
fn calibration_points(bundle: &ModelBundle) -> Vec<TensorId> {
    let mut points = vec![bundle.graph.inputs[0]];
    for layer in &bundle.graph.layers {
        // layer.output already points at the post-add tensor for residual
        // blocks, but the pre-add conv output needs params of its own
        let part_out = bundle
            .graph
            .nodes
            .iter()
            .find(|n| n.id == layer.parts[0].node)
            .map(|n| n.outputs[0])
            .unwrap();
        points.push(part_out);
        if layer.output != part_out {
            points.push(layer.output);
        }
    }
    points
}

/// Recover the per-layer float parameters of a float-mode bundle.
fn float_params_of(bundle: &ModelBundle) -> Result<FloatParams> {
    if bundle.mode != GraphMode::Float {
        return Err(Error::Graph("expected a float-mode bundle".into()));
    }
    let mut layers = Vec::new();
    for layer in &bundle.graph.layers {
        let part = &layer.parts[0];
        let w = match bundle.params.get(&part.weight) {
            Some(Tensor::Float(f)) => f.clone(),
            _ => return Err(Error::Graph("missing float weight".into())),
        };
        let b = match bundle.params.get(&part.bias) {
            Some(Tensor::Float(f)) => f.clone(),
            _ => return Err(Error::Graph("missing float bias".into())),
        };
        layers.push((w, b));
    }
    let mut classifier_w = None;
    let mut classifier_b = None;
    for p in &bundle.graph.params {
        if p.layer.is_none() {
            if let Some(Tensor::Float(f)) = bundle.params.get(&p.tensor) {
                match p.kind {
                    super::ParamKind::ClassifierWeight => classifier_w = Some(f.clone()),
                    super::ParamKind::ClassifierBias => classifier_b = Some(f.clone()),
                    _ => {}
                }
            }
        }
    }
    Ok(FloatParams {
        layers,
        classifier_w: classifier_w.ok_or_else(|| Error::Graph("missing classifier weight".into()))?,
        classifier_b: classifier_b.ok_or_else(|| Error::Graph("missing classifier bias".into()))?,
    })
}

/// Quantize a float bundle (e.g. after pretraining) into a real int8 graph,
/// calibrating activation ranges on the provided images. Empty `calib`
/// falls back to seeded random inputs.
pub fn quantize_bundle(
    float_bundle: &ModelBundle,
    calib: &[FloatTensor],
    seed: u64,
) -> Result<ModelBundle> {
    let float_params = float_params_of(float_bundle)?;
    let ranges = if calib.is_empty() {
        calibrate(float_bundle, 8, seed ^ 0x9e3779b97f4a7c15)?
    } else {
        calibrate_with(float_bundle, calib)?
    };
    let mut act = ActParams {
        seq: ranges.into_iter().map(|(lo, hi)| range_to_qparams(lo, hi)).collect(),
        cursor: 0,
    };
    assemble(&float_bundle.config, GraphMode::Quantized, &float_params, Some(&mut act))
}

/// Build a forward graph with a quantized (or float) backbone and an fp32
/// classifier head.
pub fn build_backbone(cfg: &BackboneConfig, mode: GraphMode, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let float_params = init_params(cfg, seed)?;
    let float_bundle = assemble(cfg, GraphMode::Float, &float_params, None)?;
    match mode {
        GraphMode::Float => Ok(float_bundle),
        GraphMode::Quantized => {
            let ranges = calibrate(&float_bundle, 8, seed ^ 0x9e3779b97f4a7c15)?;
            let mut act = ActParams {
                seq: ranges.into_iter().map(|(lo, hi)| range_to_qparams(lo, hi)).collect(),
                cursor: 0,
            };
            assemble(cfg, GraphMode::Quantized, &float_params, Some(&mut act))
        }
    }
}

/// Run the float twin on seeded random inputs and collect (min, max) for
/// every calibration point.
fn calibrate(float_bundle: &ModelBundle, samples: usize, seed: u64) -> Result<Vec<(f32, f32)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image_info = float_bundle.graph.tensor(float_bundle.graph.inputs[0]).clone();
    let sample_dims = image_info.shape.dims()[1..].to_vec();
    let images: Vec<FloatTensor> = (0..samples)
        .map(|_| FloatTensor {
            shape: Shape::new(&sample_dims).unwrap(),
            values: (0..sample_dims.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0f32..=1.0))
                .collect(),
        })
        .collect();
    calibrate_with(float_bundle, &images)
}

/// Collect (min, max) per calibration point over the given sample images
/// (shaped (C, H, W); the batch dim is added here).
fn calibrate_with(float_bundle: &ModelBundle, images: &[FloatTensor]) -> Result<Vec<(f32, f32)>> {
    let points = calibration_points(float_bundle);
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); points.len()];
    let image_info = float_bundle.graph.tensor(float_bundle.graph.inputs[0]).clone();
    for image in images {
        let batched = FloatTensor::new(image_info.shape.clone(), image.values.clone())?;
        let mut feeds = BTreeMap::new();
        feeds.insert(float_bundle.graph.inputs[0], Tensor::Float(batched));
        if float_bundle.graph.inputs.len() > 1 {
            feeds.insert(
                float_bundle.graph.inputs[1],
                Tensor::Quant(crate::qtensor::QuantizedTensor::new(
                    Shape::new(&[1])?,
                    crate::qtensor::QuantData::I32(vec![0]),
                    crate::qtensor::QuantParams::per_tensor(1.0, 0),
                )?),
            );
        }
        let values = crate::exec::run_forward(&float_bundle.graph, &float_bundle.params, &feeds)?;
        for (i, &point) in points.iter().enumerate() {
            let tensor = values
                .get(&point)
                .ok_or_else(|| Error::Graph("calibration point not evaluated".into()))?;
            if let Tensor::Float(f) = tensor {
                for &v in &f.values {
                    ranges[i].0 = ranges[i].0.min(v);
                    ranges[i].1 = ranges[i].1.max(v);
                }
            }
        }
    }
    Ok(ranges)
}
