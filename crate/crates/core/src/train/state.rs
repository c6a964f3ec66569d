//! Model compilation for a sparse-update scheme and the single-sample
//! training loop with gradient accumulation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{self, ExecOptions, RunMode};
use crate::graph::{
    derive_backward, Graph, ModelBundle, ParamKind, ParamStore, TensorId,
};
use crate::memplan::{reorder, Schedule};
use crate::qtensor::{FloatTensor, QuantData, QuantParams, QuantizedTensor, Shape, Tensor};
use crate::sparse::{
    apply_scheme, prune_backward, select_channels, slice_suboperator, ChannelMask, Ratio,
    SelectPolicy, UpdateScheme,
};
use crate::train::optim::{compute_step, OptState, OptimizerConfig};
use crate::train::update::{apply_step, grad_to_real};
use crate::train::{qas_for_param, MetricsRecord};

/// A model compiled for one sparse-update scheme: sliced, pruned, scheduled.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub bundle: ModelBundle,
    /// Forward+backward graph after pruning.
    pub graph: Graph,
    pub schedule: Schedule,
    pub scheme: UpdateScheme,
    pub masks: Vec<ChannelMask>,
    /// Classifier logits tensor (the loss node input).
    pub logits: TensorId,
}

/// Slice every partial-ratio layer of a scheme, selecting channels with the
/// given policy. Returns the sliced bundle and the masks.
pub fn slice_for_scheme(
    bundle: &ModelBundle,
    scheme: &UpdateScheme,
    policy: SelectPolicy,
    seed: u64,
) -> Result<(ModelBundle, Vec<ChannelMask>)> {
    scheme.validate(bundle.graph.layers.len())?;
    let mut sliced = bundle.clone();
    let mut masks = Vec::new();
    for wu in &scheme.weight_updates {
        if wu.ratio == Ratio::Full {
            continue;
        }
        let layer = &sliced.graph.layers[wu.layer];
        let weight_id = layer.parts[0].weight;
        let weight = match sliced.params.get(&weight_id) {
            Some(Tensor::Quant(q)) => q.clone(),
            _ => {
                return Err(Error::Scheme(
                    "partial-ratio updates need a quantized weight".into(),
                ))
            }
        };
        let mask = select_channels(&weight, wu.layer, wu.ratio, policy, seed ^ wu.layer as u64)?;
        sliced = slice_suboperator(&sliced, &mask)?;
        masks.push(mask);
    }
    Ok((sliced, masks))
}

/// Slice partial-ratio layers, set the trainable mask, derive the backward
/// graph, prune it for the scheme and reorder the schedule.
pub fn compile_model(
    bundle: &ModelBundle,
    scheme: &UpdateScheme,
    policy: SelectPolicy,
    seed: u64,
) -> Result<CompiledModel> {
    let (mut sliced, masks) = slice_for_scheme(bundle, scheme, policy, seed)?;
    apply_scheme(&mut sliced.graph, scheme)?;
    let derived = derive_backward(&sliced.graph)?;
    let graph = prune_backward(&derived, scheme)?;
    let violations = graph.validate();
    if !violations.is_empty() {
        return Err(Error::Graph(format!("compiled graph invalid: {violations:?}")));
    }
    let schedule = reorder(&graph);
    let logits = logits_tensor(&graph)?;
    Ok(CompiledModel {
        bundle: sliced,
        graph,
        schedule,
        scheme: scheme.clone(),
        masks,
        logits,
    })
}

pub fn logits_tensor(graph: &Graph) -> Result<TensorId> {
    let loss = graph
        .loss
        .ok_or_else(|| Error::Graph("graph has no loss".into()))?;
    let node = graph
        .nodes
        .iter()
        .find(|n| n.outputs.contains(&loss))
        .ok_or_else(|| Error::Graph("loss has no producer".into()))?;
    Ok(node.inputs[0])
}

fn label_tensor(label: u32) -> Result<Tensor> {
    Ok(Tensor::Quant(QuantizedTensor::new(
        Shape::new(&[1])?,
        QuantData::I32(vec![label as i32]),
        QuantParams::per_tensor(1.0, 0),
    )?))
}

fn batched_image(image: &FloatTensor) -> Result<FloatTensor> {
    let mut dims = vec![1usize];
    dims.extend_from_slice(image.shape.dims());
    FloatTensor::new(Shape::new(&dims)?, image.values.clone())
}

/// Mutable training state: the compiled model plus parameter values,
/// accumulation buffers, optimizer statistics and counters. One TrainState
/// is single-owner; independent states may run concurrently.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: CompiledModel,
    pub params: ParamStore,
    pub config: OptimizerConfig,
    pub opt_state: OptState,
    pub step: u64,
    pub seed: u64,
    accum: BTreeMap<TensorId, Vec<f64>>,
    accum_count: usize,
    pub zero_delta_total: u64,
    pub last_grads: BTreeMap<TensorId, Tensor>,
}

impl TrainState {
    pub fn new(model: CompiledModel, config: OptimizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = model.bundle.params.clone();
        Ok(TrainState {
            model,
            params,
            config,
            opt_state: OptState::default(),
            step: 0,
            seed,
            accum: BTreeMap::new(),
            accum_count: 0,
            zero_delta_total: 0,
            last_grads: BTreeMap::new(),
        })
    }

    /// One single-sample forward+backward; gradients are accumulated and the
    /// update is applied once `grad_accumulation_steps` microbatches are in.
    /// Returns the loss.
    pub fn microbatch_step(&mut self, image: &FloatTensor, label: u32, lr: f64) -> Result<f64> {
        let graph = &self.model.graph;
        let mut feeds = BTreeMap::new();
        feeds.insert(graph.inputs[0], Tensor::Float(batched_image(image)?));
        feeds.insert(graph.inputs[1], label_tensor(label)?);
        let opts = ExecOptions {
            mode: RunMode::CollectGrads,
            lr,
            qas: self.config.qas_enabled,
            schedule: Some(self.model.schedule.order.clone()),
        };
        let result = exec::run(graph, &self.params, &feeds, &opts)?;
        let loss = result
            .loss
            .ok_or_else(|| Error::Numeric("loss not produced".into()))?;
        if !loss.is_finite() {
            return Err(Error::Numeric("NaN loss in fp32 head".into()));
        }

        let n = self.config.grad_accumulation_steps as f64;
        for (&param_id, grad) in &result.grads {
            let real = grad_to_real(grad);
            let buf = self
                .accum
                .entry(param_id)
                .or_insert_with(|| vec![0.0; real.len()]);
            for (b, g) in buf.iter_mut().zip(&real) {
                *b += g / n;
            }
        }
        self.last_grads = result.grads;
        self.accum_count += 1;

        if self.accum_count >= self.config.grad_accumulation_steps {
            self.apply_accumulated(lr)?;
        }
        Ok(loss)
    }

    /// Apply the mean accumulated gradient to every trainable parameter.
    fn apply_accumulated(&mut self, lr: f64) -> Result<()> {
        let accum = std::mem::take(&mut self.accum);
        self.accum_count = 0;
        for (param_id, mut grad) in accum {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(
                    "gradient accumulator overflowed to a non-finite value; \
                     use a larger accumulator or fewer microbatches"
                        .into(),
                ));
            }
            let param = self
                .params
                .get(&param_id)
                .ok_or_else(|| Error::Graph("gradient for unknown parameter".into()))?
                .clone();
            if let Some(cap) = self.config.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cap {
                    let scale = cap / norm;
                    for g in &mut grad {
                        *g *= scale;
                    }
                }
            }
            crate::train::update::to_quant_domain(&param, &mut grad);
            if self.config.qas_enabled {
                qas_for_param(&param, &mut grad);
            }
            let step = compute_step(
                &self.config,
                &mut self.opt_state,
                param_id,
                &param,
                &grad,
                lr,
            );
            let (updated, zero_delta) = apply_step(&param, &step)?;
            self.zero_delta_total += zero_delta;
            self.params.insert(param_id, updated);
        }
        self.opt_state.t += 1;
        self.step += 1;
        Ok(())
    }

    /// Forward pass producing logits for one sample.
    pub fn infer_logits(&self, image: &FloatTensor) -> Result<Vec<f32>> {
        let graph = &self.model.graph;
        let mut feeds = BTreeMap::new();
        feeds.insert(graph.inputs[0], Tensor::Float(batched_image(image)?));
        feeds.insert(graph.inputs[1], label_tensor(0)?);
        let values = exec::run_forward(graph, &self.params, &feeds)?;
        match values.get(&self.model.logits) {
            Some(Tensor::Float(f)) => Ok(f.values.clone()),
            _ => Err(Error::Graph("logits not produced".into())),
        }
    }
}

/// Top-1 accuracy over a dataset.
pub fn evaluate(state: &TrainState, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (image, &label) in dataset.images.iter().zip(&dataset.labels) {
        let logits = state.infer_logits(image)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if pred == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// One epoch of single-sample training (the deployment regime).
pub fn train_one_epoch(
    state: &mut TrainState,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config_hash: &str,
    epoch: usize,
) -> Result<MetricsRecord> {
    if train_set.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if train_set.classes > logits_width(state)? {
        return Err(Error::Config(format!(
            "dataset has {} classes but the classifier produces {}",
            train_set.classes,
            logits_width(state)?
        )));
    }
    let steps_per_epoch = (train_set.len() as u64
        / state.config.grad_accumulation_steps as u64)
        .max(1);
    let order = train_set.epoch_order(state.seed, epoch);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut lr = state.config.lr_at(state.step, steps_per_epoch);
    for &idx in &order {
        lr = state.config.lr_at(state.step, steps_per_epoch);
        loss_sum += state.microbatch_step(&train_set.images[idx], train_set.labels[idx], lr)?;
        loss_count += 1;
    }
    let eval_acc = match eval_set {
        Some(ds) if !ds.is_empty() => evaluate(state, ds)?,
        _ => evaluate(state, train_set)?,
    };
    Ok(MetricsRecord {
        schema_version: 1,
        config_hash: config_hash.to_string(),
        seed: state.seed,
        epoch,
        split: "train".into(),
        loss: loss_sum / loss_count.max(1) as f64,
        accuracy: eval_acc,
        lr,
        zero_delta_updates: state.zero_delta_total,
    })
}

/// Run single-sample training for the configured number of epochs.
/// Deterministic given the seed. Returns per-epoch metrics.
pub fn train(
    state: &mut TrainState,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config_hash: &str,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::new();
    for epoch in 0..state.config.epochs {
        records.push(train_one_epoch(state, train_set, eval_set, config_hash, epoch)?);
    }
    Ok(records)
}

fn logits_width(state: &TrainState) -> Result<usize> {
    Ok(state.model.graph.tensor(state.model.logits).shape.dims()[1])
}

/// One row of the weight/gradient norm-ratio table.
#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub layer: Option<usize>,
    pub kind: ParamKind,
    /// `||W_bar|| / ||G||` before QAS (+inf when the gradient is zero).
    pub pre_qas: f64,
    /// `||W_bar|| / ||G~||` after QAS.
    pub post_qas: f64,
    /// The float twin's `||W|| / ||G||` when a shadow is attached.
    pub shadow: Option<f64>,
}

fn l2(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

fn param_norm(param: &Tensor) -> f64 {
    match param {
        // Eq.-3 ratios use the raw integer weight values
        Tensor::Quant(q) => l2((0..q.data.len()).map(|i| q.data.get_i32(i) as f64)),
        Tensor::Float(f) => l2(f.values.iter().map(|&v| v as f64)),
    }
}

/// Per-tensor `||W||/||G||` before and after QAS, with the float shadow's
/// ratio when provided. Requires a completed backward pass (`last_grads`).
pub fn ratio_report(state: &TrainState, shadow: Option<&TrainState>) -> Result<Vec<RatioRow>> {
    if state.last_grads.is_empty() {
        return Err(Error::Config("ratio report requires a completed backward pass".into()));
    }
    let mut rows = Vec::new();
    for info in &state.model.graph.params {
        if !info.trainable {
            continue;
        }
        let grad = match state.last_grads.get(&info.tensor) {
            Some(g) => g,
            None => continue,
        };
        let param = &state.params[&info.tensor];
        // Eq.-3 ratios compare the integer weight values against the
        // gradient of those integer values
        let mut quant = grad_to_real(grad);
        crate::train::update::to_quant_domain(param, &mut quant);
        let mut scaled = quant.clone();
        qas_for_param(param, &mut scaled);

        let wnorm = param_norm(param);
        let gnorm = l2(quant.iter().copied());
        let gqas = l2(scaled.iter().copied());
        let pre = if gnorm == 0.0 { f64::INFINITY } else { wnorm / gnorm };
        let post = if gqas == 0.0 { f64::INFINITY } else { wnorm / gqas };

        let shadow_ratio = shadow.and_then(|sh| {
            let twin = sh
                .model
                .graph
                .params
                .iter()
                .find(|p| p.kind == info.kind && p.layer == info.layer)?;
            let g = sh.last_grads.get(&twin.tensor)?;
            let w = sh.params.get(&twin.tensor)?;
            let gn = l2(grad_to_real(g).iter().copied());
            if gn == 0.0 {
                None
            } else {
                Some(param_norm(w) / gn)
            }
        });

        rows.push(RatioRow {
            layer: info.layer,
            kind: info.kind,
            pre_qas: pre,
            post_qas: post,
            shadow: shadow_ratio,
        });
    }
    Ok(rows)
}

/// Load one state's parameters into another with the same layer structure,
/// dequantizing where dtypes differ. Used to put a float shadow model at the
/// exact weights of a quantized model before comparing gradients or ratios.
pub fn sync_params_from(target: &mut TrainState, source: &TrainState) -> Result<()> {
    for sp in &source.model.graph.params {
        let twin = target
            .model
            .graph
            .params
            .iter()
            .find(|p| p.kind == sp.kind && p.layer == sp.layer && p.channels == sp.channels)
            .ok_or_else(|| Error::Graph("shadow has no twin parameter".into()))?;
        let value = match (&source.params[&sp.tensor], &target.params[&twin.tensor]) {
            (Tensor::Quant(q), Tensor::Float(_)) => {
                Tensor::Float(crate::qtensor::dequantize(q))
            }
            (v, _) => v.clone(),
        };
        target.params.insert(twin.tensor, value);
    }
    Ok(())
}

/// GradDescent semantics as a standalone op for single-parameter tests:
/// `W' = cast2int8(W - alpha * G~)`.
pub fn sgd_step(state: &mut TrainState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config("learning rate must be > 0".into()));
    }
    if state.accum.is_empty() {
        return Err(Error::Config("no accumulated gradients".into()));
    }
    state.apply_accumulated(lr)
}
