//! Synthetic toy tasks: a linearly separable two-class set and a
//! teacher-labeled transfer task for contribution analysis and training
//! experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec;
use crate::graph::ModelBundle;
use crate::qtensor::{FloatTensor, Shape, Tensor};

use super::Dataset;

/// Perturb every float parameter by a uniform relative amount. Labeling data
/// with a perturbed twin of the model-to-train yields a transfer task whose
/// difficulty scales with `rel_scale`: the classifier can partially re-fit,
/// and backbone updates recover the rest.
pub fn perturb_params(bundle: &ModelBundle, rel_scale: f32, seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = bundle.clone();
    for value in out.params.values_mut() {
        if let Tensor::Float(f) = value {
            let max_abs = f.values.iter().fold(0.0f32, |m, &v| m.max(v.abs())).max(0.3);
            for v in &mut f.values {
                *v += rng.gen_range(-1.0f32..=1.0) * rel_scale * max_abs;
            }
        }
    }
    out
}

/// Two Gaussian blobs separated along a random direction in pixel space.
pub fn linear_two_class(
    n: usize,
    channels: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(&[channels, resolution, resolution])?;
    let dim = shape.elem_count();
    let mut dir: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
    for v in &mut dir {
        *v *= 0.7 / norm * (dim as f32).sqrt();
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let sign = if label == 0 { -1.0f32 } else { 1.0 };
        let values: Vec<f32> = dir
            .iter()
            .map(|&d| (sign * d + rng.gen_range(-0.15f32..0.15)).clamp(-1.0, 1.0))
            .collect();
        images.push(FloatTensor {
            shape: shape.clone(),
            values,
        });
        labels.push(label);
    }
    Dataset::new(images, labels, 2)
}

/// Class-prototype task: one random full-resolution pattern per class;
/// samples interpolate their prototype with fresh noise. Learnable from
/// pixel structure, with headroom above a frozen random backbone whenever
/// the pooled feature width is small relative to the class count.
pub fn prototype_task(
    classes: usize,
    n: usize,
    channels: usize,
    resolution: usize,
    noise: f32,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(&[channels, resolution, resolution])?;
    let dim = shape.elem_count();
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..=1.0)).collect())
        .collect();
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let values: Vec<f32> = prototypes[label]
            .iter()
            .map(|&p| {
                (p * (1.0 - noise) + rng.gen_range(-1.0f32..=1.0) * noise).clamp(-1.0, 1.0)
            })
            .collect();
        images.push(FloatTensor::new(shape.clone(), values)?);
        labels.push(label as u32);
    }
    Dataset::new(images, labels, classes)
}

/// Label random inputs with a (float) teacher model's argmax and balance the
/// classes round-robin. The student transfer setting comes from initializing
/// the trained model with a different seed than the teacher.
pub fn teacher_task(teacher: &ModelBundle, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = &teacher.graph;
    let image_info = graph.tensor(graph.inputs[0]).clone();
    let sample_dims = &image_info.shape.dims()[1..];
    let sample_shape = Shape::new(sample_dims)?;
    let classes = teacher.config.classes;

    // logits tensor: input of the loss node, or the last node's output
    let logits = match graph.loss {
        Some(loss) => {
            let node = graph
                .nodes
                .iter()
                .find(|nd| nd.outputs.contains(&loss))
                .expect("loss producer");
            node.inputs[0]
        }
        None => graph.nodes.last().expect("nonempty graph").outputs[0],
    };

    let run_logits = |values: Vec<f32>| -> Result<Vec<f32>> {
        let image = FloatTensor::new(image_info.shape.clone(), values)?;
        let mut feeds = std::collections::BTreeMap::new();
        feeds.insert(graph.inputs[0], Tensor::Float(image));
        if graph.inputs.len() > 1 {
            feeds.insert(
                graph.inputs[1],
                Tensor::Quant(crate::qtensor::QuantizedTensor::new(
                    Shape::new(&[1])?,
                    crate::qtensor::QuantData::I32(vec![0]),
                    crate::qtensor::QuantParams::per_tensor(1.0, 0),
                )?),
            );
        }
        let values_map = exec::run_forward(graph, &teacher.params, &feeds)?;
        match values_map.get(&logits) {
            Some(Tensor::Float(f)) => Ok(f.values.clone()),
            _ => Err(crate::error::Error::Graph("teacher produced no logits".into())),
        }
    };

    // center the logits so every class wins for some inputs
    let probe = 64usize;
    let mut mean = vec![0.0f64; classes];
    for _ in 0..probe {
        let values: Vec<f32> = (0..sample_shape.elem_count())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        for (m, &l) in mean.iter_mut().zip(&run_logits(values)?) {
            *m += l as f64 / probe as f64;
        }
    }

    let mut buckets: Vec<Vec<FloatTensor>> = vec![Vec::new(); classes];
    let per_class = n.div_ceil(classes);
    let mut attempts = 0usize;
    while buckets.iter().map(|b| b.len().min(per_class)).sum::<usize>() < n && attempts < 60 * n {
        attempts += 1;
        let values: Vec<f32> = (0..sample_shape.elem_count())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let out = run_logits(values.clone())?;
        let label = out
            .iter()
            .enumerate()
            .map(|(i, &v)| (i, v as f64 - mean[i]))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if buckets[label].len() < n {
            buckets[label].push(FloatTensor::new(sample_shape.clone(), values)?);
        }
    }

    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    'fill: loop {
        let mut advanced = false;
        for (c, bucket) in buckets.iter_mut().enumerate() {
            if let Some(img) = bucket.pop() {
                images.push(img);
                labels.push(c as u32);
                advanced = true;
                if images.len() == n {
                    break 'fill;
                }
            }
        }
        if !advanced {
            break;
        }
    }
    Dataset::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_backbone, BackboneConfig, GraphMode};

    #[test]
    fn two_class_set_is_balanced() {
        let d = linear_two_class(40, 3, 6, 7).unwrap();
        let ones = d.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 20);
    }

    #[test]
    fn teacher_task_is_deterministic_and_covers_classes() {
        let cfg = BackboneConfig::toy(1, 8, 4, 6);
        let teacher = build_backbone(&cfg, GraphMode::Float, 123).unwrap();
        let a = teacher_task(&teacher, 24, 9).unwrap();
        let b = teacher_task(&teacher, 24, 9).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 24);
        let distinct: std::collections::BTreeSet<u32> = a.labels.iter().copied().collect();
        assert!(distinct.len() >= 2, "labels {distinct:?}");
    }
}
