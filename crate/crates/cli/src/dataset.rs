//! Dataset ingestion: binary shards, directories of class subdirectories
//! with raw tensor files, and the synthetic generators.

use std::path::Path;

use tinytrain_core::data::{linear_two_class, read_shard, teacher_task, Dataset};
use tinytrain_core::error::{Error, Result};
use tinytrain_core::graph::{build_backbone, GraphMode};
use tinytrain_core::qtensor::{read_tensor, Tensor};

use crate::config::{DatasetSection, ModelSection};

/// Resolve a dataset section into (train, val) splits.
pub fn resolve(
    section: &DatasetSection,
    model: &ModelSection,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let full = match section.source.as_str() {
        "shard" => {
            let path = section
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("shard source needs dataset.path".into()))?;
            let bytes = std::fs::read(path)
                .map_err(|e| Error::Config(format!("cannot read shard {}: {e}", path.display())))?;
            read_shard(&bytes[..])?
        }
        "class-dirs" => {
            let path = section
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("class-dirs source needs dataset.path".into()))?;
            read_class_dirs(path)?
        }
        "synthetic-teacher" => {
            // the teacher shares the architecture but not the init seed, so
            // the trained model faces a genuine transfer gap
            let teacher = build_backbone(
                &model.backbone()?,
                GraphMode::Float,
                section.teacher_seed ^ 0x7e4c_0ffe,
            )?;
            teacher_task(&teacher, section.samples, section.teacher_seed)?
        }
        "synthetic-blobs" => linear_two_class(
            section.samples,
            3,
            model.resolution,
            section.teacher_seed,
        )?,
        other => {
            return Err(Error::Config(format!(
                "unknown dataset source {other:?} (expected shard | class-dirs | synthetic-teacher | synthetic-blobs)"
            )))
        }
    };
    let split_seed = section.split_seed ^ seed;
    let (train, val) = full.split(section.val_fraction, split_seed);
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    Ok((train, val))
}

/// Directory of class subdirectories; every file is a tensor container
/// holding one fp32 (C, H, W) sample. Classes are subdirectory names in
/// lexicographic order.
fn read_class_dirs(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Config("no class subdirectories found".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let bytes = std::fs::read(&file)?;
            match read_tensor(&bytes[..])? {
                Tensor::Float(f) => {
                    images.push(f);
                    labels.push(label as u32);
                }
                Tensor::Quant(_) => {
                    return Err(Error::Config(format!(
                        "{} holds a quantized tensor; samples must be fp32",
                        file.display()
                    )))
                }
            }
        }
    }
    Dataset::new(images, labels, class_dirs.len())
}
