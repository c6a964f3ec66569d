//! In-memory datasets, deterministic splits, synthetic task generators and
//! the binary shard format.

mod shard;
mod synth;

pub use shard::{read_shard, write_shard};
pub use synth::{linear_two_class, perturb_params, prototype_task, teacher_task};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::qtensor::FloatTensor;

/// A labeled image dataset held in memory. Samples are `(C, H, W)` fp32.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<FloatTensor>,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<FloatTensor>, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config("image/label count mismatch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Config(format!("label {bad} out of range 0..{classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic train/val split: shuffle indices with the split seed,
    /// first `(1 - val_fraction)` go to train.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let val_count = ((self.len() as f64) * val_fraction).round() as usize;
        let (val_idx, train_idx) = idx.split_at(val_count.min(self.len()));
        let pick = |ids: &[usize]| Dataset {
            images: ids.iter().map(|&i| self.images[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        };
        (pick(train_idx), pick(val_idx))
    }

    /// Epoch ordering for single-sample training, reshuffled per epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x517c_c1b7_2722_0a95));
        idx.shuffle(&mut rng);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::Shape;

    fn tiny(n: usize) -> Dataset {
        let images = (0..n)
            .map(|i| FloatTensor {
                shape: Shape::new(&[1, 2, 2]).unwrap(),
                values: vec![i as f32; 4],
            })
            .collect();
        let labels = (0..n).map(|i| (i % 2) as u32).collect();
        Dataset::new(images, labels, 2).unwrap()
    }

    #[test]
    fn split_is_reproducible_and_partitions() {
        let d = tiny(10);
        let (t1, v1) = d.split(0.3, 42);
        let (t2, v2) = d.split(0.3, 42);
        assert_eq!(t1.labels, t2.labels);
        assert_eq!(v1.labels, v2.labels);
        assert_eq!(t1.len() + v1.len(), d.len());
        assert_eq!(v1.len(), 3);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let images = vec![FloatTensor {
            shape: Shape::new(&[1, 2, 2]).unwrap(),
            values: vec![0.0; 4],
        }];
        assert!(Dataset::new(images, vec![5], 2).is_err());
    }
}
