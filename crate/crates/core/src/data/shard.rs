//! Single-file binary shard with an index: JSON header, then fp32 samples in
//! little-endian order, then u32 labels.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::{FloatTensor, Shape};

use super::Dataset;

const MAGIC: &[u8; 4] = b"TTDS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ShardHeader {
    schema_version: u32,
    samples: usize,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
}

pub fn write_shard<W: Write>(mut out: W, dataset: &Dataset) -> Result<()> {
    let dims = dataset
        .images
        .first()
        .map(|t| t.shape.dims().to_vec())
        .ok_or_else(|| Error::Config("cannot write an empty shard".into()))?;
    let header = ShardHeader {
        schema_version: VERSION,
        samples: dataset.len(),
        channels: dims[0],
        height: dims[1],
        width: dims[2],
        classes: dataset.classes,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for image in &dataset.images {
        if image.shape.dims() != dims {
            return Err(Error::Config("shard samples must share a shape".into()));
        }
        for v in &image.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for &label in &dataset.labels {
        out.write_all(&label.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_shard<R: Read>(mut input: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a dataset shard (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != VERSION {
        return Err(Error::Config("unsupported shard version".into()));
    }
    input.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: ShardHeader = serde_json::from_slice(&header_bytes)?;

    let shape = Shape::new(&[header.channels, header.height, header.width])?;
    let elems = shape.elem_count();
    let mut images = Vec::with_capacity(header.samples);
    for _ in 0..header.samples {
        let mut buf = vec![0u8; elems * 4];
        input.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        images.push(FloatTensor::new(shape.clone(), values)?);
    }
    let mut labels = Vec::with_capacity(header.samples);
    for _ in 0..header.samples {
        input.read_exact(&mut word)?;
        labels.push(u32::from_le_bytes(word));
    }
    Dataset::new(images, labels, header.classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn shard_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let shape = Shape::new(&[3, 4, 4]).unwrap();
        let images: Vec<FloatTensor> = (0..6)
            .map(|_| FloatTensor {
                shape: shape.clone(),
                values: (0..48).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            })
            .collect();
        let labels = vec![0u32, 1, 2, 0, 1, 2];
        let d = Dataset::new(images, labels, 3).unwrap();
        let mut buf = Vec::new();
        write_shard(&mut buf, &d).unwrap();
        let back = read_shard(&buf[..]).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.classes, d.classes);
        assert_eq!(back.images[3], d.images[3]);
    }
}
