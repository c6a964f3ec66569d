//! Flat binary tensor container: a little-endian payload behind a JSON header
//! carrying shape, bit width, granularity, scales and zero points. Used by
//! checkpoints, weight import and test fixtures.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::{FloatTensor, Granularity, QuantData, QuantParams, QuantizedTensor, Shape};

const MAGIC: &[u8; 4] = b"QTNS";
const VERSION: u32 = 1;

/// A tensor as stored in the container: either fp32 or quantized int8/int32.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Float(FloatTensor),
    Quant(QuantizedTensor),
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    dtype: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    granularity: Option<Granularity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scales: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_points: Option<Vec<i32>>,
}

pub fn write_tensor<W: Write>(mut out: W, tensor: &Tensor) -> Result<()> {
    let (header, payload) = match tensor {
        Tensor::Float(t) => {
            let header = Header {
                schema_version: VERSION,
                dtype: "f32".into(),
                shape: t.shape.dims().to_vec(),
                granularity: None,
                scales: None,
                zero_points: None,
            };
            let mut payload = Vec::with_capacity(t.values.len() * 4);
            for v in &t.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            (header, payload)
        }
        Tensor::Quant(q) => {
            let (dtype, payload) = match &q.data {
                QuantData::I8(v) => {
                    ("i8".to_string(), v.iter().map(|&b| b as u8).collect::<Vec<u8>>())
                }
                QuantData::I32(v) => {
                    let mut p = Vec::with_capacity(v.len() * 4);
                    for x in v {
                        p.extend_from_slice(&x.to_le_bytes());
                    }
                    ("i32".to_string(), p)
                }
            };
            let header = Header {
                schema_version: VERSION,
                dtype,
                shape: q.shape.dims().to_vec(),
                granularity: Some(q.params.granularity),
                scales: Some(q.params.scales.clone()),
                zero_points: Some(q.params.zero_points.clone()),
            };
            (header, payload)
        }
    };
    let header_bytes = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a tensor container (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Config(format!("unsupported container version {version}")));
    }
    input.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let shape = Shape::new(&header.shape)?;
    let count = shape.elem_count();

    match header.dtype.as_str() {
        "f32" => {
            let mut payload = vec![0u8; count * 4];
            input.read_exact(&mut payload)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor::Float(FloatTensor::new(shape, values)?))
        }
        dtype @ ("i8" | "i32") => {
            let params = QuantParams {
                scales: header
                    .scales
                    .ok_or_else(|| Error::Config("quantized tensor missing scales".into()))?,
                zero_points: header
                    .zero_points
                    .ok_or_else(|| Error::Config("quantized tensor missing zero points".into()))?,
                granularity: header
                    .granularity
                    .ok_or_else(|| Error::Config("quantized tensor missing granularity".into()))?,
            };
            let data = if dtype == "i8" {
                let mut payload = vec![0u8; count];
                input.read_exact(&mut payload)?;
                QuantData::I8(payload.into_iter().map(|b| b as i8).collect())
            } else {
                let mut payload = vec![0u8; count * 4];
                input.read_exact(&mut payload)?;
                QuantData::I32(
                    payload
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            };
            Ok(Tensor::Quant(QuantizedTensor::new(shape, data, params)?))
        }
        other => Err(Error::Config(format!("unknown dtype {other:?} in container"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(read_tensor(&bytes[..]).is_err());
    }

    proptest! {
        #[test]
        fn prop_round_trip_identity(
            values in proptest::collection::vec(-100.0f32..100.0, 1..32),
            quantized in proptest::bool::ANY,
        ) {
            let n = values.len();
            let shape = Shape::new(&[n]).unwrap();
            let tensor = if quantized {
                let f = FloatTensor::new(shape, values).unwrap();
                Tensor::Quant(crate::qtensor::quantize(&f, Granularity::PerTensor, false).unwrap())
            } else {
                Tensor::Float(FloatTensor::new(shape, values).unwrap())
            };
            let mut buf = Vec::new();
            write_tensor(&mut buf, &tensor).unwrap();
            let back = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(back, tensor);
        }
    }
}
