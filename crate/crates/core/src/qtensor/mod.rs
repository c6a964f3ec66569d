//! Quantized and float tensor types, quantization/dequantization, and the
//! int8 cast used by forward kernels and weight updates.
//!
//! Conventions:
//! - weights are quantized symmetrically (zero point 0) with int8 values in
//!   `[-127, 127]`, one scale per output channel (dim 0) or per tensor;
//! - activations are quantized asymmetrically per tensor with values in
//!   `[-128, 127]`;
//! - biases are stored as int32 with scale `s_w * s_x` and zero point 0;
//! - every rounding step is round-half-to-even.

mod container;
mod kernels;

pub use container::{read_tensor, write_tensor, Tensor};
pub use kernels::{
    qconv2d_forward, qdepthwise_forward, qlinear_forward, ActClamp, Conv2dGeometry,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a tensor in row-major order.
///
/// Activations are `(N, C, H, W)`; conv weights are `(Cout, Cin, Kh, Kw)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("all dims must be >= 1, got {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn elem_count(&self) -> usize {
        self.0.iter().product()
    }

    /// Size of one channel slice when dim 0 is the channel axis.
    pub fn channel_stride(&self) -> usize {
        self.elem_count() / self.0[0]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense fp32 tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatTensor {
    pub shape: Shape,
    pub values: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.elem_count() {
            return Err(Error::Shape(format!(
                "value count {} does not match shape {shape}",
                values.len()
            )));
        }
        Ok(FloatTensor { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.elem_count();
        FloatTensor {
            shape,
            values: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

/// Scales and zero points attached to a quantized tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// One entry per output channel, or a single entry for per-tensor.
    pub scales: Vec<f32>,
    /// Same length as `scales`; always 0 for symmetric (weight) tensors.
    pub zero_points: Vec<i32>,
    pub granularity: Granularity,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32) -> Self {
        QuantParams {
            scales: vec![scale],
            zero_points: vec![zero_point],
            granularity: Granularity::PerTensor,
        }
    }

    pub fn per_channel(scales: Vec<f32>) -> Self {
        let zero_points = vec![0; scales.len()];
        QuantParams {
            scales,
            zero_points,
            granularity: Granularity::PerChannel,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let expect = match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => channels,
        };
        if self.scales.len() != expect || self.zero_points.len() != expect {
            return Err(Error::Quant(format!(
                "expected {expect} scales/zero points, got {}/{}",
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Quant("every scale must be finite and > 0".into()));
        }
        if self.zero_points.iter().any(|&z| !(-128..=127).contains(&z)) {
            return Err(Error::Quant("zero points must lie in [-128, 127]".into()));
        }
        Ok(())
    }

    /// Scale for a flat element index given the owning tensor's shape.
    pub fn scale_for(&self, shape: &Shape, index: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel => self.scales[index / shape.channel_stride()],
        }
    }

    pub fn zero_point_for(&self, shape: &Shape, index: usize) -> i32 {
        match self.granularity {
            Granularity::PerTensor => self.zero_points[0],
            Granularity::PerChannel => self.zero_points[index / shape.channel_stride()],
        }
    }
}

/// Integer payload of a quantized tensor. Biases and gradients are int32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantData {
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl QuantData {
    pub fn len(&self) -> usize {
        match self {
            QuantData::I8(v) => v.len(),
            QuantData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bit_width(&self) -> u8 {
        match self {
            QuantData::I8(_) => 8,
            QuantData::I32(_) => 32,
        }
    }

    pub fn get_i32(&self, index: usize) -> i32 {
        match self {
            QuantData::I8(v) => v[index] as i32,
            QuantData::I32(v) => v[index],
        }
    }
}

/// An integer tensor plus the parameters mapping it back to real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Shape,
    pub data: QuantData,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: Shape, data: QuantData, params: QuantParams) -> Result<Self> {
        if data.len() != shape.elem_count() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        params.validate(shape.dims()[0])?;
        Ok(QuantizedTensor {
            shape,
            data,
            params,
        })
    }

    pub fn i8_values(&self) -> Result<&[i8]> {
        match &self.data {
            QuantData::I8(v) => Ok(v),
            QuantData::I32(_) => Err(Error::Quant("expected int8 tensor, got int32".into())),
        }
    }

    pub fn i32_values(&self) -> Result<&[i32]> {
        match &self.data {
            QuantData::I32(v) => Ok(v),
            QuantData::I8(_) => Err(Error::Quant("expected int32 tensor, got int8".into())),
        }
    }

    /// Real value of one element.
    pub fn real(&self, index: usize) -> f32 {
        let q = self.data.get_i32(index);
        let s = self.params.scale_for(&self.shape, index);
        let z = self.params.zero_point_for(&self.shape, index);
        s * (q - z) as f32
    }
}

/// Admissible int8 range of a destination tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntRange {
    /// Symmetric weight range `[-127, 127]`.
    Symmetric,
    /// Full activation range `[-128, 127]`.
    Full,
}

impl IntRange {
    pub fn bounds(self) -> (i32, i32) {
        match self {
            IntRange::Symmetric => (-127, 127),
            IntRange::Full => (-128, 127),
        }
    }
}

/// Round-half-to-even, then saturate into the admissible int8 range.
pub fn cast2int8(v: f64, range: IntRange) -> i8 {
    let (lo, hi) = range.bounds();
    let r = v.round_ties_even();
    let r = r.clamp(lo as f64, hi as f64);
    r as i8
}

fn check_finite(t: &FloatTensor) -> Result<()> {
    if t.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Quant("input tensor contains non-finite values".into()));
    }
    Ok(())
}

/// Quantize a float tensor.
///
/// Symmetric mode computes `scale = max|x| / 127` per channel (dim 0) or per
/// tensor and clamps values to `[-127, 127]`. Asymmetric mode covers
/// `[min, max]` (extended to include 0 so padding is exact) with values in
/// `[-128, 127]`. An all-zero channel falls back to scale 1.0.
pub fn quantize(
    t: &FloatTensor,
    granularity: Granularity,
    symmetric: bool,
) -> Result<QuantizedTensor> {
    check_finite(t)?;
    let channels = match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => t.shape.dims()[0],
    };
    let stride = t.values.len() / channels;

    let mut scales = Vec::with_capacity(channels);
    let mut zero_points = Vec::with_capacity(channels);
    let mut data = vec![0i8; t.values.len()];

    for ch in 0..channels {
        let chunk = &t.values[ch * stride..(ch + 1) * stride];
        if symmetric {
            let max_abs = chunk.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
            for (i, &v) in chunk.iter().enumerate() {
                data[ch * stride + i] = cast2int8((v / scale) as f64, IntRange::Symmetric);
            }
            scales.push(scale);
            zero_points.push(0);
        } else {
            let mut lo = 0.0f32;
            let mut hi = 0.0f32;
            for &v in chunk {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let scale = if hi == lo { 1.0 } else { (hi - lo) / 255.0 };
            let zp = cast2int8(-128.0 - (lo / scale) as f64, IntRange::Full) as i32;
            for (i, &v) in chunk.iter().enumerate() {
                let q = (v / scale) as f64 + zp as f64;
                data[ch * stride + i] = cast2int8(q, IntRange::Full);
            }
            scales.push(scale);
            zero_points.push(zp);
        }
    }

    QuantizedTensor::new(
        t.shape.clone(),
        QuantData::I8(data),
        QuantParams {
            scales,
            zero_points,
            granularity,
        },
    )
}

/// Quantize a float bias vector into int32 with the given per-channel scales
/// (`s_w[o] * s_x`), zero point 0.
pub fn quantize_bias(b: &FloatTensor, scales: &[f32]) -> Result<QuantizedTensor> {
    check_finite(b)?;
    if b.values.len() != scales.len() {
        return Err(Error::Shape(format!(
            "bias length {} does not match {} scales",
            b.values.len(),
            scales.len()
        )));
    }
    let data: Vec<i32> = b
        .values
        .iter()
        .zip(scales)
        .map(|(&v, &s)| (v as f64 / s as f64).round_ties_even() as i32)
        .collect();
    QuantizedTensor::new(
        b.shape.clone(),
        QuantData::I32(data),
        QuantParams::per_channel(scales.to_vec()),
    )
}

/// Map a quantized tensor back to real values:
/// `value[i] = scale[ch(i)] * (q[i] - zero_point[ch(i)])`.
pub fn dequantize(q: &QuantizedTensor) -> FloatTensor {
    let values = (0..q.data.len()).map(|i| q.real(i)).collect();
    FloatTensor {
        shape: q.shape.clone(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn shape(dims: &[usize]) -> Shape {
        Shape::new(dims).unwrap()
    }

    #[test]
    fn shape_rejects_zero_dim() {
        assert!(Shape::new(&[2, 0, 3]).is_err());
        assert!(Shape::new(&[]).is_err());
    }

    #[test]
    fn quantize_scale_forced_to_one() {
        // channel values [0, 63.5, 127], max 127 -> scale 1.0, int8 [0, 64, 127]
        let t = FloatTensor::new(shape(&[1, 3]), vec![0.0, 63.5, 127.0]).unwrap();
        let q = quantize(&t, Granularity::PerChannel, true).unwrap();
        assert_eq!(q.params.scales, vec![1.0]);
        assert_eq!(q.i8_values().unwrap(), &[0, 64, 127]);
    }

    #[test]
    fn quantize_all_zero_channel_falls_back() {
        let t = FloatTensor::new(shape(&[2, 2]), vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let q = quantize(&t, Granularity::PerChannel, true).unwrap();
        assert_eq!(q.params.scales[0], 1.0);
        assert_eq!(&q.i8_values().unwrap()[..2], &[0, 0]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let t = FloatTensor::new(shape(&[1, 2]), vec![1.0, f32::NAN]).unwrap();
        assert!(quantize(&t, Granularity::PerTensor, true).is_err());
        let t = FloatTensor::new(shape(&[1, 2]), vec![1.0, f32::INFINITY]).unwrap();
        assert!(quantize(&t, Granularity::PerTensor, false).is_err());
    }

    #[test]
    fn dequantize_definition() {
        // int8 value 127, scale 0.02, zp 0 -> 2.54
        let q = QuantizedTensor::new(
            shape(&[1]),
            QuantData::I8(vec![127]),
            QuantParams::per_tensor(0.02, 0),
        )
        .unwrap();
        let f = dequantize(&q);
        assert!((f.values[0] - 2.54).abs() < 1e-6);

        // zp = 5, int8 value 5 -> 0.0 for any scale
        let q = QuantizedTensor::new(
            shape(&[1]),
            QuantData::I8(vec![5]),
            QuantParams::per_tensor(0.37, 5),
        )
        .unwrap();
        assert_eq!(dequantize(&q).values[0], 0.0);
    }

    #[test]
    fn round_trip_error_bound_random_channels() {
        // channel with max|w| = 2.54 -> scale 0.02; round-trip error <= scale/2
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let vals: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.54f32..=2.54)).collect();
            let mut vals = vals;
            vals[0] = 2.54; // pin the max so the scale is exact
            let t = FloatTensor::new(shape(&[1, 16]), vals.clone()).unwrap();
            let q = quantize(&t, Granularity::PerChannel, true).unwrap();
            let s = q.params.scales[0];
            assert!((s - 2.54 / 127.0).abs() < 1e-7);
            let f = dequantize(&q);
            for (a, b) in f.values.iter().zip(&vals) {
                assert!((a - b).abs() <= s / 2.0 + 1e-7, "error {} > {}", (a - b).abs(), s / 2.0);
            }
        }
    }

    #[test]
    fn cast2int8_examples() {
        assert_eq!(cast2int8(127.4, IntRange::Symmetric), 127);
        assert_eq!(cast2int8(300.0, IntRange::Symmetric), 127);
        assert_eq!(cast2int8(-300.0, IntRange::Symmetric), -127);
        assert_eq!(cast2int8(-300.0, IntRange::Full), -128);
        // round-half-to-even tie breaking
        assert_eq!(cast2int8(2.5, IntRange::Full), 2);
        assert_eq!(cast2int8(3.5, IntRange::Full), 4);
        assert_eq!(cast2int8(-2.5, IntRange::Full), -2);
    }

    #[test]
    fn bias_quantization_uses_product_scale() {
        let b = FloatTensor::new(shape(&[2]), vec![0.5, -1.0]).unwrap();
        let q = quantize_bias(&b, &[0.25, 0.5]).unwrap();
        assert_eq!(q.i32_values().unwrap(), &[2, -2]);
    }

    proptest! {
        #[test]
        fn prop_round_trip_bound(values in proptest::collection::vec(-100.0f32..100.0, 4..64)) {
            let n = values.len();
            let t = FloatTensor::new(shape(&[1, n]), values.clone()).unwrap();
            for (gran, sym) in [
                (Granularity::PerTensor, true),
                (Granularity::PerTensor, false),
                (Granularity::PerChannel, true),
            ] {
                let q = quantize(&t, gran, sym).unwrap();
                let f = dequantize(&q);
                for (i, (&a, &b)) in f.values.iter().zip(&values).enumerate() {
                    let s = q.params.scale_for(&t.shape, i);
                    prop_assert!((a - b).abs() <= s / 2.0 + s * 1e-5);
                }
            }
        }

        #[test]
        fn prop_weight_range_symmetric(values in proptest::collection::vec(-1e3f32..1e3, 4..64)) {
            let n = values.len();
            let t = FloatTensor::new(shape(&[2, n / 2]), values[..(n / 2) * 2].to_vec()).unwrap();
            let q = quantize(&t, Granularity::PerChannel, true).unwrap();
            for &v in q.i8_values().unwrap() {
                prop_assert!((-127..=127).contains(&(v as i32)));
            }
        }
    }

    #[test]
    fn asymmetric_covers_range_and_zero_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let vals: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0f32..5.0)).collect();
            let t = FloatTensor::new(shape(&[1, 32]), vals).unwrap();
            let q = quantize(&t, Granularity::PerTensor, false).unwrap();
            // zero must be exactly representable: dequantize(zp) == 0
            let zp = q.params.zero_points[0];
            let s = q.params.scales[0];
            assert_eq!(s * (zp - zp) as f32, 0.0);
            assert!((-128..=127).contains(&zp));
        }
    }
}
