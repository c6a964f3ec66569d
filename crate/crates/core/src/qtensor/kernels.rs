//! Bit-exact int8 forward kernels with int32 accumulation.
//!
//! All integer arithmetic is exact; the only float operation is the final
//! rescale (one multiply per output element) followed by round-half-to-even
//! and saturation. Identical inputs therefore produce bit-identical outputs
//! on every platform.

use crate::error::{Error, Result};
use crate::qtensor::{
    cast2int8, Granularity, IntRange, QuantData, QuantParams, QuantizedTensor, Shape,
};

/// Optional activation clamp fused into the output rescale, in real units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActClamp {
    pub lo: f32,
    pub hi: f32,
}

impl ActClamp {
    pub fn relu6() -> Self {
        ActClamp { lo: 0.0, hi: 6.0 }
    }

    /// Integer bounds of the clamp in the output grid.
    fn int_bounds(&self, scale: f32, zero_point: i32) -> (i32, i32) {
        let lo = zero_point + (self.lo as f64 / scale as f64).round_ties_even() as i32;
        let hi = zero_point + (self.hi as f64 / scale as f64).round_ties_even() as i32;
        (lo.max(-128), hi.min(127))
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw || self.stride == 0 {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

fn per_tensor_params(q: &QuantizedTensor, what: &str) -> Result<(f32, i32)> {
    if q.params.granularity != Granularity::PerTensor {
        return Err(Error::Quant(format!("{what} must be per-tensor quantized")));
    }
    Ok((q.params.scales[0], q.params.zero_points[0]))
}

fn weight_scale(w: &QuantizedTensor, channel: usize) -> f32 {
    match w.params.granularity {
        Granularity::PerTensor => w.params.scales[0],
        Granularity::PerChannel => w.params.scales[channel],
    }
}

fn check_bias(b: &QuantizedTensor, w: &QuantizedTensor, s_x: f32, out_ch: usize) -> Result<()> {
    if b.shape.dims() != [out_ch] {
        return Err(Error::Shape(format!(
            "bias shape {} does not match {out_ch} output channels",
            b.shape
        )));
    }
    for o in 0..out_ch {
        let expect = weight_scale(w, o) as f64 * s_x as f64;
        let got = b.params.scale_for(&b.shape, o) as f64;
        if (got - expect).abs() > expect.abs() * 1e-5 {
            return Err(Error::Quant(format!(
                "bias scale {got} does not match s_w*s_x = {expect} for channel {o}"
            )));
        }
    }
    Ok(())
}

/// Rescale one int32 accumulator into the output int8 grid.
///
/// Accumulation runs in a 64-bit register so overflow of the int32
/// accumulator contract is detected instead of wrapping; results are
/// bit-identical to int32 arithmetic whenever the value stays in range.
#[inline]
fn rescale(
    acc: i64,
    factor: f64,
    zp_out: i32,
    clamp: Option<(i32, i32)>,
) -> Result<i8> {
    if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
        return Err(Error::Numeric(
            "int32 accumulator overflow in quantized kernel".into(),
        ));
    }
    let v = zp_out as f64 + factor * acc as f64;
    let q = cast2int8(v, IntRange::Full) as i32;
    Ok(match clamp {
        Some((lo, hi)) => q.clamp(lo, hi) as i8,
        None => q as i8,
    })
}

/// `y[n,o] = cast2int8(zp_y + (s_w[o]*s_x/s_y) * (sum_i w[o,i]*(x[n,i]-zp_x) + b[o]))`
pub fn qlinear_forward(
    x: &QuantizedTensor,
    w: &QuantizedTensor,
    b: &QuantizedTensor,
    out_params: &QuantParams,
    act: Option<ActClamp>,
) -> Result<QuantizedTensor> {
    let (s_x, zp_x) = per_tensor_params(x, "linear input")?;
    let xd = x.shape.dims();
    let wd = w.shape.dims();
    if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
        return Err(Error::Shape(format!(
            "linear shapes do not conform: x {} vs w {}",
            x.shape, w.shape
        )));
    }
    let (batch, in_f) = (xd[0], xd[1]);
    let out_f = wd[0];
    check_bias(b, w, s_x, out_f)?;
    out_params.validate(1)?;
    let (s_y, zp_y) = (out_params.scales[0], out_params.zero_points[0]);

    let xs = x.i8_values()?;
    let ws = w.i8_values()?;
    let bs = b.i32_values()?;

    let mut out = vec![0i8; batch * out_f];
    for n in 0..batch {
        for o in 0..out_f {
            let mut acc: i64 = bs[o] as i64;
            let wrow = &ws[o * in_f..(o + 1) * in_f];
            let xrow = &xs[n * in_f..(n + 1) * in_f];
            for i in 0..in_f {
                acc += (wrow[i] as i32 * (xrow[i] as i32 - zp_x)) as i64;
            }
            let factor = weight_scale(w, o) as f64 * s_x as f64 / s_y as f64;
            let clamp = act.map(|a| a.int_bounds(s_y, zp_y));
            out[n * out_f + o] = rescale(acc, factor, zp_y, clamp)?;
        }
    }
    QuantizedTensor::new(
        Shape::new(&[batch, out_f])?,
        QuantData::I8(out),
        QuantParams::per_tensor(s_y, zp_y),
    )
}

/// Standard 2-D convolution, NCHW activations and OIHW weights.
pub fn qconv2d_forward(
    x: &QuantizedTensor,
    w: &QuantizedTensor,
    b: &QuantizedTensor,
    geom: Conv2dGeometry,
    out_params: &QuantParams,
    act: Option<ActClamp>,
) -> Result<QuantizedTensor> {
    let (s_x, zp_x) = per_tensor_params(x, "conv input")?;
    let xd = x.shape.dims();
    let wd = w.shape.dims();
    if xd.len() != 4 || wd.len() != 4 || xd[1] != wd[1] {
        return Err(Error::Shape(format!(
            "conv shapes do not conform: x {} vs w {}",
            x.shape, w.shape
        )));
    }
    let (batch, cin, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (cout, _, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    let (oh, ow) = geom.out_hw(h, wi, kh, kw)?;
    check_bias(b, w, s_x, cout)?;
    out_params.validate(1)?;
    let (s_y, zp_y) = (out_params.scales[0], out_params.zero_points[0]);

    let xs = x.i8_values()?;
    let ws = w.i8_values()?;
    let bs = b.i32_values()?;

    let mut out = vec![0i8; batch * cout * oh * ow];
    for n in 0..batch {
        for o in 0..cout {
            let factor = weight_scale(w, o) as f64 * s_x as f64 / s_y as f64;
            let clamp = act.map(|a| a.int_bounds(s_y, zp_y));
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: i64 = bs[o] as i64;
                    for c in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue; // zero padding contributes (zp - zp) = 0
                            }
                            for kx in 0..kw {
                                let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                if ix < 0 || ix >= wi as isize {
                                    continue;
                                }
                                let xv = xs[((n * cin + c) * h + iy as usize) * wi + ix as usize]
                                    as i32;
                                let wv = ws[((o * cin + c) * kh + ky) * kw + kx] as i32;
                                acc += (wv * (xv - zp_x)) as i64;
                            }
                        }
                    }
                    out[((n * cout + o) * oh + oy) * ow + ox] =
                        rescale(acc, factor, zp_y, clamp)?;
                }
            }
        }
    }
    QuantizedTensor::new(
        Shape::new(&[batch, cout, oh, ow])?,
        QuantData::I8(out),
        QuantParams::per_tensor(s_y, zp_y),
    )
}

/// Depthwise 2-D convolution: weights `(C, 1, Kh, Kw)`, one filter per channel.
pub fn qdepthwise_forward(
    x: &QuantizedTensor,
    w: &QuantizedTensor,
    b: &QuantizedTensor,
    geom: Conv2dGeometry,
    out_params: &QuantParams,
    act: Option<ActClamp>,
) -> Result<QuantizedTensor> {
    let (s_x, zp_x) = per_tensor_params(x, "depthwise input")?;
    let xd = x.shape.dims();
    let wd = w.shape.dims();
    if xd.len() != 4 || wd.len() != 4 || wd[1] != 1 || xd[1] != wd[0] {
        return Err(Error::Shape(format!(
            "depthwise shapes do not conform: x {} vs w {}",
            x.shape, w.shape
        )));
    }
    let (batch, ch, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (kh, kw) = (wd[2], wd[3]);
    let (oh, ow) = geom.out_hw(h, wi, kh, kw)?;
    check_bias(b, w, s_x, ch)?;
    out_params.validate(1)?;
    let (s_y, zp_y) = (out_params.scales[0], out_params.zero_points[0]);

    let xs = x.i8_values()?;
    let ws = w.i8_values()?;
    let bs = b.i32_values()?;

    let mut out = vec![0i8; batch * ch * oh * ow];
    for n in 0..batch {
        for c in 0..ch {
            let factor = weight_scale(w, c) as f64 * s_x as f64 / s_y as f64;
            let clamp = act.map(|a| a.int_bounds(s_y, zp_y));
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: i64 = bs[c] as i64;
                    for ky in 0..kh {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            let xv =
                                xs[((n * ch + c) * h + iy as usize) * wi + ix as usize] as i32;
                            let wv = ws[(c * kh + ky) * kw + kx] as i32;
                            acc += (wv * (xv - zp_x)) as i64;
                        }
                    }
                    out[((n * ch + c) * oh + oy) * ow + ox] =
                        rescale(acc, factor, zp_y, clamp)?;
                }
            }
        }
    }
    QuantizedTensor::new(
        Shape::new(&[batch, ch, oh, ow])?,
        QuantData::I8(out),
        QuantParams::per_tensor(s_y, zp_y),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::{quantize, FloatTensor, Granularity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(dims: &[usize]) -> Shape {
        Shape::new(dims).unwrap()
    }

    fn qt_i8(dims: &[usize], vals: Vec<i8>, params: QuantParams) -> QuantizedTensor {
        QuantizedTensor::new(shape(dims), QuantData::I8(vals), params).unwrap()
    }

    fn qt_i32(dims: &[usize], vals: Vec<i32>, scales: Vec<f32>) -> QuantizedTensor {
        QuantizedTensor::new(shape(dims), QuantData::I32(vals), QuantParams::per_channel(scales))
            .unwrap()
    }

    #[test]
    fn qlinear_identity_layer() {
        // W = identity with s_w = 1, b = 0, s_out = s_x -> output equals input.
        let n = 4;
        let x = qt_i8(&[1, n], vec![-5, 0, 17, 127], QuantParams::per_tensor(0.1, 3));
        let mut wv = vec![0i8; n * n];
        for i in 0..n {
            wv[i * n + i] = 1;
        }
        let w = qt_i8(&[n, n], wv, QuantParams::per_channel(vec![1.0; n]));
        let b = qt_i32(&[n], vec![0; n], vec![0.1; n]);
        let y = qlinear_forward(&x, &w, &b, &QuantParams::per_tensor(0.1, 3), None).unwrap();
        assert_eq!(y.i8_values().unwrap(), x.i8_values().unwrap());
    }

    #[test]
    fn qlinear_hand_arithmetic_1x1() {
        // x=10 (s_x=0.1), w=20 (s_w=0.05), b=0, s_out=0.1 -> acc 200, real 1.0, int8 10
        let x = qt_i8(&[1, 1], vec![10], QuantParams::per_tensor(0.1, 0));
        let w = qt_i8(&[1, 1], vec![20], QuantParams::per_channel(vec![0.05]));
        let b = qt_i32(&[1], vec![0], vec![0.05 * 0.1]);
        let y = qlinear_forward(&x, &w, &b, &QuantParams::per_tensor(0.1, 0), None).unwrap();
        assert_eq!(y.i8_values().unwrap(), &[10]);
    }

    #[test]
    fn qlinear_rejects_bias_scale_mismatch() {
        let x = qt_i8(&[1, 1], vec![10], QuantParams::per_tensor(0.1, 0));
        let w = qt_i8(&[1, 1], vec![20], QuantParams::per_channel(vec![0.05]));
        let b = qt_i32(&[1], vec![0], vec![0.02]);
        assert!(qlinear_forward(&x, &w, &b, &QuantParams::per_tensor(0.1, 0), None).is_err());
    }

    #[test]
    fn qlinear_rejects_shape_mismatch() {
        let x = qt_i8(&[1, 3], vec![1, 2, 3], QuantParams::per_tensor(0.1, 0));
        let w = qt_i8(&[1, 2], vec![1, 2], QuantParams::per_channel(vec![0.05]));
        let b = qt_i32(&[1], vec![0], vec![0.005]);
        assert!(qlinear_forward(&x, &w, &b, &QuantParams::per_tensor(0.1, 0), None).is_err());
    }

    #[test]
    fn bias_linearity_in_int32() {
        // qlinear(x, w, b1+b2) == accumulating b1 then adding b2 before rescale
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (i, o) = (6, 3);
        let xv: Vec<i8> = (0..i).map(|_| rng.gen_range(-128i32..=127) as i8).collect();
        let wv: Vec<i8> = (0..i * o).map(|_| rng.gen_range(-127i32..=127) as i8).collect();
        let b1: Vec<i32> = (0..o).map(|_| rng.gen_range(-500..500)).collect();
        let b2: Vec<i32> = (0..o).map(|_| rng.gen_range(-500..500)).collect();
        let bsum: Vec<i32> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();

        let x = qt_i8(&[1, i], xv, QuantParams::per_tensor(0.07, -4));
        let w = qt_i8(&[o, i], wv, QuantParams::per_channel(vec![0.03, 0.05, 0.02]));
        let bscales: Vec<f32> = [0.03f32, 0.05, 0.02].iter().map(|s| s * 0.07).collect();
        let out = QuantParams::per_tensor(0.2, 1);

        let y_sum = qlinear_forward(&x, &w, &qt_i32(&[o], bsum, bscales.clone()), &out, None)
            .unwrap();

        // reference: accumulate with b1, add b2 before rescale
        let mut accs = vec![0i32; o];
        for oo in 0..o {
            let mut acc = b1[oo];
            for ii in 0..i {
                acc += w.i8_values().unwrap()[oo * i + ii] as i32
                    * (x.i8_values().unwrap()[ii] as i32 + 4);
            }
            accs[oo] = acc + b2[oo];
        }
        for oo in 0..o {
            let factor = w.params.scales[oo] as f64 * 0.07 / 0.2;
            let expect = rescale(accs[oo] as i64, factor, 1, None).unwrap();
            assert_eq!(y_sum.i8_values().unwrap()[oo], expect);
        }
    }

    /// Independent reference: materialize the padded input, then direct loops.
    fn conv_reference(
        x: &QuantizedTensor,
        w: &QuantizedTensor,
        b: &QuantizedTensor,
        geom: Conv2dGeometry,
        out: &QuantParams,
        depthwise: bool,
    ) -> Vec<i8> {
        let xd = x.shape.dims();
        let wd = w.shape.dims();
        let (batch, cin, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
        let (kh, kw) = (wd[2], wd[3]);
        let cout = wd[0];
        let zp_x = x.params.zero_points[0];
        let (ph, pw) = (h + 2 * geom.padding, wi + 2 * geom.padding);
        // padded buffer holds (x - zp) directly, padding = 0
        let mut padded = vec![0i32; batch * cin * ph * pw];
        let xs = x.i8_values().unwrap();
        for n in 0..batch {
            for c in 0..cin {
                for y in 0..h {
                    for xx in 0..wi {
                        padded[((n * cin + c) * ph + y + geom.padding) * pw + xx + geom.padding] =
                            xs[((n * cin + c) * h + y) * wi + xx] as i32 - zp_x;
                    }
                }
            }
        }
        let (oh, ow) = geom.out_hw(h, wi, kh, kw).unwrap();
        let ws = w.i8_values().unwrap();
        let bs = b.i32_values().unwrap();
        let mut res = vec![0i8; batch * cout * oh * ow];
        for n in 0..batch {
            for o in 0..cout {
                let s_w = w.params.scale_for(&w.shape, o * w.shape.channel_stride());
                let factor = s_w as f64 * x.params.scales[0] as f64 / out.scales[0] as f64;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bs[o];
                        let crange: Vec<usize> = if depthwise { vec![o] } else { (0..cin).collect() };
                        for (wc, &c) in crange.iter().enumerate() {
                            let wc = if depthwise { 0 } else { wc };
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let pv = padded[((n * cin + c) * ph + oy * geom.stride + ky)
                                        * pw
                                        + ox * geom.stride
                                        + kx];
                                    acc += ws[((o * wd[1] + wc) * kh + ky) * kw + kx] as i32 * pv;
                                }
                            }
                        }
                        res[((n * cout + o) * oh + oy) * ow + ox] =
                            rescale(acc as i64, factor, out.zero_points[0], None).unwrap();
                    }
                }
            }
        }
        res
    }

    #[test]
    fn qconv2d_matches_reference_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..100 {
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..5);
            let k = [1, 3][rng.gen_range(0..2)];
            let h = rng.gen_range(k..8);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let geom = Conv2dGeometry { stride, padding: pad };
            if geom.out_hw(h, h, k, k).is_err() {
                continue;
            }
            let xf = FloatTensor::new(
                shape(&[1, cin, h, h]),
                (0..cin * h * h).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            )
            .unwrap();
            let x = quantize(&xf, Granularity::PerTensor, false).unwrap();
            let wf = FloatTensor::new(
                shape(&[cout, cin, k, k]),
                (0..cout * cin * k * k).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
            )
            .unwrap();
            let w = quantize(&wf, Granularity::PerChannel, true).unwrap();
            let bscales: Vec<f32> = w.params.scales.iter().map(|s| s * x.params.scales[0]).collect();
            let bf = FloatTensor::new(
                shape(&[cout]),
                (0..cout).map(|_| rng.gen_range(-0.2f32..0.2)).collect(),
            )
            .unwrap();
            let b = crate::qtensor::quantize_bias(&bf, &bscales).unwrap();
            let out = QuantParams::per_tensor(rng.gen_range(0.01f32..0.1), rng.gen_range(-10..10));
            let y = qconv2d_forward(&x, &w, &b, geom, &out, None).unwrap();
            let reference = conv_reference(&x, &w, &b, geom, &out, false);
            assert_eq!(y.i8_values().unwrap(), &reference[..], "case {case}");
        }
    }

    #[test]
    fn qdepthwise_matches_reference_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for case in 0..100 {
            let ch = rng.gen_range(1..5);
            let k = 3;
            let h = rng.gen_range(3..8);
            let geom = Conv2dGeometry { stride: rng.gen_range(1..3), padding: 1 };
            let xf = FloatTensor::new(
                shape(&[1, ch, h, h]),
                (0..ch * h * h).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            )
            .unwrap();
            let x = quantize(&xf, Granularity::PerTensor, false).unwrap();
            let wf = FloatTensor::new(
                shape(&[ch, 1, k, k]),
                (0..ch * k * k).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
            )
            .unwrap();
            let w = quantize(&wf, Granularity::PerChannel, true).unwrap();
            let bscales: Vec<f32> = w.params.scales.iter().map(|s| s * x.params.scales[0]).collect();
            let b = crate::qtensor::quantize_bias(
                &FloatTensor::zeros(shape(&[ch])),
                &bscales,
            )
            .unwrap();
            let out = QuantParams::per_tensor(0.05, 0);
            let y = qdepthwise_forward(&x, &w, &b, geom, &out, None).unwrap();
            let reference = conv_reference(&x, &w, &b, geom, &out, true);
            assert_eq!(y.i8_values().unwrap(), &reference[..], "case {case}");
        }
    }

    #[test]
    fn relu6_clamp_bounds() {
        // s_y = 0.05, zp = -10: q(0) = -10, q(6) = -10 + 120 = 110
        let clamp = ActClamp::relu6().int_bounds(0.05, -10);
        assert_eq!(clamp, (-10, 110));
        // clamp saturates into the int8 range
        let clamp = ActClamp::relu6().int_bounds(0.02, 0);
        assert_eq!(clamp.1, 127);
    }

    #[test]
    fn determinism_repeated_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = qt_i8(
            &[1, 2, 5, 5],
            (0..50).map(|_| rng.gen_range(-128i32..=127) as i8).collect(),
            QuantParams::per_tensor(0.04, 2),
        );
        let w = qt_i8(
            &[3, 2, 3, 3],
            (0..54).map(|_| rng.gen_range(-127i32..=127) as i8).collect(),
            QuantParams::per_channel(vec![0.01, 0.02, 0.03]),
        );
        let b = qt_i32(&[3], vec![10, -20, 30], vec![0.0004, 0.0008, 0.0012]);
        let geom = Conv2dGeometry { stride: 1, padding: 1 };
        let out = QuantParams::per_tensor(0.07, -1);
        let y1 = qconv2d_forward(&x, &w, &b, geom, &out, Some(ActClamp::relu6())).unwrap();
        let y2 = qconv2d_forward(&x, &w, &b, geom, &out, Some(ActClamp::relu6())).unwrap();
        assert_eq!(y1, y2);
    }
}
