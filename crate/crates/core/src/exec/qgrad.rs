//! Integer backward kernels.
//!
//! Formulation: the incoming activation gradient is int8 with one dynamic
//! scale. Input-gradient kernels first fold the per-channel weight scales
//! into the gradient (one exact float product per element), requantize to
//! int8, run a pure int8 x int8 -> int32 matmul against the weight values,
//! and renormalize the int32 result back to int8. Weight-gradient kernels
//! are a single int8 x int8 -> int32 accumulation whose output keeps scale
//! `s_g * s_x` and feeds GradDescent directly.

use crate::error::{Error, Result};
use crate::qtensor::{
    Conv2dGeometry, Granularity, QuantData, QuantParams, QuantizedTensor, Shape,
};

/// Symmetric dynamic requantization of real-valued gradients to int8.
/// All-zero input keeps scale 1.0.
pub fn requantize_real(reals: &[f64], shape: &Shape) -> Result<QuantizedTensor> {
    let max_abs = reals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if !max_abs.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let data: Vec<i8> = reals
        .iter()
        .map(|&v| (v / scale).round_ties_even() as i8)
        .collect();
    QuantizedTensor::new(
        shape.clone(),
        QuantData::I8(data),
        QuantParams::per_tensor(scale as f32, 0),
    )
}

/// int32 -> int8 renormalization used on grad-input accumulators. The
/// accumulators arrive as i64 registers; values beyond the int32 contract
/// are a numeric error.
fn requantize_i32(acc: &[i64], base_scale: f64, shape: &Shape) -> Result<QuantizedTensor> {
    if acc.iter().any(|&v| v > i32::MAX as i64 || v < i32::MIN as i64) {
        return Err(Error::Numeric(
            "int32 accumulator overflow in gradient kernel".into(),
        ));
    }
    let max_abs = acc.iter().fold(0i64, |m, &v| m.max(v.abs()));
    if max_abs == 0 {
        return QuantizedTensor::new(
            shape.clone(),
            QuantData::I8(vec![0; acc.len()]),
            QuantParams::per_tensor(base_scale as f32, 0),
        );
    }
    let scale = base_scale * max_abs as f64 / 127.0;
    let factor = 127.0 / max_abs as f64;
    let data: Vec<i8> = acc
        .iter()
        .map(|&v| (v as f64 * factor).round_ties_even() as i8)
        .collect();
    QuantizedTensor::new(
        shape.clone(),
        QuantData::I8(data),
        QuantParams::per_tensor(scale as f32, 0),
    )
}

/// Quantize a float gradient into the int8 gradient domain. Gradients are
/// carried in real units throughout the backward graph, so no scale folds
/// in here.
pub fn quantize_gradient(values: &[f32], shape: &Shape) -> Result<QuantizedTensor> {
    let reals: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    requantize_real(&reals, shape)
}

fn grad_scale(g: &QuantizedTensor) -> Result<f64> {
    if g.params.granularity != Granularity::PerTensor || g.params.zero_points[0] != 0 {
        return Err(Error::Quant("gradients must be per-tensor symmetric".into()));
    }
    Ok(g.params.scales[0] as f64)
}

fn weight_scales(w: &QuantizedTensor) -> Vec<f64> {
    let cout = w.shape.dims()[0];
    match w.params.granularity {
        Granularity::PerTensor => vec![w.params.scales[0] as f64; cout],
        Granularity::PerChannel => w.params.scales.iter().map(|&s| s as f64).collect(),
    }
}

/// Fold per-output-channel weight scales and the gradient scale into the
/// int8 gradient, then requantize: `h = s_w[o] * s_g * g[o]`.
fn fold_requantize(
    g: &QuantizedTensor,
    s_w: &[f64],
    channel_of: impl Fn(usize) -> usize,
) -> Result<(Vec<i8>, f64)> {
    let s_g = grad_scale(g)?;
    let gs = g.i8_values()?;
    let reals: Vec<f64> = gs
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 * s_g * s_w[channel_of(i)])
        .collect();
    let max_abs = reals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let data: Vec<i8> = reals
        .iter()
        .map(|&v| (v / scale).round_ties_even() as i8)
        .collect();
    Ok((data, scale))
}

/// `G_x[n,i] = sum_o W[o,i] * h[n,o]` with `h` the folded gradient.
pub fn linear_grad_input(g: &QuantizedTensor, w: &QuantizedTensor) -> Result<QuantizedTensor> {
    let (n, o) = (g.shape.dims()[0], g.shape.dims()[1]);
    let i = w.shape.dims()[1];
    let s_w = weight_scales(w);
    let (h, s_h) = fold_requantize(g, &s_w, |flat| flat % o)?;
    let ws = w.i8_values()?;
    let mut acc = vec![0i64; n * i];
    for nn in 0..n {
        for oo in 0..o {
            let hv = h[nn * o + oo] as i32;
            if hv == 0 {
                continue;
            }
            for ii in 0..i {
                acc[nn * i + ii] += (ws[oo * i + ii] as i32 * hv) as i64;
            }
        }
    }
    requantize_i32(&acc, s_h, &Shape::new(&[n, i])?)
}

/// `G_W[o,i] = sum_n g[n,o] * (x[n,i] - zp_x)`, scale `s_g * s_x`.
pub fn linear_grad_weight(g: &QuantizedTensor, x: &QuantizedTensor) -> Result<QuantizedTensor> {
    let (n, o) = (g.shape.dims()[0], g.shape.dims()[1]);
    let i = x.shape.dims()[1];
    let s_g = grad_scale(g)?;
    let s_x = x.params.scales[0] as f64;
    let zp_x = x.params.zero_points[0];
    let gs = g.i8_values()?;
    let xs = x.i8_values()?;
    let mut acc = vec![0i64; o * i];
    for nn in 0..n {
        for oo in 0..o {
            let gv = gs[nn * o + oo] as i32;
            if gv == 0 {
                continue;
            }
            for ii in 0..i {
                acc[oo * i + ii] += (gv * (xs[nn * i + ii] as i32 - zp_x)) as i64;
            }
        }
    }
    QuantizedTensor::new(
        Shape::new(&[o, i])?,
        QuantData::I32(into_i32(acc)?),
        QuantParams::per_tensor((s_g * s_x) as f32, 0),
    )
}

/// Transposed convolution of the folded gradient against the weights.
pub fn conv_grad_input(
    g: &QuantizedTensor,
    w: &QuantizedTensor,
    geom: Conv2dGeometry,
    in_hw: (usize, usize),
    depthwise: bool,
) -> Result<QuantizedTensor> {
    let gd = g.shape.dims();
    let wd = w.shape.dims();
    let (n, cout, oh, ow) = (gd[0], gd[1], gd[2], gd[3]);
    let cin = if depthwise { cout } else { wd[1] };
    let (kh, kw) = (wd[2], wd[3]);
    let (h, wi) = in_hw;
    let s_w = weight_scales(w);
    let spatial = oh * ow;
    let (hbuf, s_h) = fold_requantize(g, &s_w, |flat| (flat / spatial) % cout)?;
    let ws = w.i8_values()?;
    let mut acc = vec![0i64; n * cin * h * wi];
    for nn in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let hv = hbuf[((nn * cout + o) * oh + oy) * ow + ox] as i32;
                    if hv == 0 {
                        continue;
                    }
                    let channels: Vec<usize> = if depthwise { vec![o] } else { (0..cin).collect() };
                    for (wc, &c) in channels.iter().enumerate() {
                        let wc = if depthwise { 0 } else { wc };
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
                                acc[((nn * cin + c) * h + iy as usize) * wi + ix as usize] +=
                                    (ws[((o * wd[1] + wc) * kh + ky) * kw + kx] as i32 * hv)
                                        as i64;
                            }
                        }
                    }
                }
            }
        }
    }
    requantize_i32(&acc, s_h, &Shape::new(&[n, cin, h, wi])?)
}

/// `G_W[o,c,ky,kx] = sum_{n,oy,ox} g[n,o,oy,ox] * (x[n,c,...] - zp_x)`.
pub fn conv_grad_weight(
    g: &QuantizedTensor,
    x: &QuantizedTensor,
    geom: Conv2dGeometry,
    khw: (usize, usize),
    depthwise: bool,
) -> Result<QuantizedTensor> {
    let gd = g.shape.dims();
    let xd = x.shape.dims();
    let (n, cout, oh, ow) = (gd[0], gd[1], gd[2], gd[3]);
    let cin = xd[1];
    let (h, wi) = (xd[2], xd[3]);
    let (kh, kw) = khw;
    let wcin = if depthwise { 1 } else { cin };
    let s_g = grad_scale(g)?;
    let s_x = x.params.scales[0] as f64;
    let zp_x = x.params.zero_points[0];
    let gs = g.i8_values()?;
    let xs = x.i8_values()?;
    let mut acc = vec![0i64; cout * wcin * kh * kw];
    for nn in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gs[((nn * cout + o) * oh + oy) * ow + ox] as i32;
                    if gv == 0 {
                        continue;
                    }
                    let channels: Vec<usize> = if depthwise { vec![o] } else { (0..cin).collect() };
                    for (wc, &c) in channels.iter().enumerate() {
                        let wc = if depthwise { 0 } else { wc };
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
                                acc[((o * wcin + wc) * kh + ky) * kw + kx] += (gv
                                    * (xs[((nn * cin + c) * h + iy as usize) * wi + ix as usize]
                                        as i32
                                        - zp_x)) as i64;
                            }
                        }
                    }
                }
            }
        }
    }
    QuantizedTensor::new(
        Shape::new(&[cout, wcin, kh, kw])?,
        QuantData::I32(into_i32(acc)?),
        QuantParams::per_tensor((s_g * s_x) as f32, 0),
    )
}

fn into_i32(acc: Vec<i64>) -> Result<Vec<i32>> {
    acc.into_iter()
        .map(|v| {
            i32::try_from(v).map_err(|_| {
                Error::Numeric("int32 accumulator overflow in gradient kernel".into())
            })
        })
        .collect()
}
