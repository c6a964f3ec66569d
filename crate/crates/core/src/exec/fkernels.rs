//! fp32 kernels for the classifier head, the float twin of the backbone,
//! and their backward passes. Accumulation is f64 for deterministic,
//! order-independent-enough reductions; storage stays f32.

use crate::error::{Error, Result};
use crate::qtensor::{Conv2dGeometry, FloatTensor, Shape};

pub fn linear_forward(
    x: &FloatTensor,
    w: &FloatTensor,
    b: &FloatTensor,
    act: Option<(f32, f32)>,
) -> FloatTensor {
    let (n, i) = (x.shape.dims()[0], x.shape.dims()[1]);
    let o = w.shape.dims()[0];
    let mut out = vec![0.0f32; n * o];
    for nn in 0..n {
        for oo in 0..o {
            let mut acc = b.values[oo] as f64;
            for ii in 0..i {
                acc += x.values[nn * i + ii] as f64 * w.values[oo * i + ii] as f64;
            }
            let mut v = acc as f32;
            if let Some((lo, hi)) = act {
                v = v.clamp(lo, hi);
            }
            out[nn * o + oo] = v;
        }
    }
    FloatTensor {
        shape: Shape::new(&[n, o]).unwrap(),
        values: out,
    }
}

/// `G_x = G_y * W`
pub fn linear_grad_input(g: &FloatTensor, w: &FloatTensor) -> Result<FloatTensor> {
    let (n, o) = (g.shape.dims()[0], g.shape.dims()[1]);
    let i = w.shape.dims()[1];
    let mut out = vec![0.0f32; n * i];
    for nn in 0..n {
        for ii in 0..i {
            let mut acc = 0.0f64;
            for oo in 0..o {
                acc += g.values[nn * o + oo] as f64 * w.values[oo * i + ii] as f64;
            }
            out[nn * i + ii] = acc as f32;
        }
    }
    Ok(FloatTensor::new(Shape::new(&[n, i])?, out)?)
}

/// `G_W = G_y^T * x`
pub fn linear_grad_weight(g: &FloatTensor, x: &FloatTensor) -> Result<FloatTensor> {
    let (n, o) = (g.shape.dims()[0], g.shape.dims()[1]);
    let i = x.shape.dims()[1];
    let mut out = vec![0.0f32; o * i];
    for oo in 0..o {
        for ii in 0..i {
            let mut acc = 0.0f64;
            for nn in 0..n {
                acc += g.values[nn * o + oo] as f64 * x.values[nn * i + ii] as f64;
            }
            out[oo * i + ii] = acc as f32;
        }
    }
    Ok(FloatTensor::new(Shape::new(&[o, i])?, out)?)
}

pub fn conv2d_forward(
    x: &FloatTensor,
    w: &FloatTensor,
    b: &FloatTensor,
    geom: Conv2dGeometry,
    act: Option<(f32, f32)>,
    depthwise: bool,
) -> Result<FloatTensor> {
    let xd = x.shape.dims();
    let wd = w.shape.dims();
    let (n, cin, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let (cout, kh, kw) = (wd[0], wd[2], wd[3]);
    let (oh, ow) = geom.out_hw(h, wi, kh, kw)?;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for nn in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.values[o] as f64;
                    let crange: &[usize] = if depthwise { &[o] } else { &[] };
                    let channels: Vec<usize> =
                        if depthwise { crange.to_vec() } else { (0..cin).collect() };
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
                                let xv = x.values
                                    [((nn * cin + c) * h + iy as usize) * wi + ix as usize];
                                let wv = w.values[((o * wd[1] + wc) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    let mut v = acc as f32;
                    if let Some((lo, hi)) = act {
                        v = v.clamp(lo, hi);
                    }
                    out[((nn * cout + o) * oh + oy) * ow + ox] = v;
                }
            }
        }
    }
    Ok(FloatTensor::new(Shape::new(&[n, cout, oh, ow])?, out)?)
}

/// Transposed convolution scattering `g` back through `w`.
pub fn conv_grad_input(
    g: &FloatTensor,
    w: &FloatTensor,
    geom: Conv2dGeometry,
    in_hw: (usize, usize),
    depthwise: bool,
) -> Result<FloatTensor> {
    let gd = g.shape.dims();
    let wd = w.shape.dims();
    let (n, cout, oh, ow) = (gd[0], gd[1], gd[2], gd[3]);
    let cin = if depthwise { cout } else { wd[1] };
    let (kh, kw) = (wd[2], wd[3]);
    let (h, wi) = in_hw;
    let mut acc = vec![0.0f64; n * cin * h * wi];
    for nn in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.values[((nn * cout + o) * oh + oy) * ow + ox] as f64;
                    if gv == 0.0 {
                        continue;
                    }
                    let channels: Vec<usize> =
                        if depthwise { vec![o] } else { (0..cin).collect() };
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
                                acc[((nn * cin + c) * h + iy as usize) * wi + ix as usize] += gv
                                    * w.values[((o * wd[1] + wc) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(FloatTensor::new(
        Shape::new(&[n, cin, h, wi])?,
        acc.into_iter().map(|v| v as f32).collect(),
    )?)
}

pub fn conv_grad_weight(
    g: &FloatTensor,
    x: &FloatTensor,
    geom: Conv2dGeometry,
    khw: (usize, usize),
    depthwise: bool,
) -> Result<FloatTensor> {
    let gd = g.shape.dims();
    let xd = x.shape.dims();
    let (n, cout, oh, ow) = (gd[0], gd[1], gd[2], gd[3]);
    let cin = xd[1];
    let (h, wi) = (xd[2], xd[3]);
    let (kh, kw) = khw;
    let wcin = if depthwise { 1 } else { cin };
    let mut acc = vec![0.0f64; cout * wcin * kh * kw];
    for nn in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.values[((nn * cout + o) * oh + oy) * ow + ox] as f64;
                    if gv == 0.0 {
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
                                acc[((o * wcin + wc) * kh + ky) * kw + kx] += gv
                                    * x.values[((nn * cin + c) * h + iy as usize) * wi
                                        + ix as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(FloatTensor::new(
        Shape::new(&[cout, wcin, kh, kw])?,
        acc.into_iter().map(|v| v as f32).collect(),
    )?)
}

/// Mean cross-entropy over the batch, computed in f64 with max-shifted
/// softmax for stability.
pub fn softmax_cross_entropy(logits: &FloatTensor, labels: &[i32]) -> Result<f64> {
    let (n, c) = (logits.shape.dims()[0], logits.shape.dims()[1]);
    if labels.len() != n {
        return Err(Error::Shape("label count does not match batch".into()));
    }
    let mut total = 0.0f64;
    for nn in 0..n {
        let label = labels[nn];
        if label < 0 || label as usize >= c {
            return Err(Error::Numeric(format!("label {label} out of range 0..{c}")));
        }
        let row = &logits.values[nn * c..(nn + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        total += m + sum.ln() - row[label as usize] as f64;
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("NaN loss in cross-entropy".into()));
    }
    Ok(loss)
}

/// `(softmax - onehot) / N`
pub fn softmax_cross_entropy_grad(logits: &FloatTensor, labels: &[i32]) -> Result<FloatTensor> {
    let (n, c) = (logits.shape.dims()[0], logits.shape.dims()[1]);
    let mut out = vec![0.0f32; n * c];
    for nn in 0..n {
        let row = &logits.values[nn * c..(nn + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for cc in 0..c {
            let p = exps[cc] / sum;
            let onehot = if labels[nn] as usize == cc { 1.0 } else { 0.0 };
            out[nn * c + cc] = ((p - onehot) / n as f64) as f32;
        }
    }
    Ok(FloatTensor::new(logits.shape.clone(), out)?)
}
