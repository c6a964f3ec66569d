//! Parameter-update realization shared by inline GradDescent execution and
//! the training loop.
//!
//! The engine's backward kernels produce gradients in real units
//! (`dL/d real-value`). The quantized update operates on the gradient of the
//! integer values, `G_q = s * G_real` per channel, and realizes
//! `q' = cast2int8(q - round(alpha * G~))` where `G~` is `G_q` after
//! optional quantization-aware scaling. With QAS the realized real-unit
//! change is exactly `alpha * G_real`, the fp32 SGD step.

use crate::error::{Error, Result};
use crate::qtensor::{QuantData, QuantizedTensor, Tensor};
use crate::train::qas;

#[derive(Debug, Clone, Copy)]
pub struct UpdateRule {
    pub lr: f64,
    pub qas: bool,
}

/// Raw gradient values in real units.
pub fn grad_to_real(grad: &Tensor) -> Vec<f64> {
    match grad {
        Tensor::Float(f) => f.values.iter().map(|&v| v as f64).collect(),
        Tensor::Quant(q) => (0..q.data.len())
            .map(|i| q.data.get_i32(i) as f64 * q.params.scale_for(&q.shape, i) as f64)
            .collect(),
    }
}

/// Convert a real-unit gradient into the gradient of the parameter's integer
/// values: `G_q = s * G_real` per channel. Float parameters are unchanged.
pub fn to_quant_domain(param: &Tensor, grad_real: &mut [f64]) {
    if let Tensor::Quant(q) = param {
        for (i, g) in grad_real.iter_mut().enumerate() {
            *g *= q.params.scale_for(&q.shape, i) as f64;
        }
    }
}

/// Apply a step expressed in the parameter's own grid: integer quanta for
/// quantized tensors (round-half-to-even, saturate), real units for float
/// tensors. Returns the updated tensor and the count of elements whose
/// nonzero step rounded to a zero integer delta.
pub fn apply_step(param: &Tensor, step: &[f64]) -> Result<(Tensor, u64)> {
    match param {
        Tensor::Float(f) => {
            if step.len() != f.values.len() {
                return Err(Error::Shape("step length mismatch".into()));
            }
            let values = f
                .values
                .iter()
                .zip(step)
                .map(|(&v, &s)| (v as f64 - s) as f32)
                .collect();
            Ok((
                Tensor::Float(crate::qtensor::FloatTensor::new(f.shape.clone(), values)?),
                0,
            ))
        }
        Tensor::Quant(q) => {
            if step.len() != q.data.len() {
                return Err(Error::Shape("step length mismatch".into()));
            }
            let mut zero_delta = 0u64;
            match &q.data {
                QuantData::I8(values) => {
                    let mut out = Vec::with_capacity(values.len());
                    for (i, &w) in values.iter().enumerate() {
                        let delta = step[i].round_ties_even();
                        if delta == 0.0 && step[i] != 0.0 {
                            zero_delta += 1;
                        }
                        // symmetric weight range, no wraparound
                        let v = (w as f64 - delta).clamp(-127.0, 127.0);
                        out.push(v as i8);
                    }
                    Ok((
                        Tensor::Quant(QuantizedTensor::new(
                            q.shape.clone(),
                            QuantData::I8(out),
                            q.params.clone(),
                        )?),
                        zero_delta,
                    ))
                }
                QuantData::I32(values) => {
                    let mut out = Vec::with_capacity(values.len());
                    for (i, &b) in values.iter().enumerate() {
                        let delta = step[i].round_ties_even();
                        if delta == 0.0 && step[i] != 0.0 {
                            zero_delta += 1;
                        }
                        let v = (b as f64 - delta).clamp(i32::MIN as f64, i32::MAX as f64);
                        out.push(v as i32);
                    }
                    Ok((
                        Tensor::Quant(QuantizedTensor::new(
                            q.shape.clone(),
                            QuantData::I32(out),
                            q.params.clone(),
                        )?),
                        zero_delta,
                    ))
                }
            }
        }
    }
}

/// One plain SGD step on a single parameter, the inline GradDescent semantic.
pub fn sgd_update(param: &Tensor, grad: &Tensor, rule: &UpdateRule) -> Result<(Tensor, u64)> {
    if rule.lr < 0.0 {
        return Err(Error::Config("learning rate must be >= 0".into()));
    }
    let mut g = grad_to_real(grad);
    to_quant_domain(param, &mut g);
    if rule.qas {
        qas::qas_for_param(param, &mut g);
    }
    for v in &mut g {
        *v *= rule.lr;
    }
    apply_step(param, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::{QuantParams, Shape};

    fn weight(vals: Vec<i8>, scales: Vec<f32>) -> Tensor {
        let n = vals.len();
        Tensor::Quant(
            QuantizedTensor::new(
                Shape::new(&[n]).unwrap(),
                QuantData::I8(vals),
                QuantParams::per_channel(scales),
            )
            .unwrap(),
        )
    }

    fn grad_i32(vals: Vec<i32>, scale: f32) -> Tensor {
        let n = vals.len();
        Tensor::Quant(
            QuantizedTensor::new(
                Shape::new(&[n]).unwrap(),
                QuantData::I32(vals),
                QuantParams::per_tensor(scale, 0),
            )
            .unwrap(),
        )
    }

    #[test]
    fn sgd_direct_formula() {
        // weight 100, scale 1, G~ = 5.0, lr 1 -> cast2int8(100 - 5) = 95
        let w = weight(vec![100], vec![1.0]);
        let g = grad_i32(vec![5], 1.0);
        let (updated, zd) = sgd_update(&w, &g, &UpdateRule { lr: 1.0, qas: false }).unwrap();
        match updated {
            Tensor::Quant(q) => assert_eq!(q.i8_values().unwrap(), &[95]),
            _ => panic!(),
        }
        assert_eq!(zd, 0);
    }

    #[test]
    fn qas_update_realizes_fp32_step() {
        // with QAS the real-unit change equals lr * G_real regardless of the
        // weight scale: scale 0.25, G_real = 1.0, lr = 1 -> real change 1.0,
        // i.e. 4 quanta
        let w = weight(vec![0], vec![0.25]);
        let g = grad_i32(vec![1000], 0.001); // G_real = 1.0
        let (updated, _) = sgd_update(&w, &g, &UpdateRule { lr: 1.0, qas: true }).unwrap();
        match updated {
            Tensor::Quant(q) => assert_eq!(q.i8_values().unwrap(), &[-4]),
            _ => panic!(),
        }
    }

    #[test]
    fn non_qas_update_follows_raw_quantized_gradient() {
        // without QAS: delta = lr * s_W * G_real = 1 * 0.5 * 8 = 4
        let w = weight(vec![10], vec![0.5]);
        let g = grad_i32(vec![8000], 0.001); // G_real = 8.0
        let (updated, _) = sgd_update(&w, &g, &UpdateRule { lr: 1.0, qas: false }).unwrap();
        match updated {
            Tensor::Quant(q) => assert_eq!(q.i8_values().unwrap(), &[6]),
            _ => panic!(),
        }
    }

    #[test]
    fn zero_lr_leaves_params_bit_unchanged() {
        let w = weight(vec![100, -3], vec![0.5, 0.25]);
        let g = grad_i32(vec![7, -9], 0.125);
        let (updated, _) = sgd_update(&w, &g, &UpdateRule { lr: 0.0, qas: true }).unwrap();
        assert_eq!(updated, w);
    }

    #[test]
    fn saturation_no_wraparound() {
        let w = weight(vec![120, -120], vec![1.0, 1.0]);
        let g = grad_i32(vec![-100, 100], 1.0);
        let (updated, _) = sgd_update(&w, &g, &UpdateRule { lr: 1.0, qas: false }).unwrap();
        match updated {
            Tensor::Quant(q) => assert_eq!(q.i8_values().unwrap(), &[127, -127]),
            _ => panic!(),
        }
    }

    #[test]
    fn sub_quantum_update_counts_zero_delta() {
        let w = weight(vec![10], vec![1.0]);
        // G~ = 0.4 -> delta rounds to 0
        let g = grad_i32(vec![4], 0.1);
        let (updated, zd) = sgd_update(&w, &g, &UpdateRule { lr: 1.0, qas: false }).unwrap();
        assert_eq!(zd, 1);
        assert_eq!(updated, w);
    }

    #[test]
    fn bias_updates_stay_int32() {
        let b = Tensor::Quant(
            QuantizedTensor::new(
                Shape::new(&[2]).unwrap(),
                QuantData::I32(vec![1000, -1000]),
                QuantParams::per_channel(vec![0.01, 0.02]),
            )
            .unwrap(),
        );
        let g = grad_i32(vec![50, -50], 0.1); // G_real = 5, -5
        let (updated, _) = sgd_update(&b, &g, &UpdateRule { lr: 1.0, qas: true }).unwrap();
        match updated {
            // delta = lr * G_real / s = 5/0.01 = 500 and -5/0.02 = -250
            Tensor::Quant(q) => assert_eq!(q.i32_values().unwrap(), &[500, -750]),
            _ => panic!(),
        }
    }
}
