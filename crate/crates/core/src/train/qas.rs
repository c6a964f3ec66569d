//! Quantization-Aware Scaling: hyper-parameter-free gradient compensation.
//!
//! Weight gradients are multiplied by `s_W^-2` per output channel; bias
//! gradients by `(s_W * s_x)^-2 = s^-2`, which is the bias tensor's own
//! scale squared. fp32 parameters are untouched.

use crate::qtensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QasKind {
    Weight,
    Bias,
}

/// Standalone scaling rule on real-unit gradients.
///
/// `s_w` has one entry per output channel (or one for per-tensor
/// quantization); `channel_stride` is the number of gradient elements per
/// channel. For biases the effective scale is `s_w[ch] * s_x`.
pub fn qas_scale(
    grad: &[f64],
    s_w: &[f32],
    s_x: f32,
    kind: QasKind,
    channel_stride: usize,
) -> Vec<f64> {
    grad.iter()
        .enumerate()
        .map(|(i, &g)| {
            let ch = if s_w.len() == 1 { 0 } else { i / channel_stride };
            let s = match kind {
                QasKind::Weight => s_w[ch] as f64,
                QasKind::Bias => s_w[ch] as f64 * s_x as f64,
            };
            g / (s * s)
        })
        .collect()
}

/// In-place QAS against a parameter tensor: every quantized parameter's own
/// scales are exactly the `s` of its gradient compensation rule.
pub fn qas_for_param(param: &Tensor, grad_real: &mut [f64]) {
    if let Tensor::Quant(q) = param {
        for (i, g) in grad_real.iter_mut().enumerate() {
            let s = q.params.scale_for(&q.shape, i) as f64;
            *g /= s * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scale_leaves_gradient_unchanged() {
        let g = qas_scale(&[1.0, -2.0], &[1.0], 1.0, QasKind::Weight, 2);
        assert_eq!(g, vec![1.0, -2.0]);
    }

    #[test]
    fn weight_rule_direct_substitution() {
        // s_W = 0.5, grad 1.0 -> 4.0
        let g = qas_scale(&[1.0], &[0.5], 1.0, QasKind::Weight, 1);
        assert_eq!(g, vec![4.0]);
    }

    #[test]
    fn bias_rule_direct_substitution() {
        // s_W = 0.1, s_x = 0.2 -> (0.02)^-2 = 2500
        let g = qas_scale(&[1.0], &[0.1], 0.2, QasKind::Bias, 1);
        assert!((g[0] - 2500.0).abs() / 2500.0 < 1e-5, "{}", g[0]);
    }

    #[test]
    fn per_channel_weight_scaling() {
        let g = qas_scale(&[1.0, 1.0, 1.0, 1.0], &[1.0, 0.5], 1.0, QasKind::Weight, 2);
        assert_eq!(g, vec![1.0, 1.0, 4.0, 4.0]);
    }

    #[test]
    fn qas_never_changes_sign() {
        let grads = vec![3.0, -4.0, 0.0, 1e-9, -1e9];
        let scaled = qas_scale(&grads, &[0.037, 1.3, 0.004, 9.0, 0.25], 0.11, QasKind::Bias, 1);
        for (a, b) in grads.iter().zip(&scaled) {
            assert_eq!(a.signum() * b.signum() >= 0.0, true);
            assert_eq!(*a == 0.0, *b == 0.0);
        }
    }
}
