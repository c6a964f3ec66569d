//! Operator vocabulary: arity, attribute schema and shape rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::{Conv2dGeometry, Shape};

use super::{Attrs, DType, TensorSpec};

/// Every kind declares arity, an attribute schema and a shape rule
/// (see [`output_specs`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    // Quantized forward operators.
    QLinear,
    QConv2d,
    QDepthwiseConv2d,
    Quantize,
    Dequantize,
    // Structural / elementwise operators, polymorphic over dtype.
    Add,
    ReLU6,
    AvgPool,
    Flatten,
    Slice,
    Concat,
    Transpose,
    Sum,
    // Float classifier head and loss.
    FloatLinear,
    FloatConv2d,
    FloatDepthwiseConv2d,
    SoftmaxCrossEntropy,
    // Backward operators.
    SoftmaxCrossEntropyGrad,
    ReLU6Grad,
    AvgPoolGrad,
    GradQuantize,
    QLinearGradInput,
    QLinearGradWeight,
    QConv2dGradInput,
    QConv2dGradWeight,
    QDepthwiseGradInput,
    QDepthwiseGradWeight,
    FloatLinearGradInput,
    FloatLinearGradWeight,
    FloatConv2dGradInput,
    FloatConv2dGradWeight,
    FloatDepthwiseGradInput,
    FloatDepthwiseGradWeight,
    GradDescent,
}

impl OpKind {
    pub fn arity(&self) -> usize {
        use OpKind::*;
        match self {
            QLinear | QConv2d | QDepthwiseConv2d => 3,
            FloatLinear | FloatConv2d | FloatDepthwiseConv2d => 3,
            Quantize | Dequantize | ReLU6 | AvgPool | Flatten | Slice | Transpose | Sum
            | AvgPoolGrad | GradQuantize => 1,
            Add | SoftmaxCrossEntropy | SoftmaxCrossEntropyGrad | ReLU6Grad
            | QLinearGradInput | QLinearGradWeight | QConv2dGradInput | QConv2dGradWeight
            | QDepthwiseGradInput | QDepthwiseGradWeight | FloatLinearGradInput
            | FloatLinearGradWeight | FloatConv2dGradInput | FloatConv2dGradWeight
            | FloatDepthwiseGradInput | FloatDepthwiseGradWeight | GradDescent => 2,
            Concat => usize::MAX, // variadic, >= 2
        }
    }

    /// Whether a gradient-descent operator consumes this node's output
    /// (true only for GradDescent itself).
    pub fn is_grad_descent(&self) -> bool {
        matches!(self, OpKind::GradDescent)
    }

    /// Elementwise for the purposes of the conservative fusion rule.
    pub fn is_elementwise(&self) -> bool {
        use OpKind::*;
        matches!(self, Add | ReLU6 | ReLU6Grad | Quantize | Dequantize | Flatten)
    }

    /// Weight-gradient producers, the targets of backward-graph pruning.
    pub fn is_weight_grad(&self) -> bool {
        use OpKind::*;
        matches!(
            self,
            QLinearGradWeight
                | QConv2dGradWeight
                | QDepthwiseGradWeight
                | FloatLinearGradWeight
                | FloatConv2dGradWeight
                | FloatDepthwiseGradWeight
        )
    }

    /// Input-gradient producers, the links of the backward chain.
    pub fn is_input_grad(&self) -> bool {
        use OpKind::*;
        matches!(
            self,
            QLinearGradInput
                | QConv2dGradInput
                | QDepthwiseGradInput
                | FloatLinearGradInput
                | FloatConv2dGradInput
                | FloatDepthwiseGradInput
        )
    }
}

fn dims(spec: &TensorSpec) -> &[usize] {
    spec.shape.dims()
}

fn conv_geom(attrs: &Attrs) -> Result<Conv2dGeometry> {
    Ok(Conv2dGeometry {
        stride: attrs.get_int("stride")? as usize,
        padding: attrs.get_int("padding")? as usize,
    })
}

fn bad(msg: String) -> Error {
    Error::Graph(msg)
}

/// Compute the output specs of a node from its input specs and attributes.
///
/// This single rule table is shared by eager shape inference at construction
/// time and by [`super::Graph::validate`].
pub fn output_specs(op: OpKind, inputs: &[TensorSpec], attrs: &Attrs) -> Result<Vec<TensorSpec>> {
    use OpKind::*;
    if op != Concat && inputs.len() != op.arity() {
        return Err(bad(format!(
            "{op:?} expects {} inputs, got {}",
            op.arity(),
            inputs.len()
        )));
    }
    let spec = |shape: Shape, dtype: DType| TensorSpec { shape, dtype };
    match op {
        QLinear | FloatLinear => {
            let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
            let (xd, wd) = (dims(x), dims(w));
            if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] || dims(b) != [wd[0]] {
                return Err(bad(format!(
                    "{op:?} shapes do not conform: x {} w {} b {}",
                    x.shape, w.shape, b.shape
                )));
            }
            let dt = if op == QLinear { DType::I8 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[xd[0], wd[0]])?, dt)])
        }
        QConv2d | FloatConv2d => {
            let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
            let (xd, wd) = (dims(x), dims(w));
            if xd.len() != 4 || wd.len() != 4 || xd[1] != wd[1] || dims(b) != [wd[0]] {
                return Err(bad(format!(
                    "{op:?} shapes do not conform: x {} w {} b {}",
                    x.shape, w.shape, b.shape
                )));
            }
            let geom = conv_geom(attrs)?;
            let (oh, ow) = geom.out_hw(xd[2], xd[3], wd[2], wd[3])?;
            let dt = if op == QConv2d { DType::I8 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[xd[0], wd[0], oh, ow])?, dt)])
        }
        QDepthwiseConv2d | FloatDepthwiseConv2d => {
            let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
            let (xd, wd) = (dims(x), dims(w));
            if xd.len() != 4 || wd.len() != 4 || wd[1] != 1 || xd[1] != wd[0] || dims(b) != [wd[0]]
            {
                return Err(bad(format!(
                    "{op:?} shapes do not conform: x {} w {}",
                    x.shape, w.shape
                )));
            }
            let geom = conv_geom(attrs)?;
            let (oh, ow) = geom.out_hw(xd[2], xd[3], wd[2], wd[3])?;
            let dt = if op == QDepthwiseConv2d { DType::I8 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[xd[0], xd[1], oh, ow])?, dt)])
        }
        Quantize => Ok(vec![spec(inputs[0].shape.clone(), DType::I8)]),
        Dequantize => Ok(vec![spec(inputs[0].shape.clone(), DType::F32)]),
        Add => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.shape != b.shape || a.dtype != b.dtype {
                return Err(bad(format!(
                    "Add operands must match: {} {:?} vs {} {:?}",
                    a.shape, a.dtype, b.shape, b.dtype
                )));
            }
            Ok(vec![spec(a.shape.clone(), a.dtype)])
        }
        ReLU6 => Ok(vec![spec(inputs[0].shape.clone(), inputs[0].dtype)]),
        AvgPool => {
            let xd = dims(&inputs[0]);
            if xd.len() != 4 {
                return Err(bad(format!("AvgPool expects NCHW input, got {}", inputs[0].shape)));
            }
            Ok(vec![spec(Shape::new(&[xd[0], xd[1], 1, 1])?, inputs[0].dtype)])
        }
        Flatten => {
            let to: Vec<usize> = attrs.get_ints("to")?.iter().map(|&v| v as usize).collect();
            let shape = Shape::new(&to)?;
            if shape.elem_count() != inputs[0].shape.elem_count() {
                return Err(bad(format!(
                    "Flatten target {shape} does not preserve element count of {}",
                    inputs[0].shape
                )));
            }
            Ok(vec![spec(shape, inputs[0].dtype)])
        }
        Slice => {
            let axis = attrs.get_int("axis")? as usize;
            let channels = attrs.get_ints("channels")?;
            let mut d = dims(&inputs[0]).to_vec();
            if axis >= d.len() || channels.is_empty() {
                return Err(bad("Slice axis/channels invalid".into()));
            }
            if channels.iter().any(|&c| c as usize >= d[axis]) {
                return Err(bad("Slice channel out of range".into()));
            }
            d[axis] = channels.len();
            Ok(vec![spec(Shape::new(&d)?, inputs[0].dtype)])
        }
        Concat => {
            if inputs.len() < 2 {
                return Err(bad("Concat needs at least two inputs".into()));
            }
            let axis = attrs.get_int("axis")? as usize;
            let mut d = dims(&inputs[0]).to_vec();
            if axis >= d.len() {
                return Err(bad("Concat axis out of range".into()));
            }
            let mut total = 0usize;
            let mut seen = Vec::new();
            for (i, inp) in inputs.iter().enumerate() {
                let dest = attrs.get_ints(&format!("dest_{i}"))?;
                if dest.len() != dims(inp)[axis] {
                    return Err(bad(format!(
                        "Concat input {i} has {} channels but {} destinations",
                        dims(inp)[axis],
                        dest.len()
                    )));
                }
                total += dest.len();
                seen.extend(dest.iter().copied());
            }
            seen.sort_unstable();
            if seen != (0..total as i64).collect::<Vec<_>>() {
                return Err(bad("Concat destinations must form a permutation".into()));
            }
            d[axis] = total;
            Ok(vec![spec(Shape::new(&d)?, inputs[0].dtype)])
        }
        Transpose => {
            let xd = dims(&inputs[0]);
            if xd.len() != 2 {
                return Err(bad(format!("Transpose expects a matrix, got {}", inputs[0].shape)));
            }
            Ok(vec![spec(Shape::new(&[xd[1], xd[0]])?, inputs[0].dtype)])
        }
        Sum => {
            let axes: Vec<usize> = attrs.get_ints("axes")?.iter().map(|&v| v as usize).collect();
            let xd = dims(&inputs[0]);
            if axes.iter().any(|&a| a >= xd.len()) {
                return Err(bad("Sum axis out of range".into()));
            }
            let kept: Vec<usize> = (0..xd.len()).filter(|i| !axes.contains(i)).map(|i| xd[i]).collect();
            let shape = if kept.is_empty() { Shape::new(&[1])? } else { Shape::new(&kept)? };
            let dtype = match inputs[0].dtype {
                DType::F32 => DType::F32,
                // integer gradient sums accumulate in int32
                DType::I8 | DType::I32 => DType::I32,
            };
            Ok(vec![spec(shape, dtype)])
        }
        SoftmaxCrossEntropy => {
            let (logits, labels) = (&inputs[0], &inputs[1]);
            let ld = dims(logits);
            if ld.len() != 2 || logits.dtype != DType::F32 || dims(labels) != [ld[0]] {
                return Err(bad(format!(
                    "SoftmaxCrossEntropy expects f32 [N,C] logits and [N] labels, got {} and {}",
                    logits.shape, labels.shape
                )));
            }
            Ok(vec![spec(Shape::new(&[1])?, DType::F32)])
        }
        SoftmaxCrossEntropyGrad => {
            Ok(vec![spec(inputs[0].shape.clone(), DType::F32)])
        }
        ReLU6Grad => {
            let (g, x) = (&inputs[0], &inputs[1]);
            if g.shape != x.shape {
                return Err(bad("ReLU6Grad operand shapes must match".into()));
            }
            Ok(vec![spec(g.shape.clone(), g.dtype)])
        }
        AvgPoolGrad => {
            let h = attrs.get_int("in_h")? as usize;
            let w = attrs.get_int("in_w")? as usize;
            let gd = dims(&inputs[0]);
            if gd.len() != 4 || gd[2] != 1 || gd[3] != 1 {
                return Err(bad("AvgPoolGrad expects [N,C,1,1] gradient".into()));
            }
            Ok(vec![spec(Shape::new(&[gd[0], gd[1], h, w])?, inputs[0].dtype)])
        }
        GradQuantize => Ok(vec![spec(inputs[0].shape.clone(), DType::I8)]),
        QLinearGradInput | FloatLinearGradInput => {
            let (g, w) = (&inputs[0], &inputs[1]);
            let (gd, wd) = (dims(g), dims(w));
            if gd.len() != 2 || wd.len() != 2 || gd[1] != wd[0] {
                return Err(bad("linear grad-input shapes do not conform".into()));
            }
            let dt = if op == QLinearGradInput { DType::I8 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[gd[0], wd[1]])?, dt)])
        }
        QLinearGradWeight | FloatLinearGradWeight => {
            let (g, x) = (&inputs[0], &inputs[1]);
            let (gd, xd) = (dims(g), dims(x));
            if gd.len() != 2 || xd.len() != 2 || gd[0] != xd[0] {
                return Err(bad("linear grad-weight shapes do not conform".into()));
            }
            let dt = if op == QLinearGradWeight { DType::I32 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[gd[1], xd[1]])?, dt)])
        }
        QConv2dGradInput | FloatConv2dGradInput => {
            let (g, w) = (&inputs[0], &inputs[1]);
            let (gd, wd) = (dims(g), dims(w));
            if gd.len() != 4 || wd.len() != 4 || gd[1] != wd[0] {
                return Err(bad("conv grad-input shapes do not conform".into()));
            }
            let h = attrs.get_int("in_h")? as usize;
            let w_ = attrs.get_int("in_w")? as usize;
            let dt = if op == QConv2dGradInput { DType::I8 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[gd[0], wd[1], h, w_])?, dt)])
        }
        QConv2dGradWeight | FloatConv2dGradWeight => {
            let (g, x) = (&inputs[0], &inputs[1]);
            let (gd, xd) = (dims(g), dims(x));
            if gd.len() != 4 || xd.len() != 4 || gd[0] != xd[0] {
                return Err(bad("conv grad-weight shapes do not conform".into()));
            }
            let kh = attrs.get_int("kh")? as usize;
            let kw = attrs.get_int("kw")? as usize;
            let dt = if op == QConv2dGradWeight { DType::I32 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[gd[1], xd[1], kh, kw])?, dt)])
        }
        QDepthwiseGradInput | FloatDepthwiseGradInput => {
            let (g, w) = (&inputs[0], &inputs[1]);
            let (gd, wd) = (dims(g), dims(w));
            if gd.len() != 4 || wd.len() != 4 || gd[1] != wd[0] || wd[1] != 1 {
                return Err(bad("depthwise grad-input shapes do not conform".into()));
            }
            let h = attrs.get_int("in_h")? as usize;
            let w_ = attrs.get_int("in_w")? as usize;
            let dt = if op == QDepthwiseGradInput { DType::I8 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[gd[0], gd[1], h, w_])?, dt)])
        }
        QDepthwiseGradWeight | FloatDepthwiseGradWeight => {
            let (g, x) = (&inputs[0], &inputs[1]);
            let (gd, xd) = (dims(g), dims(x));
            if gd.len() != 4 || xd.len() != 4 || gd[0] != xd[0] || gd[1] != xd[1] {
                return Err(bad("depthwise grad-weight shapes do not conform".into()));
            }
            let kh = attrs.get_int("kh")? as usize;
            let kw = attrs.get_int("kw")? as usize;
            let dt = if op == QDepthwiseGradWeight { DType::I32 } else { DType::F32 };
            Ok(vec![spec(Shape::new(&[gd[1], 1, kh, kw])?, dt)])
        }
        GradDescent => {
            let param = &inputs[0];
            Ok(vec![spec(param.shape.clone(), param.dtype)])
        }
    }
}
