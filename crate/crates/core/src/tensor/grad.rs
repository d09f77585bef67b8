//! Vector-Jacobian products for every operator.

use super::ops::{self, BatchNormParams};
use super::{Result, Scalar, Tensor, TensorError};

/// An operator instance with its non-tensor hyper-parameters.
///
/// Inputs are passed positionally:
///
/// | op | inputs |
/// |----|--------|
/// | `DwConv3`, `PwConv1` | `[x, w]` |
/// | `BatchNorm` | `[x, gamma, beta, mean, var]` (vectors as rank-1 tensors) |
/// | `Concat` | `[a, b]` |
/// | everything else | `[x]` |
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op<T = f64> {
    DwConv3,
    PwConv1,
    BatchNorm { eps: T },
    Relu6,
    MaxPool2,
    SpaceToDepth,
    DepthToSpace,
    Concat,
}

impl<T: Scalar> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::DwConv3 => "dw_conv3",
            Op::PwConv1 => "pw_conv1",
            Op::BatchNorm { .. } => "batchnorm_infer",
            Op::Relu6 => "relu6",
            Op::MaxPool2 => "maxpool2",
            Op::SpaceToDepth => "space_to_depth",
            Op::DepthToSpace => "depth_to_space",
            Op::Concat => "concat_channels",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::DwConv3 | Op::PwConv1 | Op::Concat => 2,
            Op::BatchNorm { .. } => 5,
            _ => 1,
        }
    }

    pub fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.expect_arity(inputs)?;
        match self {
            Op::DwConv3 => ops::dw_conv3(inputs[0], inputs[1]),
            Op::PwConv1 => ops::pw_conv1(inputs[0], inputs[1]),
            Op::BatchNorm { eps } => ops::batchnorm_infer(inputs[0], &bn_params(inputs)?, *eps),
            Op::Relu6 => Ok(ops::relu6(inputs[0])),
            Op::MaxPool2 => ops::maxpool2(inputs[0]),
            Op::SpaceToDepth => ops::space_to_depth(inputs[0]),
            Op::DepthToSpace => ops::depth_to_space(inputs[0]),
            Op::Concat => ops::concat_channels(inputs[0], inputs[1]),
        }
    }

    fn expect_arity(&self, inputs: &[&Tensor<T>]) -> Result<()> {
        if inputs.len() != self.arity() {
            return Err(TensorError::Shape(format!(
                "{} takes {} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        Ok(())
    }
}

fn bn_params<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<BatchNormParams<T>> {
    let vec_of = |t: &Tensor<T>| -> Result<Vec<T>> {
        if t.rank() != 1 {
            return Err(TensorError::Shape(format!(
                "batch-norm parameters must be rank-1, got {:?}",
                t.shape()
            )));
        }
        Ok(t.data().to_vec())
    };
    Ok(BatchNormParams {
        gamma: vec_of(inputs[1])?,
        beta: vec_of(inputs[2])?,
        mean: vec_of(inputs[3])?,
        var: vec_of(inputs[4])?,
    })
}

/// Gradients with respect to every input of `op`, in input order.
pub fn backward<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    op.expect_arity(inputs)?;
    let out_shape = op.forward(inputs)?.shape().to_vec();
    if grad_out.shape() != out_shape.as_slice() {
        return Err(TensorError::Shape(format!(
            "{}: grad_out shape {:?} differs from output shape {:?}",
            op.name(),
            grad_out.shape(),
            out_shape
        )));
    }
    Ok(match op {
        Op::DwConv3 => {
            let (gx, gw) = dw_conv3_backward(inputs[0], inputs[1], grad_out)?;
            vec![gx, gw]
        }
        Op::PwConv1 => {
            let (gx, gw) = pw_conv1_backward(inputs[0], inputs[1], grad_out)?;
            vec![gx, gw]
        }
        Op::BatchNorm { eps } => {
            let g = batchnorm_backward(inputs[0], &bn_params(inputs)?, *eps, grad_out)?;
            let c = g.gamma.len();
            vec![
                g.x,
                Tensor::new(&[c], g.gamma)?,
                Tensor::new(&[c], g.beta)?,
                Tensor::new(&[c], g.mean)?,
                Tensor::new(&[c], g.var)?,
            ]
        }
        Op::Relu6 => vec![relu6_backward(inputs[0], grad_out)?],
        Op::MaxPool2 => vec![maxpool2_backward(inputs[0], grad_out)?],
        Op::SpaceToDepth => vec![ops::depth_to_space(grad_out)?],
        Op::DepthToSpace => vec![ops::space_to_depth(grad_out)?],
        Op::Concat => {
            let (ga, gb) = concat_backward(inputs[0].shape()[0], grad_out)?;
            vec![ga, gb]
        }
    })
}

pub(crate) fn dw_conv3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, wd) = x.chw()?;
    x.expect_same_shape(g)?;
    let xs = x.data();
    let ws = w.data();
    let gs = g.data();
    let mut gx = vec![T::zero(); xs.len()];
    let mut gw = vec![T::zero(); 9 * c];
    for ch in 0..c {
        let base = ch * h * wd;
        for i in 0..h {
            for j in 0..wd {
                let go = gs[base + i * wd + j];
                for u in 0..3 {
                    let si = i + u;
                    if si < 1 || si > h {
                        continue;
                    }
                    for v in 0..3 {
                        let sj = j + v;
                        if sj < 1 || sj > wd {
                            continue;
                        }
                        let src = base + (si - 1) * wd + sj - 1;
                        gx[src] = gx[src] + ws[ch * 9 + u * 3 + v] * go;
                        gw[ch * 9 + u * 3 + v] = gw[ch * 9 + u * 3 + v] + xs[src] * go;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[c, h, wd], gx)?, Tensor::new(&[c, 3, 3], gw)?))
}

pub(crate) fn pw_conv1_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (cin, h, wd) = x.chw()?;
    let (cout, gh, gwd) = g.chw()?;
    if (gh, gwd) != (h, wd) || w.shape() != [cout, cin] {
        return Err(TensorError::Shape(format!(
            "pw_conv1 backward: x {:?}, w {:?}, grad {:?}",
            x.shape(),
            w.shape(),
            g.shape()
        )));
    }
    let plane = h * wd;
    let (xs, ws, gs) = (x.data(), w.data(), g.data());
    let mut gx = vec![T::zero(); cin * plane];
    let mut gw = vec![T::zero(); cout * cin];
    for o in 0..cout {
        let grow = &gs[o * plane..(o + 1) * plane];
        for c in 0..cin {
            let xrow = &xs[c * plane..(c + 1) * plane];
            gw[o * cin + c] = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
            let k = ws[o * cin + c];
            for (dst, &go) in gx[c * plane..(c + 1) * plane].iter_mut().zip(grow) {
                *dst = *dst + k * go;
            }
        }
    }
    Ok((
        Tensor::new(&[cin, h, wd], gx)?,
        Tensor::new(&[cout, cin], gw)?,
    ))
}

/// Gradients of inference batch-norm with respect to its input and all four
/// per-channel vectors.
#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    eps: T,
    g: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (c, h, w) = x.chw()?;
    p.validate(c, eps)?;
    x.expect_same_shape(g)?;
    let plane = h * w;
    let half = T::from_f64(0.5);
    let mut gx = vec![T::zero(); x.len()];
    let mut out = BatchNormGrads {
        x: Tensor::zeros(&[1])?,
        gamma: vec![T::zero(); c],
        beta: vec![T::zero(); c],
        mean: vec![T::zero(); c],
        var: vec![T::zero(); c],
    };
    for ch in 0..c {
        let denom = p.var[ch] + eps;
        let s = T::one() / denom.sqrt();
        let xr = &x.data()[ch * plane..(ch + 1) * plane];
        let gr = &g.data()[ch * plane..(ch + 1) * plane];
        let mut sum_g = T::zero();
        let mut sum_gc = T::zero();
        for (k, (&xv, &gv)) in xr.iter().zip(gr).enumerate() {
            gx[ch * plane + k] = gv * p.gamma[ch] * s;
            sum_g = sum_g + gv;
            sum_gc = sum_gc + gv * (xv - p.mean[ch]);
        }
        out.gamma[ch] = sum_gc * s;
        out.beta[ch] = sum_g;
        out.mean[ch] = -p.gamma[ch] * s * sum_g;
        out.var[ch] = -half * p.gamma[ch] * sum_gc * s / denom;
    }
    out.x = Tensor::new(&[c, h, w], gx)?;
    Ok(out)
}

/// Passes the gradient where `0 < x < 6`; the kinks get subgradient 0.
pub(crate) fn relu6_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let six = T::from_f64(6.0);
    x.zip_with(g, |xv, gv| {
        if xv > T::zero() && xv < six {
            gv
        } else {
            T::zero()
        }
    })
}

/// Same as [`relu6_backward`] with only the lower clamp.
pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_with(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })
}

/// Routes each output gradient to the first maximal element of its block.
pub(crate) fn maxpool2_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let (gc, oh, ow) = g.chw()?;
    if gc != c || oh * 2 != h || ow * 2 != w {
        return Err(TensorError::Shape(format!(
            "maxpool2 backward: x {:?}, grad {:?}",
            x.shape(),
            g.shape()
        )));
    }
    let xs = x.data();
    let mut gx = vec![T::zero(); xs.len()];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let cand = [
                    (ch * h + 2 * i) * w + 2 * j,
                    (ch * h + 2 * i) * w + 2 * j + 1,
                    (ch * h + 2 * i + 1) * w + 2 * j,
                    (ch * h + 2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cand[0];
                for &k in &cand[1..] {
                    if xs[k] > xs[best] {
                        best = k;
                    }
                }
                gx[best] = gx[best] + g.data()[(ch * oh + i) * ow + j];
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}

pub(crate) fn concat_backward<T: Scalar>(
    channels_a: usize,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = g.chw()?;
    if channels_a == 0 || channels_a >= c {
        return Err(TensorError::Shape(format!(
            "cannot split {} channels at {}",
            c, channels_a
        )));
    }
    let split = channels_a * h * w;
    Ok((
        Tensor::new(&[channels_a, h, w], g.data()[..split].to_vec())?,
        Tensor::new(&[c - channels_a, h, w], g.data()[split..].to_vec())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pw_identity_passes_gradient_through() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 2], |i| i as f64 * 0.1).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }).unwrap();
        let g = Tensor::from_fn(&[3, 2, 2], |i| 1.0 - i as f64).unwrap();
        let grads = backward(&Op::PwConv1, &[&x, &eye], &g).unwrap();
        assert_eq!(grads[0], g);
    }

    #[test]
    fn relu6_gradient_regions() {
        let x = Tensor::new(&[4], vec![3.0, 7.0, -1.0, 6.0]).unwrap();
        let g = Tensor::new(&[4], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let gx = backward(&Op::Relu6, &[&x], &g).unwrap();
        assert_eq!(gx[0].data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_wrong_grad_shape() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]).unwrap();
        let g = Tensor::zeros(&[1, 4, 4]).unwrap();
        assert!(backward(&Op::MaxPool2, &[&x], &g).is_err());
        assert!(backward(&Op::Relu6, &[&x, &x], &g).is_err());
    }
}
