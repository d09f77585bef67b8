//! Integer evaluation of a network.
//!
//! Batch-norm is folded into the preceding convolution, weights are quantized
//! per tensor, and every layer accumulates in 64-bit integers. Accumulators
//! stay wide until the next activation or structural op needs a narrow
//! operand: ReLU6 outputs go to the fixed activation format, anything else is
//! requantized to a format chosen from its own integer range.

use super::{
    choose_format, pow2, quantize, rescale, FixedPointFormat, QuantError, QuantizedTensor, Result,
};
use crate::arch::{plan, LayerKey, LayerSpec, LayerWeights, NetSpec, Site, Step, WeightSet};
use crate::tensor::{BatchNormParams, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub bias_bits: u8,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            weight_bits: 11,
            act_bits: 9,
            bias_bits: 16,
        }
    }
}

impl QuantConfig {
    /// Format of ReLU6 outputs: unsigned, integer part sized for 6.
    pub fn relu6_format(&self) -> Result<FixedPointFormat> {
        Ok(choose_format(0.0, 6.0, self.act_bits, false)?.format)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QLayer {
    Depthwise {
        weights: QuantizedTensor,
        bias: QuantizedTensor,
    },
    Pointwise {
        weights: QuantizedTensor,
        bias: QuantizedTensor,
    },
    /// Batch-norm with no convolution to fold into.
    Affine {
        scale: QuantizedTensor,
        bias: QuantizedTensor,
    },
    Relu,
    Relu6,
    MaxPool2,
    Reorder,
    Concat,
}

/// A network with folded, quantized parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedNet {
    pub config: QuantConfig,
    pub input_shape: [usize; 3],
    pub steps: Vec<(Site, QLayer)>,
}

fn quantize_range(t: &Tensor<f64>, bits: u8) -> Result<QuantizedTensor> {
    let fmt = choose_format(t.min_value().min(0.0), t.max_value().max(0.0), bits, true)?.format;
    Ok(quantize(t, fmt))
}

fn vector(v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(&[v.len()], v).expect("per-channel vectors are non-empty")
}

impl QuantizedNet {
    pub fn prepare(net: &NetSpec, weights: &WeightSet<f64>, config: QuantConfig) -> Result<Self> {
        weights.check(net)?;
        for bits in [config.weight_bits, config.act_bits, config.bias_bits] {
            FixedPointFormat::new(bits, 0, true)?;
        }
        let steps = plan(net);
        let get = |site: Site| LayerKey::from_site(site).and_then(|k| weights.get(&k));
        let bn_after = |i: usize| -> Option<&BatchNormParams<f64>> {
            match steps.get(i + 1) {
                Some(&Step::Layer {
                    site,
                    spec: LayerSpec::BatchNorm,
                }) => match get(site) {
                    Some(LayerWeights::BatchNorm(p)) => Some(p),
                    _ => None,
                },
                _ => None,
            }
        };
        let mut out = Vec::with_capacity(steps.len());
        let mut i = 0;
        while i < steps.len() {
            let step = steps[i];
            let site = step.site();
            let q = match step {
                Step::Layer { spec, .. } => match (spec, get(site)) {
                    (LayerSpec::DwConv3 | LayerSpec::PwConv1 { .. }, Some(w)) => {
                        let (mut k, cout) = match w {
                            LayerWeights::Depthwise(k) | LayerWeights::Pointwise(k) => {
                                (k.clone(), k.shape()[0])
                            }
                            LayerWeights::BatchNorm(_) => unreachable!("checked against the spec"),
                        };
                        let mut bias = vec![0.0; cout];
                        if let Some(bn) = bn_after(i) {
                            let (scale, shift) = bn.affine(net.bn_eps);
                            let per = k.len() / cout;
                            for (o, row) in k.data_mut().chunks_mut(per).enumerate() {
                                row.iter_mut().for_each(|v| *v *= scale[o]);
                            }
                            bias = shift;
                            i += 1;
                        }
                        let weights = quantize_range(&k, config.weight_bits)?;
                        let bias = quantize_range(&vector(bias), config.bias_bits)?;
                        if spec == LayerSpec::DwConv3 {
                            QLayer::Depthwise { weights, bias }
                        } else {
                            QLayer::Pointwise { weights, bias }
                        }
                    }
                    (LayerSpec::BatchNorm, Some(LayerWeights::BatchNorm(bn))) => {
                        let (scale, shift) = bn.affine(net.bn_eps);
                        QLayer::Affine {
                            scale: quantize_range(&vector(scale), config.weight_bits)?,
                            bias: quantize_range(&vector(shift), config.bias_bits)?,
                        }
                    }
                    (LayerSpec::Relu, _) => QLayer::Relu,
                    (LayerSpec::Relu6, _) => QLayer::Relu6,
                    (LayerSpec::MaxPool2, _) => QLayer::MaxPool2,
                    (LayerSpec::SpaceToDepth, _) => QLayer::Reorder,
                    (s, _) => {
                        return Err(QuantError::Domain(format!(
                            "{}: cannot quantize {}",
                            site, s
                        )))
                    }
                },
                Step::Pool { .. } => QLayer::MaxPool2,
                Step::Reorder { .. } => QLayer::Reorder,
                Step::Concat { .. } => QLayer::Concat,
            };
            out.push((site, q));
            i += 1;
        }
        Ok(QuantizedNet {
            config,
            input_shape: net.input_shape,
            steps: out,
        })
    }

    /// Runs the integer path and returns the dequantized output.
    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        if x.shape() != self.input_shape {
            return Err(QuantError::Domain(format!(
                "expected input {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let act_bits = self.config.act_bits;
        let relu6_fmt = self.config.relu6_format()?;
        let lo = x.min_value();
        let in_fmt = choose_format(lo.min(0.0), x.max_value().max(0.0), act_bits, lo < 0.0)?.format;
        let q = quantize(x, in_fmt);
        let mut cur = Act {
            shape: self.input_shape,
            values: q.values().to_vec(),
            frac: in_fmt.frac_bits,
            wide: false,
        };
        let mut stash: Option<Act> = None;
        for (site, layer) in &self.steps {
            let overflow = |bound: i128| QuantError::Overflow {
                site: site.to_string(),
                bound,
            };
            cur = match layer {
                QLayer::Depthwise { weights, bias } => {
                    let x = cur.narrow(act_bits)?;
                    depthwise(&x, weights, bias).map_err(overflow)?
                }
                QLayer::Pointwise { weights, bias } => {
                    let x = cur.narrow(act_bits)?;
                    pointwise(&x, weights, bias).map_err(overflow)?
                }
                QLayer::Affine { scale, bias } => {
                    let x = cur.narrow(act_bits)?;
                    affine(&x, scale, bias).map_err(overflow)?
                }
                QLayer::Relu => {
                    cur.values.iter_mut().for_each(|v| *v = (*v).max(0));
                    cur
                }
                QLayer::Relu6 => {
                    let top = rescale(6, 0, relu6_fmt.frac_bits);
                    let values = cur
                        .values
                        .iter()
                        .map(|&v| rescale(v.max(0), cur.frac, relu6_fmt.frac_bits).clamp(0, top))
                        .map(|v| relu6_fmt.saturate(v))
                        .collect();
                    Act {
                        shape: cur.shape,
                        values,
                        frac: relu6_fmt.frac_bits,
                        wide: false,
                    }
                }
                QLayer::MaxPool2 => maxpool(&cur.narrow(act_bits)?),
                QLayer::Reorder => {
                    stash = Some(reorder(&cur.narrow(act_bits)?));
                    continue;
                }
                QLayer::Concat => {
                    let a = cur.narrow(act_bits)?;
                    let b = stash
                        .as_ref()
                        .ok_or_else(|| QuantError::Domain(format!("{}: nothing stashed", site)))?
                        .narrow(act_bits)?;
                    concat(&a, &b)
                }
            };
        }
        let step = pow2(-cur.frac);
        Ok(Tensor::new(
            &cur.shape,
            cur.values.iter().map(|&v| v as f64 * step).collect(),
        )?)
    }
}

/// Convenience wrapper: fold, quantize and evaluate in one call.
pub fn quantized_forward(
    net: &NetSpec,
    weights: &WeightSet<f64>,
    x: &Tensor<f64>,
    config: QuantConfig,
) -> Result<Tensor<f64>> {
    QuantizedNet::prepare(net, weights, config)?.forward(x)
}

/// Integer activation at scale `2^-frac`. Wide values come straight from an
/// accumulator and have not been narrowed to the activation width.
#[derive(Clone, Debug)]
struct Act {
    shape: [usize; 3],
    values: Vec<i64>,
    frac: i32,
    wide: bool,
}

impl Act {
    /// Requantizes a wide accumulator to `bits`, sizing the format from the
    /// integer range.
    fn narrow(&self, bits: u8) -> Result<Act> {
        if !self.wide {
            return Ok(self.clone());
        }
        let lo = self.values.iter().copied().min().unwrap_or(0).min(0);
        let hi = self.values.iter().copied().max().unwrap_or(0).max(0);
        let s = pow2(-self.frac);
        let fmt = choose_format(lo as f64 * s, hi as f64 * s, bits, lo < 0)?.format;
        Ok(Act {
            shape: self.shape,
            values: self
                .values
                .iter()
                .map(|&v| fmt.saturate(rescale(v, self.frac, fmt.frac_bits)))
                .collect(),
            frac: fmt.frac_bits,
            wide: false,
        })
    }

    fn max_abs(&self) -> i128 {
        self.values
            .iter()
            .map(|v| (*v as i128).abs())
            .max()
            .unwrap_or(0)
    }
}

/// Bias aligned to the accumulator scale plus the worst-case accumulator
/// magnitude per output channel.
fn prepare_acc(
    x: &Act,
    w: &QuantizedTensor,
    bias: &QuantizedTensor,
    fan_in: usize,
) -> std::result::Result<(i32, Vec<i64>), i128> {
    let frac = w.format().frac_bits + x.frac;
    let xmax = x.max_abs();
    let mut aligned = Vec::with_capacity(bias.values().len());
    for (o, &b) in bias.values().iter().enumerate() {
        let bb = rescale(b, bias.format().frac_bits, frac);
        let wsum: i128 = w.values()[o * fan_in..(o + 1) * fan_in]
            .iter()
            .map(|v| (*v as i128).abs())
            .sum();
        let bound = wsum * xmax + (bb as i128).abs();
        if bound >= i64::MAX as i128 {
            return Err(bound);
        }
        aligned.push(bb);
    }
    Ok((frac, aligned))
}

fn depthwise(
    x: &Act,
    w: &QuantizedTensor,
    bias: &QuantizedTensor,
) -> std::result::Result<Act, i128> {
    let [c, h, wd] = x.shape;
    let (frac, b) = prepare_acc(x, w, bias, 9)?;
    let k = w.values();
    let mut out = vec![0i64; c * h * wd];
    for ch in 0..c {
        let src = &x.values[ch * h * wd..(ch + 1) * h * wd];
        let dst = &mut out[ch * h * wd..(ch + 1) * h * wd];
        for i in 0..h {
            for j in 0..wd {
                let mut acc = b[ch];
                for u in 0..3 {
                    let ii = i as isize + u as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..3 {
                        let jj = j as isize + v as isize - 1;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        acc += k[ch * 9 + u * 3 + v] * src[ii as usize * wd + jj as usize];
                    }
                }
                dst[i * wd + j] = acc;
            }
        }
    }
    Ok(Act {
        shape: x.shape,
        values: out,
        frac,
        wide: true,
    })
}

fn pointwise(
    x: &Act,
    w: &QuantizedTensor,
    bias: &QuantizedTensor,
) -> std::result::Result<Act, i128> {
    let [cin, h, wd] = x.shape;
    let cout = w.shape()[0];
    let (frac, b) = prepare_acc(x, w, bias, cin)?;
    let hw = h * wd;
    let mut out = vec![0i64; cout * hw];
    for (o, row) in out.chunks_mut(hw).enumerate() {
        row.iter_mut().for_each(|v| *v = b[o]);
        for ci in 0..cin {
            let wv = w.values()[o * cin + ci];
            if wv == 0 {
                continue;
            }
            for (acc, &xv) in row.iter_mut().zip(&x.values[ci * hw..(ci + 1) * hw]) {
                *acc += wv * xv;
            }
        }
    }
    Ok(Act {
        shape: [cout, h, wd],
        values: out,
        frac,
        wide: true,
    })
}

fn affine(
    x: &Act,
    scale: &QuantizedTensor,
    bias: &QuantizedTensor,
) -> std::result::Result<Act, i128> {
    let [c, h, wd] = x.shape;
    let (frac, b) = prepare_acc(x, scale, bias, 1)?;
    let hw = h * wd;
    let mut values = x.values.clone();
    for ch in 0..c {
        let s = scale.values()[ch];
        values[ch * hw..(ch + 1) * hw]
            .iter_mut()
            .for_each(|v| *v = *v * s + b[ch]);
    }
    Ok(Act {
        shape: x.shape,
        values,
        frac,
        wide: true,
    })
}

fn maxpool(x: &Act) -> Act {
    let [c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut values = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let at = |di: usize, dj: usize| x.values[(ch * h + 2 * i + di) * w + 2 * j + dj];
                values.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    Act {
        shape: [c, oh, ow],
        values,
        frac: x.frac,
        wide: false,
    }
}

fn reorder(x: &Act) -> Act {
    let [c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut values = vec![0; c * h * w];
    for ch in 0..c {
        for k in 0..4 {
            for i in 0..oh {
                for j in 0..ow {
                    values[((4 * ch + k) * oh + i) * ow + j] =
                        x.values[(ch * h + 2 * i + k / 2) * w + 2 * j + k % 2];
                }
            }
        }
    }
    Act {
        shape: [4 * c, oh, ow],
        values,
        frac: x.frac,
        wide: false,
    }
}

fn concat(a: &Act, b: &Act) -> Act {
    // align to the coarser scale so neither operand can overflow
    let frac = a.frac.min(b.frac);
    let values = a
        .values
        .iter()
        .map(|&v| rescale(v, a.frac, frac))
        .chain(b.values.iter().map(|&v| rescale(v, b.frac, frac)))
        .collect();
    Act {
        shape: [a.shape[0] + b.shape[0], a.shape[1], a.shape[2]],
        values,
        frac,
        wide: false,
    }
}
