use super::shape::{plan, Site, Step};
use super::weights::{LayerKey, LayerWeights, WeightSet};
use super::{ArchError, LayerSpec, NetSpec, Result};
use crate::tensor::grad::{
    batchnorm_backward, concat_backward, dw_conv3_backward, maxpool2_backward, pw_conv1_backward,
    relu6_backward, relu_backward,
};
use crate::tensor::{
    batchnorm_infer, concat_channels, depth_to_space, dw_conv3, maxpool2, pw_conv1, relu6,
    space_to_depth, BatchNormParams, Scalar, Tensor, TensorError,
};

fn at(site: Site) -> impl FnOnce(TensorError) -> ArchError {
    move |source| ArchError::Layer {
        site: site.to_string(),
        source,
    }
}

fn missing(site: Site) -> ArchError {
    ArchError::Weights(format!("{}: no weights for this layer", site))
}

fn apply_layer<T: Scalar>(
    site: Site,
    spec: LayerSpec,
    weights: &WeightSet<T>,
    eps: T,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let key = LayerKey::from_site(site);
    let w = key.and_then(|k| weights.get(&k));
    let y = match (spec, w) {
        (LayerSpec::DwConv3, Some(LayerWeights::Depthwise(k))) => dw_conv3(x, k),
        (LayerSpec::PwConv1 { .. }, Some(LayerWeights::Pointwise(k))) => pw_conv1(x, k),
        (LayerSpec::BatchNorm, Some(LayerWeights::BatchNorm(p))) => batchnorm_infer(x, p, eps),
        (LayerSpec::DwConv3 | LayerSpec::PwConv1 { .. } | LayerSpec::BatchNorm, _) => {
            return Err(missing(site))
        }
        (LayerSpec::Relu, _) => Ok(x.map(|v| v.max(T::zero()))),
        (LayerSpec::Relu6, _) => Ok(relu6(x)),
        (LayerSpec::MaxPool2, _) => maxpool2(x),
        (LayerSpec::SpaceToDepth, _) => space_to_depth(x),
        (LayerSpec::BypassConcat { .. }, _) => Err(TensorError::Shape(
            "bypass concatenation must be declared through the bypass field".into(),
        )),
    };
    y.map_err(at(site))
}

fn check_input<T: Scalar>(net: &NetSpec, x: &Tensor<T>) -> Result<()> {
    if x.shape() != net.input_shape {
        return Err(ArchError::Layer {
            site: "input".into(),
            source: TensorError::Shape(format!(
                "expected input {:?}, got {:?}",
                net.input_shape,
                x.shape()
            )),
        });
    }
    Ok(())
}

/// Runs the network, calling `observe` with every step's output.
///
/// Bypass reorder outputs are reported but do not replace the running
/// activation.
pub fn forward_observed<T: Scalar>(
    net: &NetSpec,
    weights: &WeightSet<T>,
    x: &Tensor<T>,
    mut observe: impl FnMut(Site, LayerSpec, &Tensor<T>),
) -> Result<Tensor<T>> {
    weights.check(net)?;
    check_input(net, x)?;
    let eps = T::from_f64(net.bn_eps);
    let mut cur = x.clone();
    let mut stash: Option<Tensor<T>> = None;
    for step in plan(net) {
        let site = step.site();
        match step {
            Step::Layer { spec, .. } => {
                cur = apply_layer(site, spec, weights, eps, &cur)?;
                observe(site, spec, &cur);
            }
            Step::Pool { .. } => {
                cur = maxpool2(&cur).map_err(at(site))?;
                observe(site, LayerSpec::MaxPool2, &cur);
            }
            Step::Reorder { .. } => {
                let r = space_to_depth(&cur).map_err(at(site))?;
                observe(site, LayerSpec::SpaceToDepth, &r);
                stash = Some(r);
            }
            Step::Concat { source, .. } => {
                let tap = stash.as_ref().ok_or_else(|| missing(site))?;
                cur = concat_channels(&cur, tap).map_err(at(site))?;
                observe(site, LayerSpec::BypassConcat { source }, &cur);
            }
        }
    }
    Ok(cur)
}

/// Evaluates `net` on one `(C, H, W)` input. Every convolution except the
/// last is expected to be followed by batch-norm and ReLU6 in the spec; the
/// evaluator applies exactly the layers listed.
pub fn forward<T: Scalar>(
    net: &NetSpec,
    weights: &WeightSet<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    forward_observed(net, weights, x, |_, _, _| {})
}

/// Activations recorded during a forward pass, for reverse-mode gradients.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    steps: Vec<Step>,
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
}

pub fn forward_tape<T: Scalar>(
    net: &NetSpec,
    weights: &WeightSet<T>,
    x: &Tensor<T>,
) -> Result<Tape<T>> {
    let steps = plan(net);
    let mut inputs = Vec::with_capacity(steps.len());
    let mut cur = x.clone();
    // a step's input is the running activation before it; the bypass
    // reorder reads the activation without replacing it
    let output = forward_observed(net, weights, x, |site, _, y| {
        if matches!(site, Site::BypassReorder { .. }) {
            inputs.push(cur.clone());
        } else {
            inputs.push(std::mem::replace(&mut cur, y.clone()));
        }
    })?;
    Ok(Tape {
        steps,
        inputs,
        output,
    })
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    /// Gradients of a scalar loss with respect to every weight (as a
    /// [`WeightSet`] of the same layout) and to the network input, given
    /// `grad_out = dL/d(output)`.
    pub fn backward(
        &self,
        net: &NetSpec,
        weights: &WeightSet<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(WeightSet<T>, Tensor<T>)> {
        if grad_out.shape() != self.output.shape() {
            return Err(ArchError::Tensor(TensorError::Shape(format!(
                "grad_out {:?} differs from output {:?}",
                grad_out.shape(),
                self.output.shape()
            ))));
        }
        let eps = T::from_f64(net.bn_eps);
        let mut grads = weights.clone();
        let mut g = grad_out.clone();
        let mut g_stash: Option<Tensor<T>> = None;
        for (step, x) in self.steps.iter().zip(&self.inputs).rev() {
            let site = step.site();
            match *step {
                Step::Layer { spec, .. } => {
                    let key = LayerKey::from_site(site).ok_or_else(|| missing(site))?;
                    g = match spec {
                        LayerSpec::DwConv3 | LayerSpec::PwConv1 { .. } | LayerSpec::BatchNorm => {
                            let (gx, gw) = layer_weight_grads(spec, weights.get(&key), eps, x, &g)
                                .ok_or_else(|| missing(site))?
                                .map_err(at(site))?;
                            *grads.get_mut(&key).ok_or_else(|| missing(site))? = gw;
                            gx
                        }
                        LayerSpec::Relu => relu_backward(x, &g).map_err(at(site))?,
                        LayerSpec::Relu6 => relu6_backward(x, &g).map_err(at(site))?,
                        LayerSpec::MaxPool2 => maxpool2_backward(x, &g).map_err(at(site))?,
                        LayerSpec::SpaceToDepth => depth_to_space(&g).map_err(at(site))?,
                        LayerSpec::BypassConcat { .. } => return Err(missing(site)),
                    };
                }
                Step::Pool { .. } => g = maxpool2_backward(x, &g).map_err(at(site))?,
                Step::Reorder { .. } => {
                    let gs = g_stash.take().ok_or_else(|| missing(site))?;
                    let back = depth_to_space(&gs).map_err(at(site))?;
                    g = g.zip_with(&back, |a, b| a + b).map_err(at(site))?;
                }
                Step::Concat { .. } => {
                    let (ga, gb) = concat_backward(x.shape()[0], &g).map_err(at(site))?;
                    g = ga;
                    g_stash = Some(gb);
                }
            }
        }
        Ok((grads, g))
    }
}

type LayerGrad<T> = crate::tensor::Result<(Tensor<T>, LayerWeights<T>)>;

fn layer_weight_grads<T: Scalar>(
    spec: LayerSpec,
    w: Option<&LayerWeights<T>>,
    eps: T,
    x: &Tensor<T>,
    g: &Tensor<T>,
) -> Option<LayerGrad<T>> {
    Some(match (spec, w?) {
        (LayerSpec::DwConv3, LayerWeights::Depthwise(k)) => {
            dw_conv3_backward(x, k, g).map(|(gx, gw)| (gx, LayerWeights::Depthwise(gw)))
        }
        (LayerSpec::PwConv1 { .. }, LayerWeights::Pointwise(k)) => {
            pw_conv1_backward(x, k, g).map(|(gx, gw)| (gx, LayerWeights::Pointwise(gw)))
        }
        (LayerSpec::BatchNorm, LayerWeights::BatchNorm(p)) => {
            batchnorm_backward(x, p, eps, g).map(|bg| {
                (
                    bg.x,
                    LayerWeights::BatchNorm(BatchNormParams {
                        gamma: bg.gamma,
                        beta: bg.beta,
                        mean: bg.mean,
                        var: bg.var,
                    }),
                )
            })
        }
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_skynet, infer_shapes, Bundle, Bypass, Variant};
    use crate::tensor::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(v: Variant) -> NetSpec {
        build_skynet(v).with_input(16, 32)
    }

    fn input(net: &NetSpec, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&net.input_shape, |_| rng.gen_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = small(Variant::C);
        let w = WeightSet::<f64>::zeros(&net).unwrap();
        let y = forward(&net, &w, &input(&net, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observed_shapes_match_inference() {
        for v in [Variant::A, Variant::B, Variant::C] {
            let net = small(v);
            let w = WeightSet::<f64>::random(&net, 2).unwrap();
            let mut seen = Vec::new();
            forward_observed(&net, &w, &input(&net, 2), |site, spec, y| {
                seen.push((site, spec, y.shape().to_vec()))
            })
            .unwrap();
            let inferred = infer_shapes(&net).unwrap();
            assert_eq!(seen.len(), inferred.len());
            for ((site, spec, shape), s) in seen.iter().zip(&inferred) {
                assert_eq!((*site, *spec), (s.site, s.layer));
                assert_eq!(shape.as_slice(), s.output);
            }
        }
    }

    #[test]
    fn relu6_outputs_bounded_and_deterministic() {
        let net = small(Variant::C);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = WeightSet::<f64>::random(&net, 4).unwrap();
        // large weights so the upper clamp is exercised
        for (_, lw) in w.iter_mut() {
            if let LayerWeights::Pointwise(t) | LayerWeights::Depthwise(t) = lw {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-3.0..3.0));
            }
        }
        let x = input(&net, 4);
        let mut hit_six = false;
        let y1 = forward_observed(&net, &w, &x, |_, spec, y| {
            if spec == LayerSpec::Relu6 {
                assert!(y.data().iter().all(|&v| (0.0..=6.0).contains(&v)));
                hit_six |= y.data().contains(&6.0);
            }
        })
        .unwrap();
        assert!(hit_six);
        let y2 = forward(&net, &w, &x).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn removing_bypass_matches_shared_prefix() {
        let c = small(Variant::C);
        let mut no_bypass = c.clone();
        no_bypass.bypass = None;
        let mut a = small(Variant::A);
        a.head = no_bypass.head.clone();
        // head DW now sees 512 channels in both; the weights differ only there
        let w_c = WeightSet::<f64>::random(&c, 5).unwrap();
        let x = input(&c, 5);
        let mut c_bundles = Vec::new();
        forward_observed(&c, &w_c, &x, |site, _, y| {
            if matches!(site, Site::Bundle { .. } | Site::Pool { .. }) {
                c_bundles.push(y.clone());
            }
        })
        .unwrap();
        let w_a = WeightSet::<f64>::random(&a, 5).unwrap();
        let mut a_bundles = Vec::new();
        forward_observed(&a, &w_a, &x, |site, _, y| {
            if matches!(site, Site::Bundle { .. } | Site::Pool { .. }) {
                a_bundles.push(y.clone());
            }
        })
        .unwrap();
        assert!(crate::arch::validate(&no_bypass).is_ok());
        assert_eq!(c_bundles, a_bundles);
    }

    #[test]
    fn input_shape_mismatch_is_reported() {
        let net = small(Variant::A);
        let w = WeightSet::<f64>::random(&net, 1).unwrap();
        let x = Tensor::zeros(&[3, 8, 8]).unwrap();
        assert!(matches!(
            forward(&net, &w, &x),
            Err(ArchError::Layer { .. })
        ));
    }

    fn tiny_bypass_net() -> NetSpec {
        NetSpec {
            input_shape: [2, 8, 8],
            bundles: vec![
                Bundle::new(vec![
                    LayerSpec::DwConv3,
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu6,
                    LayerSpec::PwConv1 { out_channels: 3 },
                    LayerSpec::Relu,
                ]),
                Bundle::new(vec![
                    LayerSpec::PwConv1 { out_channels: 4 },
                    LayerSpec::Relu6,
                ]),
            ],
            pool_after: [0].into_iter().collect(),
            bypass: Some(Bypass { source: 0, dest: 1 }),
            head: vec![
                LayerSpec::DwConv3,
                LayerSpec::SpaceToDepth,
                LayerSpec::PwConv1 { out_channels: 10 },
            ],
            bn_eps: 1e-5,
        }
    }

    #[test]
    fn network_backward_matches_finite_differences() {
        let net = tiny_bypass_net();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = WeightSet::<f64>::random(&net, 11).unwrap();
        for (_, lw) in w.iter_mut() {
            match lw {
                LayerWeights::Depthwise(t) | LayerWeights::Pointwise(t) => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.8..0.8)),
                LayerWeights::BatchNorm(p) => {
                    p.gamma
                        .iter_mut()
                        .for_each(|v| *v = rng.gen_range(0.5..1.5));
                    p.beta.iter_mut().for_each(|v| *v = rng.gen_range(0.1..0.5));
                }
            }
        }
        let x = Tensor::from_fn(&net.input_shape, |_| rng.gen_range(-1.0..1.0)).unwrap();
        let tape = forward_tape(&net, &w, &x).unwrap();
        let probe = Tensor::from_fn(tape.output().shape(), |_| rng.gen_range(-1.0..1.0)).unwrap();
        let (gw, gx) = tape.backward(&net, &w, &probe).unwrap();
        let loss =
            |w: &WeightSet<f64>, x: &Tensor<f64>| forward(&net, w, x).unwrap().dot(&probe).unwrap();

        let num_x = finite_diff_grad(|t| loss(&w, t), &x, 1e-6).unwrap();
        let err = crate::tensor::max_relative_error(&gx, &num_x).unwrap();
        assert!(err < 1e-4, "input grad rel err {}", err);

        let analytic = gw.named_tensors();
        for (idx, (name, t)) in w.named_tensors().into_iter().enumerate() {
            let num = finite_diff_grad(
                |probe_t| {
                    let mut named = w.named_tensors();
                    named[idx].1 = probe_t.clone();
                    loss(&WeightSet::from_named(&net, named).unwrap(), &x)
                },
                &t,
                1e-6,
            )
            .unwrap();
            let err = crate::tensor::max_relative_error(&analytic[idx].1, &num).unwrap();
            assert!(err < 1e-4, "{} rel err {}", name, err);
        }
    }
}
