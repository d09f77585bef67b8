use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::shape::{infer_shapes, Site};
use super::{ArchError, LayerSpec, NetSpec, Result};
use crate::tensor::{BatchNormParams, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Bundle(usize),
    Head,
}

/// Identifies a weighted layer: its stage and position within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerKey {
    pub stage: Stage,
    pub layer: usize,
}

impl LayerKey {
    pub fn from_site(site: Site) -> Option<Self> {
        match site {
            Site::Bundle { bundle, layer } => Some(LayerKey {
                stage: Stage::Bundle(bundle),
                layer,
            }),
            Site::Head { layer } => Some(LayerKey {
                stage: Stage::Head,
                layer,
            }),
            _ => None,
        }
    }

    /// Parses the `bundle.<i>.<j>` / `head.<j>` prefix produced by `Display`.
    pub fn parse(s: &str) -> Option<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        match parts[..] {
            ["bundle", b, l] => Some(LayerKey {
                stage: Stage::Bundle(b.parse().ok()?),
                layer: l.parse().ok()?,
            }),
            ["head", l] => Some(LayerKey {
                stage: Stage::Head,
                layer: l.parse().ok()?,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Stage::Bundle(b) => write!(f, "bundle.{}.{}", b, self.layer),
            Stage::Head => write!(f, "head.{}", self.layer),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights<T = f64> {
    /// `(C, 3, 3)`
    Depthwise(Tensor<T>),
    /// `(Cout, Cin)`
    Pointwise(Tensor<T>),
    BatchNorm(BatchNormParams<T>),
}

impl<T: Scalar> LayerWeights<T> {
    pub fn scalar_count(&self) -> usize {
        match self {
            LayerWeights::Depthwise(t) | LayerWeights::Pointwise(t) => t.len(),
            LayerWeights::BatchNorm(p) => 4 * p.channels(),
        }
    }
}

/// Weights of every DW, PW and BN layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T = f64> {
    layers: BTreeMap<LayerKey, LayerWeights<T>>,
}

/// Expected weight shape of each weighted layer.
fn expected(net: &NetSpec) -> Result<Vec<(LayerKey, LayerSpec, [usize; 3])>> {
    Ok(infer_shapes(net)?
        .into_iter()
        .filter(|s| s.layer.has_weights())
        .filter_map(|s| LayerKey::from_site(s.site).map(|k| (k, s.layer, s.input)))
        .collect())
}

impl<T: Scalar> WeightSet<T> {
    pub fn from_layers(layers: BTreeMap<LayerKey, LayerWeights<T>>) -> Self {
        WeightSet { layers }
    }

    /// Conv weights uniform in `[-0.05, 0.05]`; batch-norm gamma = 1, beta = 0,
    /// mean = 0, var = 1.
    pub fn random(net: &NetSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(net, |shape| {
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-0.05..=0.05)))
        })
    }

    /// Conv weights uniform in `±sqrt(6 / fan_in)` (fan-in 9 for depthwise,
    /// `Cin` for pointwise), which keeps activation scale roughly constant
    /// through deep stacks. Batch-norm as in [`WeightSet::random`].
    pub fn random_he(net: &NetSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(net, |shape| {
            let fan_in = if shape.len() == 3 { 9 } else { shape[1] };
            let b = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-b..=b)))
        })
    }

    pub fn zeros(net: &NetSpec) -> Result<Self> {
        let mut w = Self::build(net, |shape| Tensor::zeros(shape))?;
        for lw in w.layers.values_mut() {
            if let LayerWeights::BatchNorm(p) = lw {
                p.gamma.iter_mut().for_each(|g| *g = T::zero());
            }
        }
        Ok(w)
    }

    fn build(
        net: &NetSpec,
        mut conv: impl FnMut(&[usize]) -> crate::tensor::Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (key, spec, [c, _, _]) in expected(net)? {
            let w = match spec {
                LayerSpec::DwConv3 => LayerWeights::Depthwise(conv(&[c, 3, 3])?),
                LayerSpec::PwConv1 { out_channels } => {
                    LayerWeights::Pointwise(conv(&[out_channels, c])?)
                }
                _ => LayerWeights::BatchNorm(BatchNormParams::identity(c)),
            };
            layers.insert(key, w);
        }
        Ok(WeightSet { layers })
    }

    pub fn get(&self, key: &LayerKey) -> Option<&LayerWeights<T>> {
        self.layers.get(key)
    }

    pub fn get_mut(&mut self, key: &LayerKey) -> Option<&mut LayerWeights<T>> {
        self.layers.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerKey, &LayerWeights<T>)> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&LayerKey, &mut LayerWeights<T>)> {
        self.layers.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> usize {
        self.layers.values().map(|w| w.scalar_count()).sum()
    }

    /// Checks that every weighted layer of `net` has weights of the inferred
    /// shape and that nothing else is stored.
    pub fn check(&self, net: &NetSpec) -> Result<()> {
        let want = expected(net)?;
        if want.len() != self.layers.len() {
            return Err(ArchError::Weights(format!(
                "network has {} weighted layers, weight set has {}",
                want.len(),
                self.layers.len()
            )));
        }
        for (key, spec, [c, _, _]) in want {
            let ok = match (spec, self.layers.get(&key)) {
                (LayerSpec::DwConv3, Some(LayerWeights::Depthwise(t))) => t.shape() == [c, 3, 3],
                (LayerSpec::PwConv1 { out_channels }, Some(LayerWeights::Pointwise(t))) => {
                    t.shape() == [out_channels, c]
                }
                (LayerSpec::BatchNorm, Some(LayerWeights::BatchNorm(p))) => {
                    [&p.gamma, &p.beta, &p.mean, &p.var]
                        .iter()
                        .all(|v| v.len() == c)
                }
                _ => false,
            };
            if !ok {
                return Err(ArchError::Weights(format!(
                    "{}: weights missing or not shaped for {} with {} input channels",
                    key, spec, c
                )));
            }
        }
        Ok(())
    }

    /// Flattens to `(name, tensor)` pairs: `<key>.dw`, `<key>.pw`,
    /// `<key>.bn.{gamma,beta,mean,var}`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (key, w) in &self.layers {
            match w {
                LayerWeights::Depthwise(t) => out.push((format!("{}.dw", key), t.clone())),
                LayerWeights::Pointwise(t) => out.push((format!("{}.pw", key), t.clone())),
                LayerWeights::BatchNorm(p) => {
                    for (name, v) in [
                        ("gamma", &p.gamma),
                        ("beta", &p.beta),
                        ("mean", &p.mean),
                        ("var", &p.var),
                    ] {
                        let t = Tensor::new(&[v.len()], v.clone()).expect("non-empty bn vector");
                        out.push((format!("{}.bn.{}", key, name), t));
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`WeightSet::named_tensors`]; the result is checked against `net`.
    pub fn from_named(net: &NetSpec, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut layers: BTreeMap<LayerKey, LayerWeights<T>> = BTreeMap::new();
        let bad = |name: &str| ArchError::Weights(format!("unrecognised tensor name '{}'", name));
        for (name, t) in tensors {
            let (key, kind) = if let Some(p) = name.strip_suffix(".dw") {
                (p, "dw")
            } else if let Some(p) = name.strip_suffix(".pw") {
                (p, "pw")
            } else if let Some((p, field)) = name.rsplit_once(".bn.") {
                (p, field)
            } else {
                return Err(bad(&name));
            };
            let key = LayerKey::parse(key).ok_or_else(|| bad(&name))?;
            match kind {
                "dw" => {
                    layers.insert(key, LayerWeights::Depthwise(t));
                }
                "pw" => {
                    layers.insert(key, LayerWeights::Pointwise(t));
                }
                "gamma" | "beta" | "mean" | "var" => {
                    let entry = layers.entry(key).or_insert_with(|| {
                        LayerWeights::BatchNorm(BatchNormParams {
                            gamma: vec![],
                            beta: vec![],
                            mean: vec![],
                            var: vec![],
                        })
                    });
                    let LayerWeights::BatchNorm(p) = entry else {
                        return Err(bad(&name));
                    };
                    let slot = match kind {
                        "gamma" => &mut p.gamma,
                        "beta" => &mut p.beta,
                        "mean" => &mut p.mean,
                        _ => &mut p.var,
                    };
                    *slot = t.into_data();
                }
                _ => return Err(bad(&name)),
            }
        }
        let ws = WeightSet { layers };
        ws.check(net)?;
        Ok(ws)
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        WeightSet {
            layers: self
                .layers
                .iter()
                .map(|(k, w)| {
                    let w = match w {
                        LayerWeights::Depthwise(t) => LayerWeights::Depthwise(t.cast()),
                        LayerWeights::Pointwise(t) => LayerWeights::Pointwise(t.cast()),
                        LayerWeights::BatchNorm(p) => LayerWeights::BatchNorm(BatchNormParams {
                            gamma: cv(&p.gamma),
                            beta: cv(&p.beta),
                            mean: cv(&p.mean),
                            var: cv(&p.var),
                        }),
                    };
                    (*k, w)
                })
                .collect(),
        }
    }
}
