use std::collections::{BTreeMap, HashSet};

use super::train::{train, Dataset, TrainConfig};
use super::{Result, SearchError};
use crate::arch::{validate, Bundle, LayerSpec, NetSpec, WeightSet};
use crate::costmodel::{within_budget, CostEstimate, CostModel};
use crate::detect::{Anchor, DEFAULT_ANCHORS, NUM_ANCHORS};
use crate::tensor::DEFAULT_BN_EPS;

/// Input used to shape-check enumerated sequences.
const REFERENCE_INPUT: [usize; 3] = [8, 16, 16];

/// Every sequence of up to `max_layers` alphabet entries that contains a
/// convolution and evaluates on a reference input. Duplicated alphabet
/// entries are ignored; bypass concatenation is not a bundle layer.
/// Output is ordered by length, then by alphabet position.
pub fn enumerate_bundles(alphabet: &[LayerSpec], max_layers: usize) -> Result<Vec<Bundle>> {
    if alphabet.is_empty() {
        return Err(SearchError::Config("layer alphabet is empty".into()));
    }
    if max_layers == 0 {
        return Err(SearchError::Config("max_layers must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let symbols: Vec<LayerSpec> = alphabet
        .iter()
        .copied()
        .filter(|l| !matches!(l, LayerSpec::BypassConcat { .. }))
        .filter(|l| seen.insert(*l))
        .collect();
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<LayerSpec>> = vec![Vec::new()];
    for _ in 0..max_layers {
        let mut next = Vec::with_capacity(frontier.len() * symbols.len());
        for prefix in &frontier {
            for &s in &symbols {
                let mut seq = prefix.clone();
                seq.push(s);
                next.push(seq);
            }
        }
        for seq in &next {
            if seq.iter().any(LayerSpec::is_conv) && shape_ok(seq) {
                out.push(Bundle::new(seq.clone()));
            }
        }
        frontier = next;
    }
    Ok(out)
}

fn shape_ok(layers: &[LayerSpec]) -> bool {
    let [mut c, mut h, mut w] = REFERENCE_INPUT;
    for l in layers {
        match *l {
            LayerSpec::PwConv1 { out_channels } => {
                if out_channels == 0 {
                    return false;
                }
                c = out_channels;
            }
            LayerSpec::MaxPool2 | LayerSpec::SpaceToDepth => {
                if h % 2 != 0 || w % 2 != 0 {
                    return false;
                }
                if *l == LayerSpec::SpaceToDepth {
                    c *= 4;
                }
                h /= 2;
                w /= 2;
            }
            _ => {}
        }
    }
    c > 0 && h > 0 && w > 0
}

/// Fixed front and back end around a replicated candidate bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sketch {
    pub input_shape: [usize; 3],
    pub replicas: usize,
    /// Pool after every replica.
    pub pool_each: bool,
    pub head: Vec<LayerSpec>,
    pub anchors: [Anchor; NUM_ANCHORS],
}

impl Default for Sketch {
    fn default() -> Self {
        Sketch {
            input_shape: [3, 32, 64],
            replicas: 3,
            pool_each: true,
            head: vec![LayerSpec::PwConv1 { out_channels: 10 }],
            anchors: DEFAULT_ANCHORS,
        }
    }
}

impl Sketch {
    pub fn instantiate(&self, bundle: &Bundle) -> NetSpec {
        NetSpec {
            input_shape: self.input_shape,
            bundles: vec![bundle.clone(); self.replicas],
            pool_after: if self.pool_each {
                (0..self.replicas).collect()
            } else {
                Default::default()
            },
            bypass: None,
            head: self.head.clone(),
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleCandidate {
    pub bundle: Bundle,
    pub latency: CostEstimate,
    /// Mean validation IoU after quick training.
    pub proxy_accuracy: f64,
    pub val_loss: f64,
    pub loss_curve: Vec<f64>,
    pub feasible: bool,
    pub reason: Option<String>,
}

/// Builds the sketch around `bundle`, prices it and trains it briefly.
pub fn score_bundle(
    bundle: &Bundle,
    sketch: &Sketch,
    data: &Dataset,
    cfg: &TrainConfig,
    model: &dyn CostModel,
    res_max: &BTreeMap<String, f64>,
) -> Result<BundleCandidate> {
    if cfg.epochs == 0 {
        return Err(SearchError::Config("epochs must be at least 1".into()));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(SearchError::Config(
            "dataset splits must be non-empty".into(),
        ));
    }
    let net = sketch.instantiate(bundle);
    if let Err(v) = validate(&net) {
        return Err(crate::arch::ArchError::Invalid(v).into());
    }
    let latency = model.estimate(&net)?;
    let fits = within_budget(&latency, res_max)?;
    let mut weights = WeightSet::random_he(&net, cfg.seed)?;
    let report = train(&net, &mut weights, data, cfg, &sketch.anchors)?;
    let reason = match (report.diverged_at, fits) {
        (Some(e), _) => Some(format!("training diverged at epoch {}", e)),
        (None, false) => Some("resource budget exceeded".into()),
        _ => None,
    };
    Ok(BundleCandidate {
        bundle: bundle.clone(),
        latency,
        proxy_accuracy: report.val_iou,
        val_loss: report.val_loss,
        loss_curve: report.loss_curve,
        feasible: reason.is_none(),
        reason,
    })
}

/// Scores every bundle on its own thread pool slot. Candidate `i` trains
/// with seed `cfg.seed ^ i`, so results do not depend on scheduling.
pub fn score_bundles(
    bundles: &[Bundle],
    sketch: &Sketch,
    data: &Dataset,
    cfg: &TrainConfig,
    model: &(dyn CostModel + Sync),
    res_max: &BTreeMap<String, f64>,
) -> Vec<Result<BundleCandidate>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(bundles.len().max(1));
    let mut slots: Vec<Option<Result<BundleCandidate>>> =
        (0..bundles.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (w, chunk) in slots
            .chunks_mut(bundles.len().div_ceil(workers).max(1))
            .enumerate()
        {
            let base = w * bundles.len().div_ceil(workers).max(1);
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let i = base + k;
                    let c = TrainConfig {
                        seed: cfg.seed ^ i as u64,
                        ..*cfg
                    };
                    *slot = Some(score_bundle(&bundles[i], sketch, data, &c, model, res_max));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot is filled"))
        .collect()
}

/// The `k` feasible candidates with the best proxy accuracy whose sketch
/// latency is at most `max_latency_ms`. Ties keep input order.
pub fn select_bundles(
    candidates: &[BundleCandidate],
    max_latency_ms: f64,
    k: usize,
) -> Vec<BundleCandidate> {
    let mut ok: Vec<&BundleCandidate> = candidates
        .iter()
        .filter(|c| c.feasible && c.latency.latency_ms <= max_latency_ms)
        .collect();
    ok.sort_by(|a, b| b.proxy_accuracy.total_cmp(&a.proxy_accuracy));
    ok.into_iter().take(k).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{HardwareProfile, RES_COMPUTE, RES_MEMORY};

    fn pw(c: usize) -> LayerSpec {
        LayerSpec::PwConv1 { out_channels: c }
    }

    /// Independent count: recursive walk over all sequences.
    fn oracle(alphabet: &[LayerSpec], cap: usize) -> HashSet<Vec<LayerSpec>> {
        fn rec(
            alphabet: &[LayerSpec],
            cap: usize,
            cur: &mut Vec<LayerSpec>,
            out: &mut HashSet<Vec<LayerSpec>>,
        ) {
            if !cur.is_empty() && cur.iter().any(|l| l.is_conv()) {
                let pools = cur
                    .iter()
                    .filter(|l| matches!(l, LayerSpec::MaxPool2 | LayerSpec::SpaceToDepth))
                    .count();
                // 16x16 reference input halves cleanly four times
                if pools <= 4 {
                    out.insert(cur.clone());
                }
            }
            if cur.len() == cap {
                return;
            }
            for &a in alphabet {
                cur.push(a);
                rec(alphabet, cap, cur, out);
                cur.pop();
            }
        }
        let mut out = HashSet::new();
        rec(alphabet, cap, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn membership_and_trivial_cases() {
        let b = enumerate_bundles(&[LayerSpec::DwConv3, pw(8)], 2).unwrap();
        assert!(b.contains(&Bundle::new(vec![LayerSpec::DwConv3, pw(8)])));
        assert_eq!(enumerate_bundles(&[pw(4)], 1).unwrap().len(), 1);
        assert!(enumerate_bundles(&[], 2).is_err());
        assert!(enumerate_bundles(&[pw(4)], 0).is_err());
        // no conv, nothing to return
        assert!(enumerate_bundles(&[LayerSpec::Relu6], 3)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn matches_recursive_oracle() {
        let alphabet = [
            LayerSpec::DwConv3,
            pw(16),
            LayerSpec::BatchNorm,
            LayerSpec::Relu6,
            LayerSpec::MaxPool2,
        ];
        for cap in 1..=3 {
            let got = enumerate_bundles(&alphabet, cap).unwrap();
            let want = oracle(&alphabet, cap);
            assert_eq!(got.len(), want.len(), "cap {}", cap);
            let got: HashSet<Vec<LayerSpec>> = got.into_iter().map(|b| b.layers).collect();
            assert_eq!(got, want);
        }
        // duplicates in the alphabet change nothing
        let doubled: Vec<LayerSpec> = alphabet.iter().chain(alphabet.iter()).copied().collect();
        assert_eq!(
            enumerate_bundles(&doubled, 3).unwrap(),
            enumerate_bundles(&alphabet, 3).unwrap()
        );
    }

    #[test]
    fn parity_failures_are_dropped() {
        let pools = enumerate_bundles(&[pw(4), LayerSpec::MaxPool2], 6).unwrap();
        assert!(pools.iter().all(|b| b
            .layers
            .iter()
            .filter(|l| **l == LayerSpec::MaxPool2)
            .count()
            <= 4));
    }

    fn caps() -> BTreeMap<String, f64> {
        [
            (RES_COMPUTE.to_string(), 1e9),
            (RES_MEMORY.to_string(), 1e12),
        ]
        .into_iter()
        .collect()
    }

    fn quick() -> (Sketch, Dataset, TrainConfig) {
        let sketch = Sketch {
            input_shape: [3, 16, 32],
            replicas: 2,
            ..Sketch::default()
        };
        let data = Dataset::synthetic(8, 4, sketch.input_shape, 5);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        (sketch, data, cfg)
    }

    #[test]
    fn scoring_is_deterministic() {
        let (sketch, data, cfg) = quick();
        let p = HardwareProfile::reference();
        let b = Bundle::separable(8);
        let x = score_bundle(&b, &sketch, &data, &cfg, &p, &caps()).unwrap();
        let y = score_bundle(&b, &sketch, &data, &cfg, &p, &caps()).unwrap();
        assert_eq!(x, y);
        assert!(x.feasible && (0.0..=1.0).contains(&x.proxy_accuracy));
        assert_eq!(x.latency, p.estimate(&sketch.instantiate(&b)).unwrap());
        let zero = TrainConfig { epochs: 0, ..cfg };
        assert!(score_bundle(&b, &sketch, &data, &zero, &p, &caps()).is_err());
    }

    #[test]
    fn over_budget_is_infeasible() {
        let (sketch, data, cfg) = quick();
        let mut tight = caps();
        tight.insert(RES_MEMORY.into(), 1.0);
        let c = score_bundle(
            &Bundle::separable(8),
            &sketch,
            &data,
            &cfg,
            &HardwareProfile::reference(),
            &tight,
        )
        .unwrap();
        assert!(!c.feasible);
        assert_eq!(c.reason.as_deref(), Some("resource budget exceeded"));
    }

    #[test]
    fn parallel_scoring_matches_sequential() {
        let (sketch, data, cfg) = quick();
        let p = HardwareProfile::reference();
        let bundles = vec![
            Bundle::separable(4),
            Bundle::separable(8),
            Bundle::new(vec![pw(6)]),
        ];
        let par = score_bundles(&bundles, &sketch, &data, &cfg, &p, &caps());
        for (i, (b, r)) in bundles.iter().zip(par).enumerate() {
            let c = TrainConfig {
                seed: cfg.seed ^ i as u64,
                ..cfg
            };
            assert_eq!(
                r.unwrap(),
                score_bundle(b, &sketch, &data, &c, &p, &caps()).unwrap()
            );
        }
    }

    #[test]
    fn selection_ranks_by_accuracy() {
        let c = |acc: f64, lat: f64, feasible: bool| BundleCandidate {
            bundle: Bundle::separable(4),
            latency: CostEstimate {
                latency_ms: lat,
                ..CostEstimate::zero()
            },
            proxy_accuracy: acc,
            val_loss: 0.0,
            loss_curve: vec![],
            feasible,
            reason: None,
        };
        let all = vec![
            c(0.2, 1.0, true),
            c(0.9, 5.0, true),
            c(0.5, 1.0, true),
            c(0.99, 1.0, false),
        ];
        let top = select_bundles(&all, 2.0, 2);
        assert_eq!(
            top.iter().map(|c| c.proxy_accuracy).collect::<Vec<_>>(),
            vec![0.5, 0.2]
        );
    }
}
