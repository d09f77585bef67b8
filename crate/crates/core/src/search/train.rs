//! Toy single-object trainer used to rank bundles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, SearchError};
use crate::arch::{forward, forward_tape, LayerWeights, NetSpec, WeightSet};
use crate::detect::{
    decode_boxes, detection_loss, encode_target, iou, synthetic_ratio, Anchor, BBox, NUM_ANCHORS,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    /// Normalized ground-truth box.
    pub target: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Bright rectangles on dim noise. Box areas follow the small-object
    /// skewed ratio distribution, floored at four pixels.
    pub fn synthetic(n_train: usize, n_val: usize, shape: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = shape;
        let mut sample = || {
            let min_ratio = 4.0 / (h * w) as f64;
            let ratio = synthetic_ratio(&mut rng).max(min_ratio);
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let bw = (ratio * aspect).sqrt().min(1.0);
            let bh = (ratio / aspect).sqrt().min(1.0);
            let x0 = rng.gen::<f64>() * (1.0 - bw);
            let y0 = rng.gen::<f64>() * (1.0 - bh);
            let target = BBox {
                xmin: x0,
                ymin: y0,
                xmax: x0 + bw,
                ymax: y0 + bh,
            };
            let mut data = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let (py, px) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
                        let inside = px >= target.xmin
                            && px < target.xmax
                            && py >= target.ymin
                            && py < target.ymax;
                        data.push(if inside { 1.0 } else { rng.gen_range(0.0..0.2) });
                    }
                }
            }
            Sample {
                image: Tensor::new(&shape, data).expect("shape is positive"),
                target,
            }
        };
        let train = (0..n_train).map(|_| sample()).collect();
        let val = (0..n_val).map(|_| sample()).collect();
        Dataset { train, val }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training loss before training and after every epoch.
    pub loss_curve: Vec<f64>,
    pub val_loss: f64,
    /// Mean IoU of the decoded box on the validation split.
    pub val_iou: f64,
    /// Epoch at which the loss stopped being finite.
    pub diverged_at: Option<usize>,
}

fn sample_loss(
    net: &NetSpec,
    w: &WeightSet<f64>,
    s: &Sample,
    anchors: &[Anchor; NUM_ANCHORS],
) -> Result<(f64, f64)> {
    let y = forward(net, w, &s.image)?;
    let (_, hc, wc) = y.chw().map_err(crate::arch::ArchError::from)?;
    let (loss, _) = detection_loss(&y, &encode_target(&s.target, hc, wc, anchors))?;
    let det = decode_boxes(&y, anchors)?;
    Ok((loss, iou(&det.bbox, &s.target)))
}

/// Mean loss and mean IoU over `samples`.
pub fn evaluate(
    net: &NetSpec,
    w: &WeightSet<f64>,
    samples: &[Sample],
    anchors: &[Anchor; NUM_ANCHORS],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(SearchError::Config("no samples to evaluate".into()));
    }
    let (mut l, mut q) = (0.0, 0.0);
    for s in samples {
        let (a, b) = sample_loss(net, w, s, anchors)?;
        l += a;
        q += b;
    }
    let n = samples.len() as f64;
    Ok((l / n, q / n))
}

fn sgd_step(w: &mut WeightSet<f64>, g: &WeightSet<f64>, lr: f64) {
    for ((_, lw), (_, lg)) in w.iter_mut().zip(g.iter()) {
        match (lw, lg) {
            (LayerWeights::Depthwise(t), LayerWeights::Depthwise(d))
            | (LayerWeights::Pointwise(t), LayerWeights::Pointwise(d)) => {
                t.data_mut()
                    .iter_mut()
                    .zip(d.data())
                    .for_each(|(v, dv)| *v -= lr * dv);
            }
            // running statistics stay fixed
            (LayerWeights::BatchNorm(p), LayerWeights::BatchNorm(d)) => {
                p.gamma
                    .iter_mut()
                    .zip(&d.gamma)
                    .for_each(|(v, dv)| *v -= lr * dv);
                p.beta
                    .iter_mut()
                    .zip(&d.beta)
                    .for_each(|(v, dv)| *v -= lr * dv);
            }
            _ => unreachable!("gradients share the weight layout"),
        }
    }
}

/// Plain per-sample SGD. Samples are visited in a seeded shuffled order.
pub fn train(
    net: &NetSpec,
    weights: &mut WeightSet<f64>,
    data: &Dataset,
    cfg: &TrainConfig,
    anchors: &[Anchor; NUM_ANCHORS],
) -> Result<TrainReport> {
    if cfg.epochs == 0 {
        return Err(SearchError::Config("epochs must be at least 1".into()));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(SearchError::Config(
            "dataset splits must be non-empty".into(),
        ));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(SearchError::Config("learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut curve = vec![evaluate(net, weights, &data.train, anchors)?.0];
    let mut diverged_at = None;
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &i in &order {
            let s = &data.train[i];
            let tape = forward_tape(net, weights, &s.image)?;
            let (_, hc, wc) = tape.output().chw().map_err(crate::arch::ArchError::from)?;
            let target = encode_target(&s.target, hc, wc, anchors);
            let (_, g) = detection_loss(tape.output(), &target)?;
            let (gw, _) = tape.backward(net, weights, &g)?;
            sgd_step(weights, &gw, cfg.learning_rate);
        }
        let loss = evaluate(net, weights, &data.train, anchors)?.0;
        curve.push(loss);
        if !loss.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
    }
    let (val_loss, val_iou) = if diverged_at.is_some() {
        (f64::NAN, 0.0)
    } else {
        evaluate(net, weights, &data.val, anchors)?
    };
    Ok(TrainReport {
        loss_curve: curve,
        val_loss,
        val_iou,
        diverged_at,
    })
}
