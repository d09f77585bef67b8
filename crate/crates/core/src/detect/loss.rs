//! Training loss for the single-object head: confidence cross-entropy on
//! every anchor plus squared error on the coordinates of the anchor that owns
//! the ground-truth box.

use super::{sigmoid, Anchor, BBox, DetectError, Result, HEAD_VALUES, NUM_ANCHORS};
use crate::tensor::Tensor;

/// Regression targets for the responsible cell and anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionTarget {
    pub cell: (usize, usize),
    pub anchor: usize,
    /// Center offset within the cell, in `[0, 1)`.
    pub fx: f64,
    pub fy: f64,
    /// Log size relative to the anchor.
    pub tw: f64,
    pub th: f64,
}

pub fn encode_target(
    gt: &BBox,
    hc: usize,
    wc: usize,
    anchors: &[Anchor; NUM_ANCHORS],
) -> DetectionTarget {
    let (gx, gy) = gt.center();
    let sx = (gx * wc as f64).clamp(0.0, wc as f64 - 1e-9);
    let sy = (gy * hc as f64).clamp(0.0, hc as f64 - 1e-9);
    let (cx, cy) = (sx.floor() as usize, sy.floor() as usize);
    let (gw, gh) = (gt.width().max(1e-6), gt.height().max(1e-6));
    // anchor with the best shape overlap when centers coincide
    let shape_iou = |a: &Anchor| {
        let inter = gw.min(a.w) * gh.min(a.h);
        inter / (gw * gh + a.w * a.h - inter)
    };
    let mut anchor = 0;
    for (k, a) in anchors.iter().enumerate() {
        if shape_iou(a) > shape_iou(&anchors[anchor]) {
            anchor = k;
        }
    }
    DetectionTarget {
        cell: (cy, cx),
        anchor,
        fx: sx - cx as f64,
        fy: sy - cy as f64,
        tw: (gw / anchors[anchor].w).ln(),
        th: (gh / anchors[anchor].h).ln(),
    }
}

fn bce_with_logit(l: f64, t: f64) -> f64 {
    l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
}

/// Loss value and its gradient with respect to the head.
pub fn detection_loss(head: &Tensor<f64>, target: &DetectionTarget) -> Result<(f64, Tensor<f64>)> {
    let (hc, wc) = match *head.shape() {
        [c, hc, wc] if c == NUM_ANCHORS * HEAD_VALUES => (hc, wc),
        ref s => return Err(DetectError::Shape(format!("bad head shape {:?}", s))),
    };
    let (cy, cx) = target.cell;
    if cy >= hc || cx >= wc || target.anchor >= NUM_ANCHORS {
        return Err(DetectError::Shape(format!(
            "target cell {:?} outside a {}x{} grid",
            target.cell, hc, wc
        )));
    }
    let idx = |ch: usize, y: usize, x: usize| (ch * hc + y) * wc + x;
    let v = head.data();
    let mut grad = vec![0.0; v.len()];
    let negatives = (NUM_ANCHORS * hc * wc - 1) as f64;
    let mut loss = 0.0;
    for a in 0..NUM_ANCHORS {
        for y in 0..hc {
            for x in 0..wc {
                let i = idx(HEAD_VALUES * a + 4, y, x);
                let positive = a == target.anchor && (y, x) == target.cell;
                let (t, weight) = if positive {
                    (1.0, 1.0)
                } else {
                    (0.0, 1.0 / negatives.max(1.0))
                };
                loss += weight * bce_with_logit(v[i], t);
                grad[i] = weight * (sigmoid(v[i]) - t);
            }
        }
    }
    let base = HEAD_VALUES * target.anchor;
    for (k, goal) in [target.fx, target.fy].into_iter().enumerate() {
        let i = idx(base + k, cy, cx);
        let s = sigmoid(v[i]);
        loss += (s - goal).powi(2);
        grad[i] = 2.0 * (s - goal) * s * (1.0 - s);
    }
    for (k, goal) in [target.tw, target.th].into_iter().enumerate() {
        let i = idx(base + 2 + k, cy, cx);
        loss += (v[i] - goal).powi(2);
        grad[i] = 2.0 * (v[i] - goal);
    }
    Ok((
        loss,
        Tensor::new(head.shape(), grad).expect("same shape as head"),
    ))
}
