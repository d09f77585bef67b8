//! Single-object box decoding, IoU, contest scoring, manifests and the
//! object-size distribution.

mod distribution;
mod loss;
mod manifest;
mod score;

pub use distribution::{
    analyze_size_distribution, synthetic_manifest, synthetic_ratio, SizeDistribution,
    SYNTH_IMAGE_H, SYNTH_IMAGE_W,
};
pub use loss::{detection_loss, encode_target, DetectionTarget};
pub use manifest::{parse_manifest, parse_predictions, to_jsonl, GroundTruthRecord, Prediction};
pub use score::{
    energy_score, iou_score, mean_energy, score_predictions, total_score, ScoreReport, Track,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const HEAD_VALUES: usize = 5;
pub const NUM_ANCHORS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown image ids: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("duplicate image id '{0}'")]
    Duplicate(String),
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(DetectError::Domain(format!("non-finite box {:?}", b)));
        }
        if xmin > xmax || ymin > ymax {
            return Err(DetectError::Domain(format!("inverted box {:?}", b)));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn clamp_unit(&self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox {
            xmin: c(self.xmin),
            ymin: c(self.ymin),
            xmax: c(self.xmax),
            ymax: c(self.ymax),
        }
    }

    pub fn within_unit(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        BBox {
            xmin: self.xmin * sx,
            ymin: self.ymin * sy,
            xmax: self.xmax * sx,
            ymax: self.ymax * sy,
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Prior box size, normalized to the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(DetectError::Domain(format!(
                "anchor sizes must be positive, got ({}, {})",
                w, h
            )));
        }
        Ok(Anchor { w, h })
    }
}

pub const DEFAULT_ANCHORS: [Anchor; NUM_ANCHORS] =
    [Anchor { w: 0.05, h: 0.08 }, Anchor { w: 0.15, h: 0.25 }];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub conf: f64,
    /// Grid cell as `(row, col)`.
    pub cell: (usize, usize),
    pub anchor: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn head_dims(head: &Tensor<f64>) -> Result<(usize, usize)> {
    match *head.shape() {
        [c, hc, wc] if c == NUM_ANCHORS * HEAD_VALUES => Ok((hc, wc)),
        ref s => Err(DetectError::Shape(format!(
            "head must be ({}, Hc, Wc), got {:?}",
            NUM_ANCHORS * HEAD_VALUES,
            s
        ))),
    }
}

/// Decodes anchor `a` at cell `(cy, cx)`; confidence and the unclamped box.
pub fn decode_cell(
    head: &Tensor<f64>,
    anchors: &[Anchor; NUM_ANCHORS],
    a: usize,
    cy: usize,
    cx: usize,
) -> Result<(BBox, f64)> {
    let (hc, wc) = head_dims(head)?;
    if a >= NUM_ANCHORS || cy >= hc || cx >= wc {
        return Err(DetectError::Shape(format!(
            "cell ({}, {}) anchor {} outside a {}x{} grid",
            cy, cx, a, hc, wc
        )));
    }
    let v = |k: usize| head.at3(HEAD_VALUES * a + k, cy, cx);
    let x = (cx as f64 + sigmoid(v(0))) / wc as f64;
    let y = (cy as f64 + sigmoid(v(1))) / hc as f64;
    let w = anchors[a].w * v(2).exp();
    let h = anchors[a].h * v(3).exp();
    Ok((BBox::from_center(x, y, w, h), sigmoid(v(4))))
}

/// The most confident box over all cells and anchors. Ties keep the first
/// candidate in (row, col, anchor) order.
pub fn decode_boxes(head: &Tensor<f64>, anchors: &[Anchor; NUM_ANCHORS]) -> Result<Detection> {
    let (hc, wc) = head_dims(head)?;
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for cy in 0..hc {
        for cx in 0..wc {
            for a in 0..NUM_ANCHORS {
                // sigmoid is monotone, so compare logits
                let logit = head.at3(HEAD_VALUES * a + 4, cy, cx);
                if best.is_none_or(|(l, ..)| logit > l) {
                    best = Some((logit, cy, cx, a));
                }
            }
        }
    }
    let (_, cy, cx, a) = best.expect("grid has at least one cell");
    let (bbox, conf) = decode_cell(head, anchors, a, cy, cx)?;
    Ok(Detection {
        bbox: bbox.clamp_unit(),
        conf,
        cell: (cy, cx),
        anchor: a,
    })
}
