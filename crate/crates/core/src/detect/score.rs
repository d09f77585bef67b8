use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{iou, DetectError, GroundTruthRecord, Prediction, Result};

/// Hardware category; fixes the logarithm base of the energy score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Gpu,
    Fpga,
}

impl Track {
    pub fn log_base(self) -> f64 {
        match self {
            Track::Gpu => 10.0,
            Track::Fpga => 2.0,
        }
    }

    fn log(self, v: f64) -> f64 {
        match self {
            Track::Gpu => v.log10(),
            Track::Fpga => v.log2(),
        }
    }
}

impl FromStr for Track {
    type Err = DetectError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpu" => Ok(Track::Gpu),
            "fpga" => Ok(Track::Fpga),
            _ => Err(DetectError::Domain(format!(
                "unknown track '{}', expected gpu or fpga",
                s
            ))),
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Track::Gpu => "gpu",
            Track::Fpga => "fpga",
        })
    }
}

fn mean(values: &[f64], what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(DetectError::Domain(format!("{} list is empty", what)));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean IoU over all evaluated images.
pub fn iou_score(ious: &[f64]) -> Result<f64> {
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DetectError::Domain(format!("IoU {} outside [0, 1]", v)));
    }
    mean(ious, "IoU")
}

/// Mean energy over all entries.
pub fn mean_energy(energies: &[f64]) -> Result<f64> {
    if let Some(v) = energies.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(DetectError::Domain(format!("energy {} is not positive", v)));
    }
    mean(energies, "energy")
}

/// `max(0, 1 + 0.2 * log_x(e_mean / e_i))`.
pub fn energy_score(e_i: f64, e_mean: f64, track: Track) -> Result<f64> {
    if !(e_i > 0.0 && e_mean > 0.0 && e_i.is_finite() && e_mean.is_finite()) {
        return Err(DetectError::Domain(format!(
            "energies must be positive, got e_i={} e_mean={}",
            e_i, e_mean
        )));
    }
    Ok((1.0 + 0.2 * track.log(e_mean / e_i)).max(0.0))
}

/// `r_iou * (1 + es)`.
pub fn total_score(r_iou: f64, es: f64) -> f64 {
    r_iou * (1.0 + es)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub r_iou: f64,
    pub energy_j: f64,
    pub e_mean: f64,
    pub es: f64,
    pub ts: f64,
    pub track: Track,
    pub images: usize,
    pub missing_predictions: usize,
}

/// Scores one entry. Images without a prediction count as IoU 0; a
/// prediction for an image absent from the ground truth is an error.
pub fn score_predictions(
    predictions: &[Prediction],
    truth: &[GroundTruthRecord],
    energy_j: f64,
    all_energies_j: &[f64],
    track: Track,
) -> Result<ScoreReport> {
    if predictions.is_empty() {
        return Err(DetectError::Domain("no predictions".into()));
    }
    let mut gt = BTreeMap::new();
    for r in truth {
        if gt.insert(r.image_id.as_str(), r).is_some() {
            return Err(DetectError::Duplicate(r.image_id.clone()));
        }
    }
    let mut by_id = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for p in predictions {
        if !gt.contains_key(p.image_id.as_str()) {
            unknown.insert(p.image_id.clone());
        } else if by_id.insert(p.image_id.as_str(), p).is_some() {
            return Err(DetectError::Duplicate(p.image_id.clone()));
        }
    }
    if !unknown.is_empty() {
        return Err(DetectError::UnknownImages(unknown.into_iter().collect()));
    }
    // ground-truth order keeps the reduction deterministic
    let ious: Vec<f64> = truth
        .iter()
        .map(|r| {
            by_id
                .get(r.image_id.as_str())
                .map_or(0.0, |p| iou(&p.bbox, &r.bbox))
        })
        .collect();
    let r_iou = iou_score(&ious)?;
    let e_mean = mean_energy(all_energies_j)?;
    let es = energy_score(energy_j, e_mean, track)?;
    Ok(ScoreReport {
        r_iou,
        energy_j,
        e_mean,
        es,
        ts: total_score(r_iou, es),
        track,
        images: truth.len(),
        missing_predictions: truth.len() - by_id.len(),
    })
}
