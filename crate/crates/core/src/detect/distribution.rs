use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, DetectError, GroundTruthRecord, Result};

pub const SYNTH_IMAGE_W: u32 = 640;
pub const SYNTH_IMAGE_H: u32 = 360;

/// Histogram of box-area / image-area ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    pub edges: Vec<f64>,
    /// `counts[k]` covers `[edges[k], edges[k+1])`; ratios below the first
    /// edge land in the first bin and ratios at or above the last edge in the
    /// last bin.
    pub counts: Vec<usize>,
    pub cdf: Vec<f64>,
    pub total: usize,
}

impl SizeDistribution {
    /// Fraction of ratios strictly below `edge`, which must be an interior
    /// edge or the last edge.
    pub fn cdf_at(&self, edge: f64) -> Option<f64> {
        let k = self.edges.iter().position(|&e| e == edge)?;
        (k >= 1).then(|| self.cdf[k - 1])
    }
}

pub fn analyze_size_distribution(
    records: &[GroundTruthRecord],
    edges: &[f64],
) -> Result<SizeDistribution> {
    if records.is_empty() {
        return Err(DetectError::Domain("manifest is empty".into()));
    }
    if edges.len() < 2 {
        return Err(DetectError::Domain("need at least two bin edges".into()));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|p| p[0] >= p[1]) {
        return Err(DetectError::Domain(format!(
            "bin edges must be finite and strictly increasing, got {:?}",
            edges
        )));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    for r in records {
        let ratio = r.bbox.area();
        // first edge greater than ratio, minus one
        let k = edges.partition_point(|&e| e <= ratio);
        counts[k.saturating_sub(1).min(bins - 1)] += 1;
    }
    let total = records.len();
    let mut acc = 0;
    let cdf = counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / total as f64
        })
        .collect();
    Ok(SizeDistribution {
        edges: edges.to_vec(),
        counts,
        cdf,
        total,
    })
}

/// Mixture bins `(probability, lo, hi)` sampled log-uniformly: 31% of
/// objects under 1% of the image and 91% under 9%.
const RATIO_BINS: [(f64, f64, f64); 3] =
    [(0.31, 1e-4, 0.01), (0.60, 0.01, 0.09), (0.09, 0.09, 0.5)];

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let v = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
    v.clamp(lo, hi * (1.0 - 1e-12))
}

pub fn synthetic_ratio(rng: &mut impl Rng) -> f64 {
    let mut u = rng.gen::<f64>();
    for &(p, lo, hi) in &RATIO_BINS {
        if u < p {
            return log_uniform(rng, lo, hi);
        }
        u -= p;
    }
    let (_, lo, hi) = RATIO_BINS[RATIO_BINS.len() - 1];
    log_uniform(rng, lo, hi)
}

/// Seeded manifest of `n` single-object images with small-object-skewed
/// box sizes and aspect ratios in `[0.5, 2]`.
pub fn synthetic_manifest(n: usize, seed: u64) -> Vec<GroundTruthRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let ratio = synthetic_ratio(&mut rng);
            let aspect = log_uniform(&mut rng, 0.5, 2.0);
            let w = (ratio * aspect).sqrt();
            let h = (ratio / aspect).sqrt();
            let x = rng.gen::<f64>() * (1.0 - w);
            let y = rng.gen::<f64>() * (1.0 - h);
            GroundTruthRecord {
                image_id: format!("{:06}", i),
                image_w: SYNTH_IMAGE_W,
                image_h: SYNTH_IMAGE_H,
                bbox: BBox {
                    xmin: x,
                    ymin: y,
                    xmax: x + w,
                    ymax: y + h,
                },
            }
        })
        .collect()
}
