//! Object Keypoint Similarity.
//!
//! `OKS = sum_i exp(-d_i^2 / (2 s^2 k_i^2)) [v_i > 0] / sum_i [v_i > 0]`,
//! with the visibility indicator taken from the ground truth. Distances and
//! scales must be expressed in the same unit; only their ratio matters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FalloffConstants, InstanceAnnotation, Keypoint, Pose};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct OksValue(f64);

impl OksValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<OksValue> for f64 {
    fn from(v: OksValue) -> f64 {
        v.0
    }
}

/// Gaussian falloff term for a single keypoint at distance `d`.
pub fn keypoint_similarity(d: f64, s: f64, k: f64) -> Result<f64> {
    if !(s > 0.0) || !(k > 0.0) {
        return Err(Error::InvalidScale {
            scale: s,
            falloff: k,
        });
    }
    let denom = 2.0 * s * s * k * k;
    Ok((-(d * d) / denom).exp())
}

/// OKS of a predicted keypoint set against ground-truth keypoints with scale `s`.
pub fn oks_keypoints(
    pred: &[Keypoint],
    gt: &[Keypoint],
    scale: f64,
    kc: &FalloffConstants,
) -> Result<OksValue> {
    if pred.len() != gt.len() {
        return Err(Error::KeypointCountMismatch {
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if kc.len() != gt.len() {
        return Err(Error::KeypointCountMismatch {
            expected: kc.len(),
            actual: gt.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, g), &k) in pred.iter().zip(gt).zip(kc.as_slice()) {
        if !g.visibility.is_labeled() {
            continue;
        }
        let d = (p.x - g.x).hypot(p.y - g.y);
        total += keypoint_similarity(d, scale, k)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(OksValue((total / count as f64).clamp(0.0, 1.0)))
}

pub fn oks(pred: &Pose, gt: &InstanceAnnotation, kc: &FalloffConstants) -> Result<OksValue> {
    oks_keypoints(&pred.keypoints, gt.keypoints(), gt.scale, kc)
}

/// Row-major matrix of OKS values; entries whose evaluation failed are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct OksMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Option<f64>>,
}

impl OksMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.data[row * self.cols + col]
    }
}

pub fn pairwise_oks(
    preds: &[Pose],
    gts: &[InstanceAnnotation],
    kc: &FalloffConstants,
) -> OksMatrix {
    let data = preds
        .iter()
        .flat_map(|p| gts.iter().map(move |g| oks(p, g, kc).ok().map(f64::from)))
        .collect();
    OksMatrix {
        rows: preds.len(),
        cols: gts.len(),
        data,
    }
}
