//! Inference decoding: score-map peaks to pose candidates, then OKS-based
//! non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{OffsetField, ScoreMap};
use crate::oks::oks_keypoints;
use crate::types::{FalloffConstants, InstanceAnnotation, Keypoint, Pose, Visibility};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.01;
pub const DEFAULT_TOP_K: usize = 30;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pose: Pose,
    pub score: f64,
    /// `(x, y)` of the cell the pose was regressed from.
    pub source_cell: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub top_k: usize,
    pub nms_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

/// True when `(y, x)` beats all 8 neighbours under the order (score, then
/// earlier raster position). Equal-valued plateaus therefore yield peaks
/// only where no earlier neighbour shares the value.
fn is_peak(map: &ScoreMap, y: usize, x: usize) -> bool {
    let v = map.get(y, x);
    let (h, w) = (map.height() as isize, map.width() as isize);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h || nx >= w {
                continue;
            }
            let n = map.get(ny as usize, nx as usize);
            let earlier = dy < 0 || (dy == 0 && dx < 0);
            if n > v || (n == v && earlier) {
                return false;
            }
        }
    }
    true
}

/// Pose regressed at a cell: `keypoint_i = cell - D_{c->k}^i`.
pub fn pose_at(offsets: &OffsetField, y: usize, x: usize, score: f64) -> Pose {
    let k = offsets.channels() / 2;
    let keypoints = (0..k)
        .map(|i| {
            Keypoint::new(
                x as f64 - offsets.get(2 * i, y, x),
                y as f64 - offsets.get(2 * i + 1, y, x),
                Visibility::LabeledVisible,
            )
        })
        .collect();
    Pose::new(keypoints, score)
}

pub fn extract_candidates(
    score_map: &ScoreMap,
    offsets: &OffsetField,
    score_threshold: f64,
    top_k: usize,
) -> Result<Vec<Candidate>> {
    if offsets.height() != score_map.height()
        || offsets.width() != score_map.width()
        || offsets.channels() % 2 != 0
    {
        return Err(Error::ShapeMismatch(format!(
            "score map {}x{} vs offsets {}x{}x{}",
            score_map.height(),
            score_map.width(),
            offsets.channels(),
            offsets.height(),
            offsets.width()
        )));
    }
    let mut peaks = Vec::new();
    for y in 0..score_map.height() {
        for x in 0..score_map.width() {
            let v = score_map.get(y, x);
            if v >= score_threshold && v > 0.0 && is_peak(score_map, y, x) {
                peaks.push((v, y, x));
            }
        }
    }
    // Stable sort keeps raster order among equal scores.
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(top_k);
    Ok(peaks
        .into_iter()
        .map(|(score, y, x)| Candidate {
            pose: pose_at(offsets, y, x, score),
            score,
            source_cell: (x, y),
        })
        .collect())
}

/// Scale used when comparing two candidates: square root of the bounding-box
/// area of the reference pose's keypoints, at least one cell.
pub fn candidate_scale(pose: &Pose) -> f64 {
    match pose.labeled_extent() {
        Some((lo, hi)) => ((hi.x - lo.x) * (hi.y - lo.y)).max(1.0).sqrt(),
        None => 1.0,
    }
}

/// OKS of `other` measured against `reference` treated as ground truth.
pub fn candidate_oks(reference: &Pose, other: &Pose, kc: &FalloffConstants) -> f64 {
    oks_keypoints(
        &other.keypoints,
        &reference.keypoints,
        candidate_scale(reference),
        kc,
    )
    .map(f64::from)
    .unwrap_or(0.0)
}

/// Greedy OKS suppression in descending score order.
pub fn oks_nms(
    candidates: &[Candidate],
    nms_threshold: f64,
    kc: &FalloffConstants,
) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));
    let mut suppressed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(candidates[i].clone());
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && candidate_oks(&candidates[i].pose, &candidates[j].pose, kc) > nms_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

pub fn decode(
    score_map: &ScoreMap,
    offsets: &OffsetField,
    params: &DecodeParams,
    kc: &FalloffConstants,
) -> Result<Vec<Candidate>> {
    let raw = extract_candidates(score_map, offsets, params.score_threshold, params.top_k)?;
    Ok(oks_nms(&raw, params.nms_threshold, kc))
}

/// Fixed-count retention used for score/quality diagnostics.
pub fn retain_top(mut candidates: Vec<Candidate>, count: usize) -> Vec<Candidate> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    candidates.truncate(count);
    candidates
}

/// `(instance score, best OKS against any ground truth)` per candidate.
pub fn score_quality_pairs(
    candidates: &[Candidate],
    gts: &[InstanceAnnotation],
    kc: &FalloffConstants,
) -> Vec<(f64, f64)> {
    candidates
        .iter()
        .map(|c| {
            let best = gts
                .iter()
                .filter_map(|g| crate::oks::oks(&c.pose, g, kc).ok())
                .map(f64::from)
                .fold(0.0, f64::max);
            (c.score, best)
        })
        .collect()
}
