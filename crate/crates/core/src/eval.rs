//! COCO-convention keypoint detection metrics.
//!
//! Greedy per-image OKS matching in descending score order, 101-point
//! interpolated precision, AP averaged over OKS thresholds 0.50:0.05:0.95,
//! at most 20 detections per image. Size-stratified AP treats ground truth
//! outside the area band as ignored, as does the reference evaluator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oks::oks;
use crate::types::{FalloffConstants, InstanceAnnotation, Pose};

pub const MAX_DETECTIONS: usize = 20;
pub const MEDIUM_AREA: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const LARGE_AREA: (f64, f64) = (96.0 * 96.0, f64::INFINITY);
pub const ALL_AREA: (f64, f64) = (0.0, f64::INFINITY);

/// OKS thresholds `0.50, 0.55, ..., 0.95`.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + i as f64 * 0.05).collect()
}

/// Recall sample points `0.00, 0.01, ..., 1.00`.
pub fn recall_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 * 0.01).collect()
}

/// A scored pose prediction on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub pose: Pose,
}

/// Outcome of matching one image's detections at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    /// Detection scores in processing (descending score) order.
    pub scores: Vec<f64>,
    /// Matched ground-truth index (into the image's annotation list) per detection.
    pub matched_gt: Vec<Option<usize>>,
    /// Detections excluded from the precision/recall tallies.
    pub ignored: Vec<bool>,
    /// Ground truths that count toward recall.
    pub num_gt: usize,
}

impl ImageMatches {
    pub fn false_positives(&self) -> usize {
        self.matched_gt
            .iter()
            .zip(&self.ignored)
            .filter(|(m, ig)| m.is_none() && !**ig)
            .count()
    }
}

fn in_band(area: f64, band: (f64, f64)) -> bool {
    area >= band.0 && area < band.1
}

/// Image-pixel area of a detection's keypoint bounding box.
fn detection_area(pose: &Pose, stride: f64) -> f64 {
    pose.labeled_extent()
        .map(|(lo, hi)| (hi.x - lo.x) * (hi.y - lo.y) * stride * stride)
        .unwrap_or(0.0)
}

/// Orders detections by descending score (stable) and keeps the first `max_dets`.
fn ranked<'a>(dets: &[&'a Pose], max_dets: usize) -> Vec<&'a Pose> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v.truncate(max_dets);
    v
}

/// Greedy matching for one image at one threshold over all ground truth.
pub fn match_detections(
    dets: &[&Pose],
    gts: &[InstanceAnnotation],
    threshold: f64,
    kc: &FalloffConstants,
) -> ImageMatches {
    let ranked = ranked(dets, usize::MAX);
    let ious = oks_table(&ranked, gts, kc);
    match_ranked(&ranked, gts, &ious, threshold, ALL_AREA, 1.0)
}

fn oks_table(dets: &[&Pose], gts: &[InstanceAnnotation], kc: &FalloffConstants) -> Vec<Vec<f64>> {
    dets.iter()
        .map(|d| {
            gts.iter()
                .map(|g| oks(d, g, kc).map(f64::from).unwrap_or(0.0))
                .collect()
        })
        .collect()
}

fn match_ranked(
    dets: &[&Pose],
    gts: &[InstanceAnnotation],
    ious: &[Vec<f64>],
    threshold: f64,
    band: (f64, f64),
    stride: f64,
) -> ImageMatches {
    let gt_ignore: Vec<bool> = gts.iter().map(|g| !in_band(g.area, band)).collect();
    // Non-ignored ground truth is considered first.
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| gt_ignore[g]);

    let mut gt_taken = vec![false; gts.len()];
    let mut matched_gt = vec![None; dets.len()];
    let mut ignored = vec![false; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        let mut best = threshold.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for &g in &gt_order {
            if gt_taken[g] {
                continue;
            }
            if let Some(prev) = m {
                if !gt_ignore[prev] && gt_ignore[g] {
                    break;
                }
            }
            if ious[d][g] < best {
                continue;
            }
            best = ious[d][g];
            m = Some(g);
        }
        match m {
            Some(g) => {
                gt_taken[g] = true;
                matched_gt[d] = Some(g);
                ignored[d] = gt_ignore[g];
            }
            None => ignored[d] = !in_band(detection_area(det, stride), band),
        }
    }
    ImageMatches {
        scores: dets.iter().map(|d| d.score).collect(),
        matched_gt,
        ignored,
        num_gt: gt_ignore.iter().filter(|ig| !**ig).count(),
    }
}

/// Interpolated precision at every recall threshold plus final recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub threshold: f64,
    pub precision: Vec<f64>,
    pub ap: f64,
    pub recall: f64,
}

/// 101-point interpolated AP over the pooled matches of a dataset.
/// Returns `None` when no ground truth counts toward recall.
pub fn average_precision(matches: &[ImageMatches], threshold: f64) -> Option<PrCurve> {
    let num_gt: usize = matches.iter().map(|m| m.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, bool, bool)> = matches
        .iter()
        .flat_map(|m| {
            m.scores
                .iter()
                .zip(&m.matched_gt)
                .zip(&m.ignored)
                .map(|((s, g), ig)| (*s, g.is_some(), *ig))
        })
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(pooled.len());
    let mut precision = Vec::with_capacity(pooled.len());
    for &(_, is_match, ig) in &pooled {
        if !ig {
            if is_match {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let curve: Vec<f64> = recall_thresholds()
        .into_iter()
        .map(|r| {
            let idx = recall.partition_point(|&rc| rc < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    let ap = curve.iter().sum::<f64>() / curve.len() as f64;
    Some(PrCurve {
        threshold,
        precision: curve,
        ap,
        recall: recall.last().copied().unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: Option<f64>,
    pub curves: Vec<PrCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub falloff: FalloffConstants,
    /// Image pixels per grid cell, for detection areas.
    pub stride: f64,
    pub max_dets: usize,
}

impl EvalParams {
    pub fn new(falloff: FalloffConstants, stride: f64) -> Self {
        Self {
            falloff,
            stride,
            max_dets: MAX_DETECTIONS,
        }
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

pub fn summarize(
    dets: &[Detection],
    gts: &BTreeMap<u64, Vec<InstanceAnnotation>>,
    params: &EvalParams,
) -> Result<EvalResult> {
    let mut per_image: BTreeMap<u64, Vec<&Pose>> = gts.keys().map(|&id| (id, Vec::new())).collect();
    for d in dets {
        per_image
            .get_mut(&d.image_id)
            .ok_or(Error::UnknownImageId(d.image_id))?
            .push(&d.pose);
    }
    let prepared: Vec<(Vec<&Pose>, &[InstanceAnnotation], Vec<Vec<f64>>)> = per_image
        .iter()
        .map(|(id, ds)| {
            let r = ranked(ds, params.max_dets);
            let g = gts[id].as_slice();
            let ious = oks_table(&r, g, &params.falloff);
            (r, g, ious)
        })
        .collect();

    let run = |t: f64, band: (f64, f64)| {
        let matches: Vec<ImageMatches> = prepared
            .iter()
            .map(|(r, g, ious)| match_ranked(r, g, ious, t, band, params.stride))
            .collect();
        average_precision(&matches, t)
    };

    let thresholds = oks_thresholds();
    let curves: Vec<Option<PrCurve>> = thresholds.iter().map(|&t| run(t, ALL_AREA)).collect();
    let ap = mean_defined(curves.iter().map(|c| c.as_ref().map(|c| c.ap)));
    let ar = mean_defined(curves.iter().map(|c| c.as_ref().map(|c| c.recall)));
    let ap_m = mean_defined(thresholds.iter().map(|&t| run(t, MEDIUM_AREA).map(|c| c.ap)));
    let ap_l = mean_defined(thresholds.iter().map(|&t| run(t, LARGE_AREA).map(|c| c.ap)));
    Ok(EvalResult {
        ap,
        ap50: curves[0].as_ref().map(|c| c.ap),
        ap75: curves[5].as_ref().map(|c| c.ap),
        ap_m,
        ap_l,
        ar,
        curves: curves.into_iter().flatten().collect(),
    })
}
