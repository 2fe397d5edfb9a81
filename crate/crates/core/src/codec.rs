//! Training-target construction: center regions, the quality-aware instance
//! score map, the pixel weight map and dense center-to-keypoint offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, ScoreMap};
use crate::oks::oks;
use crate::types::{FalloffConstants, GridGeometry, InstanceAnnotation, Point2, Pose};

pub const DEFAULT_GAMMA: f64 = 4.0;
pub const FOREGROUND_WEIGHT: f64 = 1.0;
pub const BACKGROUND_WEIGHT: f64 = 0.1;

/// Per-cell owner of the center region (`Omega_n`) the cell lies in.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    height: usize,
    width: usize,
    gamma: f64,
    owners: Vec<Option<usize>>,
}

impl RegionAssignment {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn owner(&self, y: usize, x: usize) -> Option<usize> {
        self.owners[y * self.width + x]
    }

    /// Assigned cells as `(y, x, instance)` in row-major order.
    pub fn assigned_cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.owners
            .iter()
            .enumerate()
            .filter_map(move |(i, o)| o.map(|n| (i / self.width, i % self.width, n)))
    }

    pub fn num_assigned(&self) -> usize {
        self.owners.iter().filter(|o| o.is_some()).count()
    }
}

/// Assigns every cell strictly within `gamma` of an instance center to that
/// instance. Overlaps go to the nearest center, then the smaller area, then
/// the lower index.
pub fn assign_regions(
    annotations: &[InstanceAnnotation],
    geom: &GridGeometry,
    gamma: f64,
) -> Result<RegionAssignment> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "region radius must be positive, got {gamma}"
        )));
    }
    let (h, w) = (geom.height, geom.width);
    let mut owners = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = Point2::new(x as f64, y as f64);
            let mut best: Option<(f64, f64, usize)> = None;
            for (n, ann) in annotations.iter().enumerate() {
                let d = cell.distance(ann.center);
                if d >= gamma {
                    continue;
                }
                let key = (d, ann.area, n);
                let better = match best {
                    None => true,
                    Some((bd, ba, _)) => d < bd || (d == bd && ann.area < ba),
                };
                if better {
                    best = Some(key);
                }
            }
            owners[y * w + x] = best.map(|(_, _, n)| n);
        }
    }
    Ok(RegionAssignment {
        height: h,
        width: w,
        gamma,
        owners,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl WeightMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "weight map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

pub fn build_weight_map(assignment: &RegionAssignment) -> WeightMap {
    WeightMap {
        height: assignment.height,
        width: assignment.width,
        data: assignment
            .owners
            .iter()
            .map(|o| {
                if o.is_some() {
                    FOREGROUND_WEIGHT
                } else {
                    BACKGROUND_WEIGHT
                }
            })
            .collect(),
    }
}

/// Dense offset targets `cell - keypoint` with a per-element supervision mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTarget {
    pub offsets: FeatureGrid,
    valid: Vec<bool>,
}

impl OffsetTarget {
    pub fn num_keypoints(&self) -> usize {
        self.offsets.channels() / 2
    }

    /// Valid flag for channel `c` (x of keypoint `c / 2` when even, y when odd).
    #[inline]
    pub fn is_valid(&self, c: usize, y: usize, x: usize) -> bool {
        self.valid[self.offsets.index(c, y, x)]
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn from_parts(offsets: FeatureGrid, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != offsets.as_slice().len() || offsets.channels() % 2 != 0 {
            return Err(Error::ShapeMismatch(
                "offset mask must match a 2K-channel offset grid".into(),
            ));
        }
        Ok(Self { offsets, valid })
    }
}

pub fn build_offset_target(
    annotations: &[InstanceAnnotation],
    assignment: &RegionAssignment,
    num_keypoints: usize,
) -> Result<OffsetTarget> {
    let (h, w) = (assignment.height, assignment.width);
    let mut offsets = FeatureGrid::zeros(2 * num_keypoints, h, w);
    let mut valid = vec![false; 2 * num_keypoints * h * w];
    for (y, x, n) in assignment.assigned_cells() {
        let kps = annotations
            .get(n)
            .ok_or_else(|| Error::ShapeMismatch(format!("assignment references instance {n}")))?
            .keypoints();
        if kps.len() != num_keypoints {
            return Err(Error::KeypointCountMismatch {
                expected: num_keypoints,
                actual: kps.len(),
            });
        }
        for (i, kp) in kps.iter().enumerate() {
            if !kp.visibility.is_labeled() {
                continue;
            }
            let ix = offsets.index(2 * i, y, x);
            let iy = offsets.index(2 * i + 1, y, x);
            offsets.as_mut_slice()[ix] = x as f64 - kp.x;
            offsets.as_mut_slice()[iy] = y as f64 - kp.y;
            valid[ix] = true;
            valid[iy] = true;
        }
    }
    Ok(OffsetTarget { offsets, valid })
}

/// Quality-aware instance target: OKS of the pose currently predicted at each
/// assigned cell against its instance, zero elsewhere. The result is a
/// constant for the current step.
pub fn build_cir_target(
    mut predicted_pose: impl FnMut(usize, usize) -> Pose,
    annotations: &[InstanceAnnotation],
    assignment: &RegionAssignment,
    kc: &FalloffConstants,
) -> Result<ScoreMap> {
    let mut map = ScoreMap::zeros(assignment.height, assignment.width);
    for (y, x, n) in assignment.assigned_cells() {
        let pose = predicted_pose(y, x);
        let v = oks(&pose, &annotations[n], kc)?.value();
        map.set(y, x, v);
    }
    Ok(map)
}

/// Instance-score supervision variants compared in the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceLabel {
    /// OKS of the current prediction inside each region.
    #[default]
    Cir,
    /// 2-D Gaussian of the distance to the center (sigma = gamma / 2) inside each region.
    Gaussian,
    /// Constant 1 inside each region.
    Discrete,
}

impl std::str::FromStr for InstanceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cir" => Ok(InstanceLabel::Cir),
            "gaussian" => Ok(InstanceLabel::Gaussian),
            "discrete" => Ok(InstanceLabel::Discrete),
            other => Err(Error::InvalidConfig(format!(
                "instance_label must be cir, gaussian or discrete, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for InstanceLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InstanceLabel::Cir => "cir",
            InstanceLabel::Gaussian => "gaussian",
            InstanceLabel::Discrete => "discrete",
        })
    }
}

/// Fixed (prediction-independent) score targets for the baseline labels.
pub fn build_static_label(
    label: InstanceLabel,
    annotations: &[InstanceAnnotation],
    assignment: &RegionAssignment,
) -> ScoreMap {
    let mut map = ScoreMap::zeros(assignment.height, assignment.width);
    let sigma = assignment.gamma / 2.0;
    for (y, x, n) in assignment.assigned_cells() {
        let v = match label {
            InstanceLabel::Discrete => 1.0,
            InstanceLabel::Gaussian | InstanceLabel::Cir => {
                let d = Point2::new(x as f64, y as f64).distance(annotations[n].center);
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            }
        };
        map.set(y, x, v);
    }
    map
}
