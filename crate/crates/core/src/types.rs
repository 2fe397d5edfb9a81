//! Geometric primitives and annotation types shared by every stage of the
//! pipeline.
//!
//! All coordinates handled internally are in grid units (one unit per output
//! cell). Conversion to and from image pixels happens only at I/O boundaries
//! through [`GridGeometry`].

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Falloff constants of the COCO keypoint evaluation for its 17 joints
/// (nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles). These
/// are twice the per-joint sigmas of the reference evaluator.
pub const COCO_FALLOFF: [f64; 17] = [
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214,
    0.174, 0.174, 0.178, 0.178,
];

pub const COCO_KEYPOINT_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum Visibility {
    #[default]
    NotLabeled = 0,
    LabeledOccluded = 1,
    LabeledVisible = 2,
}

impl Visibility {
    pub fn from_flag(v: u8) -> Option<Self> {
        match v {
            0 => Some(Visibility::NotLabeled),
            1 => Some(Visibility::LabeledOccluded),
            2 => Some(Visibility::LabeledVisible),
            _ => None,
        }
    }

    pub fn flag(self) -> u8 {
        self as u8
    }

    /// Occluded and visible keypoints both count as labeled.
    pub fn is_labeled(self) -> bool {
        self != Visibility::NotLabeled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64, visibility: Visibility) -> Self {
        Self { x, y, visibility }
    }

    pub const fn visible(x: f64, y: f64) -> Self {
        Self::new(x, y, Visibility::LabeledVisible)
    }

    pub const fn unlabeled() -> Self {
        Self::new(0.0, 0.0, Visibility::NotLabeled)
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
    pub score: f64,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>, score: f64) -> Self {
        Self { keypoints, score }
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn translated(&self, delta: Point2) -> Pose {
        Pose {
            keypoints: self
                .keypoints
                .iter()
                .map(|kp| Keypoint::new(kp.x + delta.x, kp.y + delta.y, kp.visibility))
                .collect(),
            score: self.score,
        }
    }

    /// Axis-aligned bounding box `(min, max)` over labeled keypoints.
    pub fn labeled_extent(&self) -> Option<(Point2, Point2)> {
        let mut it = self.keypoints.iter().filter(|kp| kp.visibility.is_labeled());
        let first = it.next()?;
        let init = (first.position(), first.position());
        Some(it.fold(init, |(lo, hi), kp| {
            (
                Point2::new(lo.x.min(kp.x), lo.y.min(kp.y)),
                Point2::new(hi.x.max(kp.x), hi.y.max(kp.y)),
            )
        }))
    }
}

/// Ground-truth pose together with the quantities supervision needs.
///
/// `center` and `scale` are in grid units; `area` is in image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub pose: Pose,
    pub scale: f64,
    pub center: Point2,
    pub area: f64,
}

impl InstanceAnnotation {
    /// Builds an annotation from grid-unit keypoints and an image-pixel area.
    pub fn from_keypoints(
        keypoints: Vec<Keypoint>,
        area: f64,
        geom: &GridGeometry,
    ) -> Result<Self> {
        let center = instance_center(&keypoints)?;
        let scale = instance_scale(area)? / geom.stride;
        Ok(Self {
            pose: Pose::new(keypoints, 1.0),
            scale,
            center,
            area,
        })
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.pose.keypoints
    }

    pub fn translated(&self, delta: Point2) -> Self {
        Self {
            pose: self.pose.translated(delta),
            scale: self.scale,
            center: self.center + delta,
            area: self.area,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

impl GridGeometry {
    pub const DEFAULT_STRIDE: f64 = 4.0;

    pub fn new(height: usize, width: usize, stride: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        if !(stride >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "stride must be >= 1, got {stride}"
            )));
        }
        Ok(Self {
            height,
            width,
            stride,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn to_grid(&self, point: Point2) -> Point2 {
        Point2::new(point.x / self.stride, point.y / self.stride)
    }

    pub fn from_grid(&self, point: Point2) -> Point2 {
        Point2::new(point.x * self.stride, point.y * self.stride)
    }
}

pub fn to_grid(point: Point2, geom: &GridGeometry) -> Point2 {
    geom.to_grid(point)
}

pub fn from_grid(point: Point2, geom: &GridGeometry) -> Point2 {
    geom.from_grid(point)
}

/// Per-keypoint falloff constants `k_i` of the OKS kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalloffConstants {
    k: Vec<f64>,
}

impl FalloffConstants {
    pub fn new(k: Vec<f64>) -> Result<Self> {
        if k.is_empty() {
            return Err(Error::InvalidConfig("falloff constants are empty".into()));
        }
        if let Some(bad) = k.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "falloff constants must be positive, got {bad}"
            )));
        }
        Ok(Self { k })
    }

    pub fn uniform(num_keypoints: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; num_keypoints])
    }

    pub fn coco() -> Self {
        Self {
            k: COCO_FALLOFF.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.k
    }
}

/// Mean position of the labeled keypoints.
pub fn instance_center(keypoints: &[Keypoint]) -> Result<Point2> {
    let (sum, count) = keypoints
        .iter()
        .filter(|kp| kp.visibility.is_labeled())
        .fold((Point2::default(), 0usize), |(acc, n), kp| {
            (acc + kp.position(), n + 1)
        });
    if count == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    let n = count as f64;
    Ok(Point2::new(sum.x / n, sum.y / n))
}

/// OKS instance scale: square root of the annotated area.
pub fn instance_scale(area: f64) -> Result<f64> {
    if !(area > 0.0) {
        return Err(Error::NonPositiveArea(area));
    }
    Ok(area.sqrt())
}
