//! Seeded synthetic scenes: stick-figure keypoint layouts rendered as
//! per-keypoint Gaussian evidence channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::FeatureGrid;
use crate::types::{FalloffConstants, GridGeometry, InstanceAnnotation, Keypoint, Point2, COCO_FALLOFF};

/// Toy skeleton used when `K = 5`: head, wrists, ankles (unit scale, y down).
pub const TOY_SKELETON: [(f64, f64); 5] = [
    (0.0, -1.0),
    (-0.75, -0.15),
    (0.75, -0.15),
    (-0.4, 1.0),
    (0.4, 1.0),
];

pub const TOY_KEYPOINT_NAMES: [&str; 5] = ["head", "left_wrist", "right_wrist", "left_ankle", "right_ankle"];

/// Falloff constants for the toy skeleton, taken from the matching COCO
/// joints (nose, wrists, ankles).
pub fn toy_falloff(num_keypoints: usize) -> FalloffConstants {
    if num_keypoints == 5 {
        FalloffConstants::new(vec![
            COCO_FALLOFF[0],
            COCO_FALLOFF[9],
            COCO_FALLOFF[10],
            COCO_FALLOFF[15],
            COCO_FALLOFF[16],
        ])
        .expect("constants are positive")
    } else if num_keypoints == 17 {
        FalloffConstants::coco()
    } else {
        FalloffConstants::uniform(num_keypoints.max(1), 0.1).expect("positive constant")
    }
}

fn template(num_keypoints: usize) -> Vec<(f64, f64)> {
    if num_keypoints == 5 {
        return TOY_SKELETON.to_vec();
    }
    (0..num_keypoints)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / num_keypoints as f64;
            (0.7 * a.sin(), -a.cos())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_keypoints: usize,
    /// Gaussian blob sigma in cells.
    pub blob_sigma: f64,
    /// Skeleton half-height range in cells.
    pub scale_range: (f64, f64),
    pub max_rotation: f64,
    /// Per-keypoint jitter as a fraction of the scale.
    pub jitter: f64,
    /// Minimum center separation as a multiple of the larger instance scale.
    pub min_separation: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_keypoints: 5,
            blob_sigma: 1.5,
            scale_range: (3.5, 6.0),
            max_rotation: 0.35,
            jitter: 0.08,
            min_separation: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub input: FeatureGrid,
    pub annotations: Vec<InstanceAnnotation>,
    pub geom: GridGeometry,
    pub seed: u64,
}

struct Placed {
    center: Point2,
    scale: f64,
    points: Vec<Point2>,
}

fn place(rng: &mut ChaCha8Rng, spec: &SceneSpec, geom: &GridGeometry, base: &[(f64, f64)]) -> Placed {
    let scale = rng.gen_range(spec.scale_range.0..=spec.scale_range.1);
    let theta = rng.gen_range(-spec.max_rotation..=spec.max_rotation);
    let (sin, cos) = theta.sin_cos();
    let local: Vec<Point2> = base
        .iter()
        .map(|&(x, y)| {
            let jx = rng.gen_range(-spec.jitter..=spec.jitter);
            let jy = rng.gen_range(-spec.jitter..=spec.jitter);
            let (x, y) = (scale * (x + jx), scale * (y + jy));
            Point2::new(cos * x - sin * y, sin * x + cos * y)
        })
        .collect();
    let lo = local.iter().fold(Point2::new(f64::MAX, f64::MAX), |a, p| {
        Point2::new(a.x.min(p.x), a.y.min(p.y))
    });
    let hi = local.iter().fold(Point2::new(f64::MIN, f64::MIN), |a, p| {
        Point2::new(a.x.max(p.x), a.y.max(p.y))
    });
    let margin = 1.0;
    let (w, h) = (geom.width as f64 - 1.0, geom.height as f64 - 1.0);
    let ox_lo = margin - lo.x;
    let ox_hi = (w - margin - hi.x).max(ox_lo);
    let oy_lo = margin - lo.y;
    let oy_hi = (h - margin - hi.y).max(oy_lo);
    let origin = Point2::new(rng.gen_range(ox_lo..=ox_hi), rng.gen_range(oy_lo..=oy_hi));
    let points: Vec<Point2> = local.iter().map(|&p| p + origin).collect();
    let n = points.len() as f64;
    let center = points.iter().fold(Point2::default(), |a, &p| a + p);
    Placed {
        center: Point2::new(center.x / n, center.y / n),
        scale,
        points,
    }
}

/// Renders `num_instances` skeletons. Placement uses rejection sampling for
/// center separation; if space runs out fewer instances are placed, but
/// never zero when at least one was requested.
pub fn synth_scene_with(
    seed: u64,
    geom: &GridGeometry,
    num_instances: usize,
    spec: &SceneSpec,
) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = template(spec.num_keypoints);
    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    while placed.len() < num_instances && attempts < 500 {
        attempts += 1;
        let cand = place(&mut rng, spec, geom, &base);
        let clear = placed.iter().all(|p| {
            p.center.distance(cand.center) >= spec.min_separation * p.scale.max(cand.scale)
        });
        if clear {
            placed.push(cand);
        }
    }

    let k = spec.num_keypoints;
    let two_s2 = 2.0 * spec.blob_sigma * spec.blob_sigma;
    let reach = (3.5 * spec.blob_sigma).ceil() as isize;
    let mut input = FeatureGrid::zeros(k, geom.height, geom.width);
    for p in &placed {
        for (i, kp) in p.points.iter().enumerate() {
            let (cx, cy) = (kp.x.round() as isize, kp.y.round() as isize);
            for y in (cy - reach).max(0)..=(cy + reach).min(geom.height as isize - 1) {
                for x in (cx - reach).max(0)..=(cx + reach).min(geom.width as isize - 1) {
                    let d2 = (x as f64 - kp.x).powi(2) + (y as f64 - kp.y).powi(2);
                    let idx = input.index(i, y as usize, x as usize);
                    input.as_mut_slice()[idx] += (-d2 / two_s2).exp();
                }
            }
        }
    }

    let annotations = placed
        .iter()
        .map(|p| {
            let kps: Vec<Keypoint> = p.points.iter().map(|q| Keypoint::visible(q.x, q.y)).collect();
            let (lo, hi) = p.points.iter().fold(
                (Point2::new(f64::MAX, f64::MAX), Point2::new(f64::MIN, f64::MIN)),
                |(lo, hi), q| {
                    (
                        Point2::new(lo.x.min(q.x), lo.y.min(q.y)),
                        Point2::new(hi.x.max(q.x), hi.y.max(q.y)),
                    )
                },
            );
            // Keypoint bounding-box area in image pixels.
            let area = (hi.x - lo.x).max(1.0) * (hi.y - lo.y).max(1.0) * geom.stride * geom.stride;
            InstanceAnnotation::from_keypoints(kps, area, geom)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticScene {
        input,
        annotations,
        geom: *geom,
        seed,
    })
}

pub fn synth_scene(seed: u64, geom: &GridGeometry, num_instances: usize) -> Result<SyntheticScene> {
    synth_scene_with(seed, geom, num_instances, &SceneSpec::default())
}

/// Scene with a seeded instance count in `1..=4`.
pub fn random_scene(seed: u64, geom: &GridGeometry, spec: &SceneSpec) -> Result<SyntheticScene> {
    let count = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15).gen_range(1..=4);
    synth_scene_with(seed, geom, count, spec)
}
