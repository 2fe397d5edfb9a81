//! Independent reference implementations used as test oracles. They are
//! written for clarity over speed and share no code with the crate beyond
//! its plain data types.

#![allow(dead_code)]

use cirpose::decoder::Candidate;
use cirpose::grid::FeatureGrid;
use cirpose::qem::KqeParams;
use cirpose::types::{InstanceAnnotation, Keypoint, Point2, Pose};
use rand::Rng;

/// Straight-line OKS: Gaussian term per keypoint labeled in the ground
/// truth, averaged.
pub fn scalar_oks(pred: &[Keypoint], gt: &[Keypoint], s: f64, k: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..gt.len() {
        if gt[i].visibility.flag() == 0 {
            continue;
        }
        let dx = pred[i].x - gt[i].x;
        let dy = pred[i].y - gt[i].y;
        sum += (-(dx * dx + dy * dy) / (2.0 * s * s * k[i] * k[i])).exp();
        n += 1.0;
    }
    sum / n
}

/// Bilinear interpolation with border clamping, one channel at a time.
pub fn scalar_bilinear(grid: &FeatureGrid, x: f64, y: f64) -> Vec<f64> {
    let (h, w) = (grid.height(), grid.width());
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let mut x0 = x.floor() as usize;
    let mut y0 = y.floor() as usize;
    if w > 1 && x0 == w - 1 {
        x0 = w - 2;
    }
    if h > 1 && y0 == h - 1 {
        y0 = h - 2;
    }
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = if w > 1 { x - x0 as f64 } else { 0.0 };
    let ay = if h > 1 { y - y0 as f64 } else { 0.0 };
    (0..grid.channels())
        .map(|c| {
            let v00 = grid.get(c, y0, x0);
            let v01 = grid.get(c, y0, x1);
            let v10 = grid.get(c, y1, x0);
            let v11 = grid.get(c, y1, x1);
            v00 * (1.0 - ax) * (1.0 - ay) + v01 * ax * (1.0 - ay) + v10 * (1.0 - ax) * ay + v11 * ax * ay
        })
        .collect()
}

fn affine(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for o in 0..bias.len() {
        let mut acc = bias[o];
        for i in 0..x.len() {
            acc += weight[o * x.len() + i] * x[i];
        }
        out.push(acc);
    }
    out
}

/// `(query displacement, refine displacement, total offset, summed feature)`.
pub struct ScalarKqe {
    pub dq: (f64, f64),
    pub dk: (f64, f64),
    pub total: (f64, f64),
    pub feature: Vec<f64>,
}

pub fn scalar_kqe(rk: &FeatureGrid, cx: f64, cy: f64, p: &KqeParams) -> ScalarKqe {
    let fc = scalar_bilinear(rk, cx, cy);
    let dq = affine(&p.query.weight, &p.query.bias, &fc);
    let (qx, qy) = (cx + dq[0], cy + dq[1]);
    let fq = scalar_bilinear(rk, qx, qy);
    let sem = affine(&p.semantic.weight, &p.semantic.bias, &fq);
    let mut feature = vec![0.0; rk.channels()];
    for n in 0..sem.len() / 2 {
        let s = scalar_bilinear(rk, qx + sem[2 * n], qy + sem[2 * n + 1]);
        for c in 0..feature.len() {
            feature[c] += s[c];
        }
    }
    let dk = affine(&p.refine.weight, &p.refine.bias, &feature);
    ScalarKqe {
        dq: (dq[0], dq[1]),
        dk: (dk[0], dk[1]),
        total: (dq[0] + dk[0], dq[1] + dk[1]),
        feature,
    }
}

pub fn scalar_pqe(ri: &FeatureGrid, cx: f64, cy: f64, disp: &[(f64, f64)]) -> Vec<f64> {
    let mut out = Vec::new();
    for &(dx, dy) in disp {
        out.extend(scalar_bilinear(ri, cx + dx, cy + dy));
    }
    out
}

/// Greedy suppression by exhaustive rescanning: repeatedly take the best
/// remaining candidate and drop everything whose similarity to it exceeds
/// the threshold.
pub fn greedy_nms(
    candidates: &[Candidate],
    threshold: f64,
    sim: impl Fn(&Pose, &Pose) -> f64,
) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..candidates.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            let better = candidates[i].score > candidates[best].score
                || (candidates[i].score == candidates[best].score && i < best);
            if better {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && sim(&candidates[best].pose, &candidates[i].pose) <= threshold);
    }
    kept
}

/// Reference COCO-style evaluator. Images are visited in ascending id
/// order; detections keep their input order among equal scores.
pub struct BruteEval {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: Option<f64>,
}

pub struct BruteImage<'a> {
    pub dets: Vec<&'a Pose>,
    pub gts: &'a [InstanceAnnotation],
}

fn pose_box_area(p: &Pose, stride: f64) -> f64 {
    let pts: Vec<&Keypoint> = p.keypoints.iter().filter(|k| k.visibility.flag() > 0).collect();
    if pts.is_empty() {
        return 0.0;
    }
    let min_x = pts.iter().map(|k| k.x).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|k| k.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts.iter().map(|k| k.y).fold(f64::INFINITY, f64::min);
    let max_y = pts.iter().map(|k| k.y).fold(f64::NEG_INFINITY, f64::max);
    (max_x - min_x) * (max_y - min_y) * stride * stride
}

/// `(score, counts as tp, counts at all)` per detection plus counted gts.
fn brute_match(
    img: &BruteImage,
    t: f64,
    lo: f64,
    hi: f64,
    k: &[f64],
    stride: f64,
    max_dets: usize,
) -> (Vec<(f64, bool, bool)>, usize) {
    let mut order: Vec<usize> = (0..img.dets.len()).collect();
    // Insertion sort keeps equal scores in input order.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && img.dets[order[j - 1]].score < img.dets[order[j]].score {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    order.truncate(max_dets);
    let ignore: Vec<bool> = img.gts.iter().map(|g| !(g.area >= lo && g.area < hi)).collect();
    let mut gt_order: Vec<usize> = (0..img.gts.len()).filter(|&g| !ignore[g]).collect();
    gt_order.extend((0..img.gts.len()).filter(|&g| ignore[g]));
    let mut taken = vec![false; img.gts.len()];
    let mut out = Vec::new();
    for &d in &order {
        let det = img.dets[d];
        let mut best = if t < 1.0 - 1e-10 { t } else { 1.0 - 1e-10 };
        let mut m: Option<usize> = None;
        for &g in &gt_order {
            if taken[g] {
                continue;
            }
            if let Some(prev) = m {
                if !ignore[prev] && ignore[g] {
                    break;
                }
            }
            let o = scalar_oks(&det.keypoints, img.gts[g].keypoints(), img.gts[g].scale, k);
            if o < best {
                continue;
            }
            best = o;
            m = Some(g);
        }
        let (tp, counted) = match m {
            Some(g) => {
                taken[g] = true;
                (true, !ignore[g])
            }
            None => {
                let a = pose_box_area(det, stride);
                (false, a >= lo && a < hi)
            }
        };
        out.push((det.score, tp, counted));
    }
    (out, ignore.iter().filter(|i| !**i).count())
}

/// `(ap, final recall)` at one threshold and area band, `None` when no
/// ground truth counts.
fn brute_ap(
    images: &[BruteImage],
    t: f64,
    lo: f64,
    hi: f64,
    k: &[f64],
    stride: f64,
    max_dets: usize,
) -> Option<(f64, f64)> {
    let mut all = Vec::new();
    let mut npos = 0;
    for img in images {
        let (m, n) = brute_match(img, t, lo, hi, k, stride, max_dets);
        all.extend(m);
        npos += n;
    }
    if npos == 0 {
        return None;
    }
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && all[j - 1].0 < all[j].0 {
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut rec = Vec::new();
    let mut prec = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(_, is_tp, counted) in &all {
        if counted {
            if is_tp {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        rec.push(tp / npos as f64);
        prec.push(if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 });
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 * 0.01;
        // Interpolated precision: best precision at any recall >= r.
        let mut p: f64 = 0.0;
        for i in 0..rec.len() {
            if rec[i] >= r {
                p = p.max(prec[i]);
            }
        }
        sum += p;
    }
    Some((sum / 101.0, rec.last().copied().unwrap_or(0.0)))
}

fn mean_some(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    if d.is_empty() {
        None
    } else {
        Some(d.iter().sum::<f64>() / d.len() as f64)
    }
}

pub fn brute_evaluate(images: &[BruteImage], k: &[f64], stride: f64, max_dets: usize) -> BruteEval {
    let ts: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let inf = f64::INFINITY;
    let all: Vec<Option<(f64, f64)>> = ts
        .iter()
        .map(|&t| brute_ap(images, t, 0.0, inf, k, stride, max_dets))
        .collect();
    let med: Vec<Option<f64>> = ts
        .iter()
        .map(|&t| brute_ap(images, t, 1024.0, 9216.0, k, stride, max_dets).map(|v| v.0))
        .collect();
    let large: Vec<Option<f64>> = ts
        .iter()
        .map(|&t| brute_ap(images, t, 9216.0, inf, k, stride, max_dets).map(|v| v.0))
        .collect();
    let aps: Vec<Option<f64>> = all.iter().map(|v| v.map(|v| v.0)).collect();
    let recalls: Vec<Option<f64>> = all.iter().map(|v| v.map(|v| v.1)).collect();
    BruteEval {
        ap: mean_some(&aps),
        ap50: aps[0],
        ap75: aps[5],
        ap_m: mean_some(&med),
        ap_l: mean_some(&large),
        ar: mean_some(&recalls),
    }
}

pub fn random_grid(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FeatureGrid {
    FeatureGrid::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs()).max(1e-7)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A point at least `margin` away from every lattice line, inside the grid.
pub fn interior_point(rng: &mut impl Rng, h: usize, w: usize, margin: f64) -> Point2 {
    let coord = |rng: &mut dyn rand::RngCore, len: usize| -> f64 {
        let cell = rng.gen_range(0..len - 1) as f64;
        cell + rng.gen_range(margin..1.0 - margin)
    };
    Point2::new(coord(rng, w), coord(rng, h))
}

pub fn print_criterion(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
