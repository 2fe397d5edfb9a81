//! Training losses with analytic gradients.

use crate::codec::{OffsetTarget, WeightMap};
use crate::error::{Error, Result};
use crate::grid::{OffsetField, ScoreMap};

pub const SMOOTH_L1_BETA: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Scalar loss and its gradient with respect to the prediction it was
/// computed from (same layout as the prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    pub fn scaled(&self, factor: f64) -> LossValue {
        LossValue {
            value: factor * self.value,
            grad: self.grad.iter().map(|g| factor * g).collect(),
        }
    }
}

/// `mean_cells(W * (pred - target)^2)`.
pub fn weighted_l2(pred: &ScoreMap, target: &ScoreMap, w: &WeightMap) -> Result<LossValue> {
    if !pred.same_shape(target) || pred.height() != w.height() || pred.width() != w.width() {
        return Err(Error::ShapeMismatch(format!(
            "score loss shapes: pred {}x{}, target {}x{}, weights {}x{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width(),
            w.height(),
            w.width()
        )));
    }
    let n = pred.as_slice().len() as f64;
    let mut value = 0.0;
    let grad = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .zip(w.as_slice())
        .map(|((p, t), wt)| {
            let r = p - t;
            value += wt * r * r;
            2.0 * wt * r / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

/// Elementwise smooth-L1 value and derivative for transition `beta`.
#[inline]
pub fn smooth_l1_element(r: f64, beta: f64) -> (f64, f64) {
    if r.abs() < beta {
        (0.5 * r * r / beta, r / beta)
    } else {
        (r.abs() - 0.5 * beta, r.signum())
    }
}

/// Smooth-L1 over the masked elements, averaged over the mask count.
pub fn smooth_l1(pred: &OffsetField, target: &OffsetTarget) -> Result<LossValue> {
    smooth_l1_with_beta(pred, target, SMOOTH_L1_BETA)
}

pub fn smooth_l1_with_beta(
    pred: &OffsetField,
    target: &OffsetTarget,
    beta: f64,
) -> Result<LossValue> {
    if !pred.same_shape(&target.offsets) {
        return Err(Error::ShapeMismatch(format!(
            "offset loss shapes: pred {}x{}x{}, target {}x{}x{}",
            pred.channels(),
            pred.height(),
            pred.width(),
            target.offsets.channels(),
            target.offsets.height(),
            target.offsets.width()
        )));
    }
    let count = target.num_valid();
    let mut grad = vec![0.0; pred.as_slice().len()];
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let n = count as f64;
    let mut value = 0.0;
    for (i, ((p, t), valid)) in pred
        .as_slice()
        .iter()
        .zip(target.offsets.as_slice())
        .zip(target.mask())
        .enumerate()
    {
        if !valid {
            continue;
        }
        let (v, g) = smooth_l1_element(p - t, beta);
        value += v;
        grad[i] = g / n;
    }
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub score: LossValue,
    pub offset: LossValue,
}

/// `lambda_i * L_I + lambda_d * L_D`; the component gradients are scaled by
/// their weights.
pub fn total_loss(l_i: &LossValue, l_d: &LossValue, lambda_i: f64, lambda_d: f64) -> TotalLoss {
    let score = l_i.scaled(lambda_i);
    let offset = l_d.scaled(lambda_d);
    TotalLoss {
        value: score.value + offset.value,
        score,
        offset,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FeatureGrid;
    use proptest::prelude::*;

    fn map(v: Vec<f64>, h: usize, w: usize) -> ScoreMap {
        ScoreMap::from_vec(h, w, v).unwrap()
    }

    fn single_offset(pred: f64, target: f64) -> (OffsetField, OffsetTarget) {
        let p = FeatureGrid::from_vec(2, 1, 1, vec![pred, 0.0]).unwrap();
        let t = FeatureGrid::from_vec(2, 1, 1, vec![target, 0.0]).unwrap();
        (p, OffsetTarget::from_parts(t, vec![true, false]).unwrap())
    }

    #[test]
    fn weighted_l2_examples() {
        let w = WeightMap::uniform(1, 1, 1.0);
        assert_eq!(weighted_l2(&map(vec![0.3], 1, 1), &map(vec![0.3], 1, 1), &w).unwrap().value, 0.0);
        assert_eq!(weighted_l2(&map(vec![0.75], 1, 1), &map(vec![0.25], 1, 1), &w).unwrap().value, 0.25);
        let bg = WeightMap::uniform(1, 1, 0.1);
        let a = weighted_l2(&map(vec![0.5], 1, 1), &map(vec![0.0], 1, 1), &bg).unwrap().value;
        let b = weighted_l2(&map(vec![0.5], 1, 1), &map(vec![0.0], 1, 1), &w).unwrap().value;
        assert!((10.0 * a - b).abs() < 1e-15);
    }

    #[test]
    fn weighted_l2_zero_weight_has_zero_gradient() {
        let w = WeightMap::uniform(2, 2, 0.0);
        let l = weighted_l2(&map(vec![1.0, 0.2, 0.3, 0.9], 2, 2), &map(vec![0.0; 4], 2, 2), &w).unwrap();
        assert!(l.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn weighted_l2_shape_mismatch() {
        let w = WeightMap::uniform(1, 2, 1.0);
        assert!(matches!(
            weighted_l2(&map(vec![0.0; 2], 1, 2), &map(vec![0.0; 2], 2, 1), &w),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn smooth_l1_examples() {
        let (p, t) = single_offset(1.0, 1.0);
        assert_eq!(smooth_l1(&p, &t).unwrap().value, 0.0);
        let (p, t) = single_offset(3.0, 1.0);
        assert_eq!(smooth_l1(&p, &t).unwrap().value, 1.5);
        let (p, t) = single_offset(1.5, 1.0);
        assert_eq!(smooth_l1(&p, &t).unwrap().value, 0.125);
        let l = smooth_l1(&single_offset(10.0, 0.0).0, &single_offset(10.0, 0.0).1).unwrap();
        assert!(l.grad.iter().all(|g| g.abs() <= 1.0));
    }

    #[test]
    fn smooth_l1_empty_mask() {
        let p = FeatureGrid::from_vec(2, 1, 1, vec![4.0, -3.0]).unwrap();
        let t = OffsetTarget::from_parts(FeatureGrid::zeros(2, 1, 1), vec![false, false]).unwrap();
        let l = smooth_l1(&p, &t).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn smooth_l1_is_c1_at_transition() {
        let beta = SMOOTH_L1_BETA;
        let eps = 1e-9;
        let (vl, gl) = smooth_l1_element(beta - eps, beta);
        let (vr, gr) = smooth_l1_element(beta + eps, beta);
        assert!((vl - vr).abs() < 1e-8);
        assert!((gl - gr).abs() < 1e-8);
    }

    #[test]
    fn total_loss_examples() {
        let li = LossValue { value: 0.3, grad: vec![1.0] };
        let ld = LossValue { value: 0.2, grad: vec![2.0] };
        assert!((total_loss(&li, &ld, 1.0, 1.0).value - 0.5).abs() < 1e-15);
        assert_eq!(total_loss(&li, &ld, 1.0, 0.0).value, 0.3);
        let li = LossValue { value: 0.1, grad: vec![1.0] };
        let ld = LossValue { value: 0.3, grad: vec![1.0] };
        let t = total_loss(&li, &ld, 2.0, 1.0);
        assert!((t.value - 0.5).abs() < 1e-15);
        assert_eq!(t.score.grad, vec![2.0]);
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(
            v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 1..20)
        ) {
            let n = v.len();
            let pred = FeatureGrid::from_vec(2, 1, n, v.iter().flat_map(|e| [e.0, e.0]).collect()).unwrap();
            let tgt = FeatureGrid::from_vec(2, 1, n, v.iter().flat_map(|e| [e.1, e.1]).collect()).unwrap();
            let mask = v.iter().flat_map(|e| [e.2, e.2]).collect();
            let t = OffsetTarget::from_parts(tgt, mask).unwrap();
            prop_assert!(smooth_l1(&pred, &t).unwrap().value >= 0.0);
            let p = map(v.iter().map(|e| e.0).collect(), 1, n);
            let q = map(v.iter().map(|e| e.1).collect(), 1, n);
            prop_assert!(weighted_l2(&p, &q, &WeightMap::uniform(1, n, 0.1)).unwrap().value >= 0.0);
        }
    }
}
