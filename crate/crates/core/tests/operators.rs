mod common;

use cirpose::codec::{OffsetTarget, WeightMap};
use cirpose::grid::{FeatureGrid, ScoreMap};
use cirpose::losses::{smooth_l1, weighted_l2};
use cirpose::qem::{
    bilinear_sample, kqe_backward, kqe_forward, kqe_forward_taped, pqe_backward, pqe_forward,
    pqe_forward_taped, KqeCotangent, KqeParams, Linear,
};
use cirpose::types::Point2;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;

fn random_linear(rng: &mut ChaCha8Rng, i: usize, o: usize, scale: f64) -> Linear {
    Linear {
        in_dim: i,
        out_dim: o,
        weight: (0..i * o).map(|_| rng.gen_range(-scale..scale)).collect(),
        bias: (0..o).map(|_| rng.gen_range(-scale..scale)).collect(),
    }
}

fn random_params(rng: &mut ChaCha8Rng, c: usize, n: usize, scale: f64) -> KqeParams {
    KqeParams {
        query: random_linear(rng, c, 2, scale),
        semantic: random_linear(rng, c, 2 * n, scale),
        refine: random_linear(rng, c, 2, scale),
    }
}

#[test]
fn kqe_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let grid = random_grid(&mut rng, 3, 5, 5);
        let params = random_params(&mut rng, 3, 2, 1.5);
        let c = Point2::new(rng.gen_range(-1.0..6.0), rng.gen_range(-1.0..6.0));
        let got = kqe_forward(&grid, c, &params).unwrap();
        let want = scalar_kqe(&grid, c.x, c.y, &params);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
        assert!(close(got.query_displacement.x, want.dq.0) && close(got.query_displacement.y, want.dq.1));
        assert!(close(got.refine_displacement.x, want.dk.0) && close(got.refine_displacement.y, want.dk.1));
        assert!(close(got.total_offset.x, want.total.0) && close(got.total_offset.y, want.total.1));
        for (a, b) in got.transformed_feature.iter().zip(&want.feature) {
            assert!(close(*a, *b));
        }
        assert_eq!(got.total_offset, got.query_displacement + got.refine_displacement);
    }
}

#[test]
fn pqe_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let grid = random_grid(&mut rng, 4, 6, 5);
        let disp: Vec<Point2> = (0..2)
            .map(|_| Point2::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)))
            .collect();
        let c = Point2::new(rng.gen_range(0.0..5.0), rng.gen_range(0.0..6.0));
        let got = pqe_forward(&grid, c, &disp);
        let pairs: Vec<(f64, f64)> = disp.iter().map(|d| (d.x, d.y)).collect();
        let want = scalar_pqe(&grid, c.x, c.y, &pairs);
        assert_eq!(got.len(), 8);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

/// Worst relative error over every parameter, grid value and center
/// coordinate of one KQE instance whose perturbations all stay within
/// their interpolation cells.
fn kqe_fd(rng: &mut ChaCha8Rng) -> Option<f64> {
    let n = rng.gen_range(0..4);
    let grid = random_grid(rng, 3, 7, 7);
    let params = random_params(rng, 3, n, 0.4);
    let center = interior_point(rng, 7, 7, 1e-3) * 0.5 + Point2::new(1.5, 1.5);
    let cot = KqeCotangent {
        total_offset: Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        query_displacement: Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
    };
    let eval = |g: &FeatureGrid, c: Point2, p: &KqeParams| {
        let (o, tape) = kqe_forward_taped(g, c, p).unwrap();
        let sig: Vec<_> = tape.stencils().map(|s| s.cell_key()).collect();
        let v = cot.total_offset.x * o.total_offset.x
            + cot.total_offset.y * o.total_offset.y
            + cot.query_displacement.x * o.query_displacement.x
            + cot.query_displacement.y * o.query_displacement.y;
        (v, sig)
    };
    let (_, sig) = eval(&grid, center, &params);
    let (_, tape) = kqe_forward_taped(&grid, center, &params).unwrap();
    let mut pg = params.zeros_like();
    let mut gg = FeatureGrid::zeros(3, 7, 7);
    let gc = kqe_backward(&tape, &grid, &params, &cot, &mut pg, &mut gg).unwrap();

    let mut worst = 0.0f64;
    let mut compare = |a: f64, up: (f64, Vec<(u32, u32, u8)>), dn: (f64, Vec<(u32, u32, u8)>)| {
        if up.1 != sig || dn.1 != sig {
            return false;
        }
        worst = worst.max(rel_err(a, (up.0 - dn.0) / (2.0 * EPS)));
        true
    };
    let analytic: Vec<f64> = pg.params().copied().collect();
    for (i, a) in analytic.into_iter().enumerate() {
        let mut up = params.clone();
        *up.params_mut().nth(i).unwrap() += EPS;
        let mut dn = params.clone();
        *dn.params_mut().nth(i).unwrap() -= EPS;
        if !compare(a, eval(&grid, center, &up), eval(&grid, center, &dn)) {
            return None;
        }
    }
    for i in 0..grid.as_slice().len() {
        let mut up = grid.clone();
        up.as_mut_slice()[i] += EPS;
        let mut dn = grid.clone();
        dn.as_mut_slice()[i] -= EPS;
        if !compare(gg.as_slice()[i], eval(&up, center, &params), eval(&dn, center, &params)) {
            return None;
        }
    }
    for (d, a) in [(Point2::new(EPS, 0.0), gc.x), (Point2::new(0.0, EPS), gc.y)] {
        if !compare(a, eval(&grid, center + d, &params), eval(&grid, center - d, &params)) {
            return None;
        }
    }
    Some(worst)
}

#[test]
fn kqe_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 30 {
        if let Some(e) = kqe_fd(&mut rng) {
            assert!(e < 1e-4, "relative error {e}");
            checked += 1;
        }
    }
}

#[test]
fn pqe_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let k = rng.gen_range(1..5);
        let grid = random_grid(&mut rng, 3, 6, 6);
        let center = Point2::new(2.5, 2.5);
        // Query points kept off lattice lines so perturbations stay in-cell.
        let disp: Vec<Point2> = (0..k)
            .map(|_| interior_point(&mut rng, 6, 6, 1e-3) - center)
            .collect();
        let cot: Vec<f64> = (0..3 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |g: &FeatureGrid, d: &[Point2]| dot(&cot, &pqe_forward(g, center, d));
        let (_, tape) = pqe_forward_taped(&grid, center, &disp);
        let mut gg = FeatureGrid::zeros(3, 6, 6);
        let gd = pqe_backward(&tape, &grid, &cot, &mut gg).unwrap();
        for i in 0..grid.as_slice().len() {
            let mut up = grid.clone();
            up.as_mut_slice()[i] += EPS;
            let mut dn = grid.clone();
            dn.as_mut_slice()[i] -= EPS;
            let num = (f(&up, &disp) - f(&dn, &disp)) / (2.0 * EPS);
            assert!(rel_err(gg.as_slice()[i], num) < 1e-4);
        }
        for j in 0..k {
            for (axis, a) in [(Point2::new(EPS, 0.0), gd[j].x), (Point2::new(0.0, EPS), gd[j].y)] {
                let mut up = disp.clone();
                up[j] = up[j] + axis;
                let mut dn = disp.clone();
                dn[j] = dn[j] - axis;
                let num = (f(&grid, &up) - f(&grid, &dn)) / (2.0 * EPS);
                assert!(rel_err(a, num) < 1e-4, "{a} vs {num}");
            }
        }
    }
}

#[test]
fn loss_gradients_match_central_differences_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let vals = |rng: &mut ChaCha8Rng| (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>();
        let pred = ScoreMap::from_vec(h, w, vals(&mut rng)).unwrap();
        let target = ScoreMap::from_vec(h, w, vals(&mut rng)).unwrap();
        let wm = WeightMap::from_vec(h, w, vals(&mut rng)).unwrap();
        let l = weighted_l2(&pred, &target, &wm).unwrap();
        for i in 0..h * w {
            let mut up = pred.clone();
            up.as_mut_slice()[i] += EPS;
            let mut dn = pred.clone();
            dn.as_mut_slice()[i] -= EPS;
            let num = (weighted_l2(&up, &target, &wm).unwrap().value
                - weighted_l2(&dn, &target, &wm).unwrap().value)
                / (2.0 * EPS);
            assert!(rel_err(l.grad[i], num) < 1e-6);
        }

        let c = 4;
        let t = random_grid(&mut rng, c, h, w);
        let valid: Vec<bool> = (0..c * h * w).map(|_| rng.gen_bool(0.6)).collect();
        let p = FeatureGrid::from_vec(
            c,
            h,
            w,
            t.as_slice()
                .iter()
                .map(|v| {
                    let mut r: f64 = rng.gen_range(-3.0..3.0);
                    while (r.abs() - 1.0).abs() < 1e-2 {
                        r = rng.gen_range(-3.0..3.0);
                    }
                    v + r
                })
                .collect(),
        )
        .unwrap();
        let tgt = OffsetTarget::from_parts(t, valid).unwrap();
        let l = smooth_l1(&p, &tgt).unwrap();
        for i in 0..p.as_slice().len() {
            let mut up = p.clone();
            up.as_mut_slice()[i] += EPS;
            let mut dn = p.clone();
            dn.as_mut_slice()[i] -= EPS;
            let num = (smooth_l1(&up, &tgt).unwrap().value - smooth_l1(&dn, &tgt).unwrap().value) / (2.0 * EPS);
            assert!(rel_err(l.grad[i], num) < 1e-6, "{} vs {num}", l.grad[i]);
        }
    }
}

proptest! {
    #[test]
    fn bilinear_agrees_with_oracle(
        seed in 0u64..1000,
        h in 1usize..6,
        w in 1usize..6,
        x in -3.0f64..8.0,
        y in -3.0f64..8.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, 2, h, w);
        let got = bilinear_sample(&grid, Point2::new(x, y));
        let want = scalar_bilinear(&grid, x, y);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn bilinear_is_linear_along_axes_within_a_cell(
        seed in 0u64..1000,
        cx in 0usize..4,
        cy in 0usize..4,
        fy in 0.0f64..1.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        t in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, 1, 5, 5);
        let y = cy as f64 + fy;
        let at = |fx: f64| bilinear_sample(&grid, Point2::new(cx as f64 + fx, y))[0];
        let mid = a + t * (b - a);
        prop_assert!((at(mid) - (at(a) + t * (at(b) - at(a)))).abs() < 1e-12);
    }

    #[test]
    fn forward_ops_are_deterministic(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, 3, 5, 5);
        let params = random_params(&mut rng, 3, 3, 1.0);
        let c = Point2::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0));
        prop_assert_eq!(kqe_forward(&grid, c, &params).unwrap(), kqe_forward(&grid, c, &params).unwrap());
        let d = [Point2::new(0.3, -0.7)];
        prop_assert_eq!(pqe_forward(&grid, c, &d).len(), 3);
    }
}
