//! Query encoding operators with reverse-mode derivatives.
//!
//! * [`bilinear_sample`]: border-clamped bilinear interpolation of a feature
//!   grid at a continuous point.
//! * [`kqe_forward`]: keypoint query encoding. A query head predicts the
//!   center-to-query displacement, a semantic head predicts `N` sampling
//!   offsets around the query, the sampled features are summed, and a
//!   refinement head predicts the query-to-keypoint displacement. The total
//!   displacement is the sum of the two stages.
//! * [`pqe_forward`]: pose query encoding, the concatenation of instance
//!   features sampled at every keypoint query.
//!
//! Each forward returns a tape holding what the matching backward needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::types::Point2;

pub const DEFAULT_SEMANTIC_POINTS: usize = 9;

/// Interpolation stencil for one sample point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// False when the coordinate was clamped, which zeroes its derivative.
    dx_live: bool,
    dy_live: bool,
}

fn axis(coord: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    let live = (0.0..=hi).contains(&coord);
    let c = if coord.is_nan() { 0.0 } else { coord.clamp(0.0, hi) };
    if len == 1 {
        return (0, 0, 0.0, false);
    }
    // Left-cell convention: the patch starting at floor(c), shifted left at the far border.
    let i0 = (c.floor() as usize).min(len - 2);
    (i0, i0 + 1, c - i0 as f64, live)
}

impl Stencil {
    pub fn new(height: usize, width: usize, point: Point2) -> Self {
        let (x0, x1, fx, dx_live) = axis(point.x, width);
        let (y0, y1, fy, dy_live) = axis(point.y, height);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            dx_live,
            dy_live,
        }
    }

    /// Top-left cell of the patch plus clamp flags; constant on each smooth piece.
    pub fn cell_key(&self) -> (u32, u32, u8) {
        (
            self.x0 as u32,
            self.y0 as u32,
            self.dx_live as u8 | (self.dy_live as u8) << 1,
        )
    }

    #[inline]
    fn corners(&self, grid: &FeatureGrid, c: usize) -> [f64; 4] {
        let plane = grid.channel(c);
        let w = grid.width();
        [
            plane[self.y0 * w + self.x0],
            plane[self.y0 * w + self.x1],
            plane[self.y1 * w + self.x0],
            plane[self.y1 * w + self.x1],
        ]
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    pub fn sample(&self, grid: &FeatureGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.channels()];
        self.sample_add(grid, &mut out);
        out
    }

    /// Adds the interpolated vector into `out`.
    pub fn sample_add(&self, grid: &FeatureGrid, out: &mut [f64]) {
        let wts = self.weights();
        for (c, o) in out.iter_mut().enumerate() {
            let v = self.corners(grid, c);
            *o += wts[0] * v[0] + wts[1] * v[1] + wts[2] * v[2] + wts[3] * v[3];
        }
    }

    /// Scatters the cotangent of the sampled vector into `grid_grad`.
    pub fn scatter(&self, cot: &[f64], grid_grad: &mut FeatureGrid) {
        let wts = self.weights();
        let w = grid_grad.width();
        let idx = [
            self.y0 * w + self.x0,
            self.y0 * w + self.x1,
            self.y1 * w + self.x0,
            self.y1 * w + self.x1,
        ];
        for (c, &g) in cot.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let plane = grid_grad.channel_mut(c);
            for k in 0..4 {
                plane[idx[k]] += wts[k] * g;
            }
        }
    }

    /// Cotangent of the sample point given the cotangent of the sampled vector.
    pub fn point_grad(&self, grid: &FeatureGrid, cot: &[f64]) -> Point2 {
        let (fx, fy) = (self.fx, self.fy);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (c, &g) in cot.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let [v00, v01, v10, v11] = self.corners(grid, c);
            gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        Point2::new(
            if self.dx_live { gx } else { 0.0 },
            if self.dy_live { gy } else { 0.0 },
        )
    }
}

/// Bilinear interpolation at `point = (x, y)`; coordinates outside the grid
/// are clamped to the border.
pub fn bilinear_sample(grid: &FeatureGrid, point: Point2) -> Vec<f64> {
    Stencil::new(grid.height(), grid.width(), point).sample(grid)
}

/// Recorded [`bilinear_sample`] evaluation.
#[derive(Debug, Clone)]
pub struct SampleTape {
    stencil: Stencil,
    channels: usize,
}

pub fn bilinear_sample_taped(grid: &FeatureGrid, point: Point2) -> (Vec<f64>, SampleTape) {
    let stencil = Stencil::new(grid.height(), grid.width(), point);
    (
        stencil.sample(grid),
        SampleTape {
            stencil,
            channels: grid.channels(),
        },
    )
}

/// Vector-Jacobian product of [`bilinear_sample`]: accumulates into
/// `grid_grad` and returns the point cotangent.
pub fn bilinear_sample_backward(
    tape: &SampleTape,
    grid: &FeatureGrid,
    cot: &[f64],
    grid_grad: &mut FeatureGrid,
) -> Result<Point2> {
    if cot.len() != tape.channels || !grid_grad.same_shape(grid) {
        return Err(Error::TapeMismatch(format!(
            "sample cotangent has {} entries for {} channels",
            cot.len(),
            tape.channels
        )));
    }
    tape.stencil.scatter(cot, grid_grad);
    Ok(tape.stencil.point_grad(grid, cot))
}

/// Affine map `y = W x + b` applied to a sampled feature vector (a 1x1 head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform weights in `[-scale, scale] / sqrt(in_dim)`, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let bound = scale / (in_dim.max(1) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns the input cotangent.
    pub fn backward(&self, x: &[f64], cot: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in cot.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        gx
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// The three keypoint-query heads of one keypoint branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KqeParams {
    /// Features at the center cell to `D_{c->q}` (2 outputs).
    pub query: Linear,
    /// Features at the query to `N` semantic offsets (2N outputs).
    pub semantic: Linear,
    /// Summed semantic features to `D_{q->k}` (2 outputs).
    pub refine: Linear,
}

impl KqeParams {
    pub fn zeros(channels: usize, n_semantic: usize) -> Self {
        Self {
            query: Linear::zeros(channels, 2),
            semantic: Linear::zeros(channels, 2 * n_semantic),
            refine: Linear::zeros(channels, 2),
        }
    }

    pub fn channels(&self) -> usize {
        self.query.in_dim
    }

    pub fn n_semantic(&self) -> usize {
        self.semantic.out_dim / 2
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            semantic: self.semantic.zeros_like(),
            refine: self.refine.zeros_like(),
        }
    }

    fn check(&self, grid: &FeatureGrid) -> Result<()> {
        let c = grid.channels();
        let ok = self.query.in_dim == c
            && self.semantic.in_dim == c
            && self.refine.in_dim == c
            && self.query.out_dim == 2
            && self.refine.out_dim == 2
            && self.semantic.out_dim % 2 == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "keypoint query heads expect {} / {} / {} input channels, grid has {c}",
                self.query.in_dim, self.semantic.in_dim, self.refine.in_dim
            )))
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.query
            .params()
            .chain(self.semantic.params())
            .chain(self.refine.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.query
            .params_mut()
            .chain(self.semantic.params_mut())
            .chain(self.refine.params_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KqeOutput {
    /// `D_{c->q}`.
    pub query_displacement: Point2,
    /// `q = c + D_{c->q}`.
    pub query_position: Point2,
    /// `D_{q->k}`.
    pub refine_displacement: Point2,
    /// `D_{c->k} = D_{c->q} + D_{q->k}`.
    pub total_offset: Point2,
    /// Summed semantic-point features `R_k'` at the center.
    pub transformed_feature: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct KqeTape {
    center: Stencil,
    center_feature: Vec<f64>,
    query: Stencil,
    query_feature: Vec<f64>,
    semantic_points: Vec<Stencil>,
    transformed_feature: Vec<f64>,
}

impl KqeTape {
    pub fn stencils(&self) -> impl Iterator<Item = &Stencil> {
        [&self.center, &self.query]
            .into_iter()
            .chain(self.semantic_points.iter())
    }
}

/// Cotangents flowing into one keypoint-query evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KqeCotangent {
    pub total_offset: Point2,
    /// Cotangent on `D_{c->q}` from consumers of the query position.
    pub query_displacement: Point2,
}

pub fn kqe_forward(rk: &FeatureGrid, c: Point2, params: &KqeParams) -> Result<KqeOutput> {
    kqe_forward_taped(rk, c, params).map(|(out, _)| out)
}

pub fn kqe_forward_taped(
    rk: &FeatureGrid,
    c: Point2,
    params: &KqeParams,
) -> Result<(KqeOutput, KqeTape)> {
    params.check(rk)?;
    let (h, w) = (rk.height(), rk.width());

    let center = Stencil::new(h, w, c);
    let center_feature = center.sample(rk);
    let dq = params.query.forward(&center_feature);
    let query_displacement = Point2::new(dq[0], dq[1]);
    let query_position = c + query_displacement;

    let query = Stencil::new(h, w, query_position);
    let query_feature = query.sample(rk);
    let sem = params.semantic.forward(&query_feature);
    let mut transformed_feature = vec![0.0; rk.channels()];
    let semantic_points: Vec<Stencil> = sem
        .chunks_exact(2)
        .map(|d| {
            let s = Stencil::new(h, w, query_position + Point2::new(d[0], d[1]));
            s.sample_add(rk, &mut transformed_feature);
            s
        })
        .collect();

    let dk = params.refine.forward(&transformed_feature);
    let refine_displacement = Point2::new(dk[0], dk[1]);
    let total_offset = query_displacement + refine_displacement;

    Ok((
        KqeOutput {
            query_displacement,
            query_position,
            refine_displacement,
            total_offset,
            transformed_feature: transformed_feature.clone(),
        },
        KqeTape {
            center,
            center_feature,
            query,
            query_feature,
            semantic_points,
            transformed_feature,
        },
    ))
}

/// Reverse pass of [`kqe_forward`]. Accumulates into `param_grad` and
/// `grid_grad`; returns the cotangent of the center point.
pub fn kqe_backward(
    tape: &KqeTape,
    rk: &FeatureGrid,
    params: &KqeParams,
    cot: &KqeCotangent,
    param_grad: &mut KqeParams,
    grid_grad: &mut FeatureGrid,
) -> Result<Point2> {
    if !grid_grad.same_shape(rk) || tape.transformed_feature.len() != rk.channels() {
        return Err(Error::TapeMismatch(
            "gradient grid does not match the recorded feature grid".into(),
        ));
    }
    let g_dk = [cot.total_offset.x, cot.total_offset.y];
    let mut g_dq = cot.total_offset + cot.query_displacement;

    let g_rk = params
        .refine
        .backward(&tape.transformed_feature, &g_dk, &mut param_grad.refine);

    let mut g_q = Point2::default();
    let mut g_sem = Vec::with_capacity(2 * tape.semantic_points.len());
    for s in &tape.semantic_points {
        s.scatter(&g_rk, grid_grad);
        let gp = s.point_grad(rk, &g_rk);
        g_q = g_q + gp;
        g_sem.push(gp.x);
        g_sem.push(gp.y);
    }

    let g_fq = params
        .semantic
        .backward(&tape.query_feature, &g_sem, &mut param_grad.semantic);
    tape.query.scatter(&g_fq, grid_grad);
    g_q = g_q + tape.query.point_grad(rk, &g_fq);

    g_dq = g_dq + g_q;
    let mut g_c = g_q;
    let g_fc = params
        .query
        .backward(&tape.center_feature, &[g_dq.x, g_dq.y], &mut param_grad.query);
    tape.center.scatter(&g_fc, grid_grad);
    g_c = g_c + tape.center.point_grad(rk, &g_fc);
    Ok(g_c)
}

#[derive(Debug, Clone)]
pub struct PqeTape {
    samples: Vec<Stencil>,
    channels: usize,
}

impl PqeTape {
    pub fn stencils(&self) -> impl Iterator<Item = &Stencil> {
        self.samples.iter()
    }
}

/// Concatenates `ri` sampled at `c + d_i` for every query displacement `d_i`.
pub fn pqe_forward(ri: &FeatureGrid, c: Point2, query_displacements: &[Point2]) -> Vec<f64> {
    pqe_forward_taped(ri, c, query_displacements).0
}

pub fn pqe_forward_taped(
    ri: &FeatureGrid,
    c: Point2,
    query_displacements: &[Point2],
) -> (Vec<f64>, PqeTape) {
    let ch = ri.channels();
    let mut out = vec![0.0; ch * query_displacements.len()];
    let samples = query_displacements
        .iter()
        .zip(out.chunks_exact_mut(ch))
        .map(|(&d, slot)| {
            let s = Stencil::new(ri.height(), ri.width(), c + d);
            s.sample_add(ri, slot);
            s
        })
        .collect();
    (
        out,
        PqeTape {
            samples,
            channels: ch,
        },
    )
}

/// Reverse pass of [`pqe_forward`]: accumulates into `grid_grad` and returns
/// the cotangent of each query displacement.
pub fn pqe_backward(
    tape: &PqeTape,
    ri: &FeatureGrid,
    cot: &[f64],
    grid_grad: &mut FeatureGrid,
) -> Result<Vec<Point2>> {
    if cot.len() != tape.channels * tape.samples.len() || !grid_grad.same_shape(ri) {
        return Err(Error::TapeMismatch(format!(
            "pose query cotangent has {} entries, expected {}",
            cot.len(),
            tape.channels * tape.samples.len()
        )));
    }
    Ok(tape
        .samples
        .iter()
        .zip(cot.chunks_exact(tape.channels))
        .map(|(s, g)| {
            s.scatter(g, grid_grad);
            s.point_grad(ri, g)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureGrid {
        FeatureGrid::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_params(c: usize, n: usize, rng: &mut ChaCha8Rng) -> KqeParams {
        let mut p = KqeParams {
            query: Linear::random(c, 2, 1.0, rng),
            semantic: Linear::random(c, 2 * n, 1.0, rng),
            refine: Linear::random(c, 2, 1.0, rng),
        };
        for b in p.params_mut() {
            *b += rng.gen_range(-0.05..0.05);
        }
        p
    }

    #[test]
    fn sample_on_lattice_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(3, 5, 6, &mut rng);
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(bilinear_sample(&g, Point2::new(x as f64, y as f64)), g.vector_at(y, x));
            }
        }
    }

    #[test]
    fn sample_center_of_four_cells() {
        let g = FeatureGrid::from_vec(1, 2, 2, vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&g, Point2::new(0.5, 0.5)), vec![1.0]);
    }

    #[test]
    fn sample_clamps_to_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(2, 4, 4, &mut rng);
        assert_eq!(bilinear_sample(&g, Point2::new(-5.0, -5.0)), g.vector_at(0, 0));
        assert_eq!(bilinear_sample(&g, Point2::new(10.0, 1.0)), g.vector_at(1, 3));
    }

    #[test]
    fn sample_is_linear_along_axes_within_a_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(1, 4, 4, &mut rng);
        let at = |x: f64| bilinear_sample(&g, Point2::new(x, 1.3))[0];
        let (a, b) = (at(1.0), at(2.0));
        for t in [0.1, 0.25, 0.7] {
            assert!((at(1.0 + t) - (a + t * (b - a))).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_grid_samples_without_panicking() {
        let g = FeatureGrid::from_vec(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&g, Point2::new(1.5, 0.4)), vec![2.5]);
        let one = FeatureGrid::from_vec(1, 1, 1, vec![7.0]).unwrap();
        assert_eq!(bilinear_sample(&one, Point2::new(0.3, -2.0)), vec![7.0]);
    }

    #[test]
    fn positional_gradient_of_flat_and_ramp_fields() {
        let flat = FeatureGrid::from_fn(1, 5, 5, |_, _, _| 3.0);
        let ramp = FeatureGrid::from_fn(1, 5, 5, |_, _, x| x as f64);
        let p = Point2::new(2.3, 1.6);
        for (grid, expect) in [(&flat, Point2::new(0.0, 0.0)), (&ramp, Point2::new(1.0, 0.0))] {
            let (_, tape) = bilinear_sample_taped(grid, p);
            let mut gg = FeatureGrid::zeros(1, 5, 5);
            let gp = bilinear_sample_backward(&tape, grid, &[1.0], &mut gg).unwrap();
            assert!((gp.x - expect.x).abs() < 1e-12 && (gp.y - expect.y).abs() < 1e-12);
        }
        // Clamped coordinates carry no positional gradient.
        let (_, tape) = bilinear_sample_taped(&ramp, Point2::new(-1.0, 2.0));
        let mut gg = FeatureGrid::zeros(1, 5, 5);
        assert_eq!(
            bilinear_sample_backward(&tape, &ramp, &[1.0], &mut gg).unwrap(),
            Point2::new(0.0, 0.0)
        );
    }

    #[test]
    fn backward_rejects_mismatched_cotangent() {
        let g = FeatureGrid::zeros(2, 3, 3);
        let (_, tape) = bilinear_sample_taped(&g, Point2::new(1.0, 1.0));
        let mut gg = FeatureGrid::zeros(2, 3, 3);
        assert!(matches!(
            bilinear_sample_backward(&tape, &g, &[1.0], &mut gg),
            Err(Error::TapeMismatch(_))
        ));
        let (_, ptape) = pqe_forward_taped(&g, Point2::new(1.0, 1.0), &[Point2::default(); 2]);
        assert!(matches!(
            pqe_backward(&ptape, &g, &[0.0; 3], &mut gg),
            Err(Error::TapeMismatch(_))
        ));
    }

    #[test]
    fn kqe_zero_weights_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(3, 6, 6, &mut rng);
        let n = 4;
        let params = KqeParams::zeros(3, n);
        let c = Point2::new(2.0, 3.0);
        let out = kqe_forward(&g, c, &params).unwrap();
        assert_eq!(out.query_displacement, Point2::default());
        assert_eq!(out.query_position, c);
        assert_eq!(out.total_offset, Point2::default());
        let expect: Vec<f64> = g.vector_at(3, 2).iter().map(|v| n as f64 * v).collect();
        for (a, b) in out.transformed_feature.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kqe_without_semantic_points_uses_refine_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(3, 6, 6, &mut rng);
        let mut params = random_params(3, 0, &mut rng);
        params.refine.bias = vec![0.25, -0.5];
        let out = kqe_forward(&g, Point2::new(2.0, 2.0), &params).unwrap();
        assert!(out.transformed_feature.iter().all(|v| *v == 0.0));
        assert_eq!(out.refine_displacement, Point2::new(0.25, -0.5));
        assert_eq!(
            out.total_offset,
            out.query_displacement + out.refine_displacement
        );
    }

    #[test]
    fn kqe_rejects_channel_mismatch() {
        let g = FeatureGrid::zeros(4, 3, 3);
        assert!(matches!(
            kqe_forward(&g, Point2::default(), &KqeParams::zeros(3, 2)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pqe_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_grid(3, 5, 5, &mut rng);
        let c = Point2::new(1.0, 2.0);
        let out = pqe_forward(&g, c, &[Point2::default(); 4]);
        assert_eq!(out.len(), 12);
        let v = g.vector_at(2, 1);
        for chunk in out.chunks(3) {
            assert_eq!(chunk, v.as_slice());
        }
        let d = Point2::new(0.3, 1.2);
        assert_eq!(pqe_forward(&g, c, &[d]), bilinear_sample(&g, c + d));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_grid(3, 7, 7, &mut rng);
        let p = random_params(3, 3, &mut rng);
        let a = kqe_forward(&g, Point2::new(3.0, 3.0), &p).unwrap();
        let b = kqe_forward(&g, Point2::new(3.0, 3.0), &p).unwrap();
        assert_eq!(a, b);
    }
}
