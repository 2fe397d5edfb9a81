//! A small two-branch network assembled from the query encoding operators.
//!
//! Backbone: stacked dilated convolutions with softplus producing `R_g`. Keypoint branch:
//! one 1x1 head per keypoint producing `R_k`, followed by keypoint query
//! encoding at every cell. Instance branch: a 1x1 head producing `R_I`,
//! pose query encoding at the predicted keypoint queries, and a linear score
//! head with a sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, OffsetField, ScoreMap};
use crate::qem::{
    kqe_backward, kqe_forward_taped, pqe_backward, pqe_forward_taped, KqeCotangent, KqeOutput,
    KqeParams, KqeTape, Linear, PqeTape,
};
use crate::types::Point2;

/// 2-D convolution with zero "same" padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub dilation: usize,
    /// `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, ksize: usize, dilation: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            ksize,
            dilation,
            weight: vec![0.0; out_ch * in_ch * ksize * ksize],
            bias: vec![0.0; out_ch],
        }
    }

    /// He-uniform initialisation.
    pub fn random(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, ksize, dilation);
        let bound = (6.0 / (in_ch * ksize * ksize) as f64).sqrt();
        for w in &mut c.weight {
            *w = rng.gen_range(-bound..=bound);
        }
        c
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_ch, self.out_ch, self.ksize, self.dilation)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let pad = (self.dilation * (self.ksize / 2)) as isize;
        let d = self.dilation as isize;
        (0..self.ksize * self.ksize).map(move |t| {
            let (ky, kx) = ((t / self.ksize) as isize, (t % self.ksize) as isize);
            (t, ky * d - pad, kx * d - pad)
        })
    }

    fn check(&self, input: &FeatureGrid) -> Result<()> {
        if input.channels() != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "convolution expects {} input channels, got {}",
                self.in_ch,
                input.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureGrid) -> Result<FeatureGrid> {
        self.check(input)?;
        let (h, w) = (input.height(), input.width());
        let kk = self.ksize * self.ksize;
        let mut out = FeatureGrid::zeros(self.out_ch, h, w);
        for co in 0..self.out_ch {
            let plane = out.channel_mut(co);
            plane.fill(self.bias[co]);
            for ci in 0..self.in_ch {
                let src = input.channel(ci);
                for (t, dy, dx) in self.taps() {
                    let wt = self.weight[(co * self.in_ch + ci) * kk + t];
                    if wt == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = span(w, dx);
                    for y in span(h, dy).0..span(h, dy).1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + x_lo..y * w + x_hi];
                        let s0 = sy * w + (x_lo as isize + dx) as usize;
                        let s = &src[s0..s0 + (x_hi - x_lo)];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wt * v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input cotangent.
    pub fn backward(
        &self,
        input: &FeatureGrid,
        grad_out: &FeatureGrid,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> FeatureGrid {
        let (h, w) = (input.height(), input.width());
        let kk = self.ksize * self.ksize;
        let mut grad_in = FeatureGrid::zeros(self.in_ch, h, w);
        for co in 0..self.out_ch {
            let go = grad_out.channel(co);
            grad.bias[co] += go.iter().sum::<f64>();
            for ci in 0..self.in_ch {
                let src = input.channel(ci);
                for (t, dy, dx) in self.taps() {
                    let widx = (co * self.in_ch + ci) * kk + t;
                    let wt = self.weight[widx];
                    let (x_lo, x_hi) = span(w, dx);
                    let (y_lo, y_hi) = span(h, dy);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let g = &go[y * w + x_lo..y * w + x_hi];
                        let s0 = sy * w + (x_lo as isize + dx) as usize;
                        let s = &src[s0..s0 + (x_hi - x_lo)];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad.weight[widx] += acc;
                    if need_input_grad && wt != 0.0 {
                        let gi = grad_in.channel_mut(ci);
                        for y in y_lo..y_hi {
                            let sy = (y as isize + dy) as usize;
                            let g = &go[y * w + x_lo..y * w + x_hi];
                            let s0 = sy * w + (x_lo as isize + dx) as usize;
                            for (d, v) in gi[s0..s0 + (x_hi - x_lo)].iter_mut().zip(g) {
                                *d += wt * v;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Output index range `[lo, hi)` whose shifted source index stays in `[0, len)`.
#[inline]
fn span(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Softplus; smooth so that finite differences see no activation kinks.
fn softplus(mut g: FeatureGrid) -> FeatureGrid {
    for v in g.as_mut_slice() {
        *v = if *v > 30.0 { *v } else { v.exp().ln_1p() };
    }
    g
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_keypoints: usize,
    /// Backbone width `C` of `R_g`.
    pub width: usize,
    /// Channels of each `R_k`.
    pub keypoint_channels: usize,
    /// Channels of `R_I`.
    pub instance_channels: usize,
    pub n_semantic: usize,
}

impl ModelConfig {
    pub fn toy(num_keypoints: usize, n_semantic: usize) -> Self {
        Self {
            num_keypoints,
            width: 12,
            keypoint_channels: 8,
            instance_channels: 8,
            n_semantic,
        }
    }
}

/// Backbone layer layout: `(kernel, dilation)`.
pub const BACKBONE_LAYERS: [(usize, usize); 3] = [(5, 1), (5, 2), (5, 3)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub backbone: Vec<Conv2d>,
    pub keypoint_heads: Vec<Conv2d>,
    pub instance_head: Conv2d,
    pub kqe: Vec<KqeParams>,
    pub score_head: Linear,
}

impl TinyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.num_keypoints;
        let c = config.width;
        let mut backbone = Vec::new();
        let mut in_ch = k;
        for &(ks, dil) in &BACKBONE_LAYERS {
            backbone.push(Conv2d::random(in_ch, c, ks, dil, &mut rng));
            in_ch = c;
        }
        let keypoint_heads = (0..k)
            .map(|_| Conv2d::random(c, config.keypoint_channels, 1, 1, &mut rng))
            .collect();
        let instance_head = Conv2d::random(c, config.instance_channels, 1, 1, &mut rng);
        let ck = config.keypoint_channels;
        let kqe = (0..k)
            .map(|_| KqeParams {
                query: Linear::random(ck, 2, 0.5, &mut rng),
                semantic: Linear::random(ck, 2 * config.n_semantic, 0.5, &mut rng),
                refine: Linear::random(ck, 2, 0.1, &mut rng),
            })
            .collect();
        let score_head = Linear::random(k * config.instance_channels, 1, 0.5, &mut rng);
        Self {
            config,
            backbone,
            keypoint_heads,
            instance_head,
            kqe,
            score_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            backbone: self.backbone.iter().map(Conv2d::zeros_like).collect(),
            keypoint_heads: self.keypoint_heads.iter().map(Conv2d::zeros_like).collect(),
            instance_head: self.instance_head.zeros_like(),
            kqe: self.kqe.iter().map(KqeParams::zeros_like).collect(),
            score_head: self.score_head.zeros_like(),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in self.backbone.iter().chain(&self.keypoint_heads).chain([&self.instance_head]) {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        for p in &self.kqe {
            for l in [&p.query, &p.semantic, &p.refine] {
                v.push(&l.weight);
                v.push(&l.bias);
            }
        }
        v.push(&self.score_head.weight);
        v.push(&self.score_head.bias);
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in self
            .backbone
            .iter_mut()
            .chain(self.keypoint_heads.iter_mut())
            .chain(std::iter::once(&mut self.instance_head))
        {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        for p in &mut self.kqe {
            for l in [&mut p.query, &mut p.semantic, &mut p.refine] {
                v.push(&mut l.weight);
                v.push(&mut l.bias);
            }
        }
        v.push(&mut self.score_head.weight);
        v.push(&mut self.score_head.bias);
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// All parameters in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureGrid) -> Result<ForwardPass> {
        let k = self.config.num_keypoints;
        if input.channels() != k {
            return Err(Error::ShapeMismatch(format!(
                "model expects {k} input channels, scene has {}",
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());

        let mut activations = Vec::with_capacity(self.backbone.len() + 1);
        activations.push(input.clone());
        for conv in &self.backbone {
            let next = softplus(conv.forward(activations.last().expect("non-empty"))?);
            activations.push(next);
        }
        let rg = activations.last().expect("non-empty");
        let rk: Vec<FeatureGrid> = self
            .keypoint_heads
            .iter()
            .map(|head| head.forward(rg))
            .collect::<Result<_>>()?;
        let ri = self.instance_head.forward(rg)?;

        let cells = h * w;
        let mut kqe = Vec::with_capacity(cells * k);
        let mut kqe_tapes = Vec::with_capacity(cells * k);
        let mut pqe_tapes = Vec::with_capacity(cells);
        let mut pose_features = Vec::with_capacity(cells);
        let mut logits = Vec::with_capacity(cells);
        let mut score = ScoreMap::zeros(h, w);
        let mut offsets = FeatureGrid::zeros(2 * k, h, w);
        for y in 0..h {
            for x in 0..w {
                let c = Point2::new(x as f64, y as f64);
                let mut disps = Vec::with_capacity(k);
                for i in 0..k {
                    let (out, tape) = kqe_forward_taped(&rk[i], c, &self.kqe[i])?;
                    // Stored field follows the `cell - keypoint` convention.
                    offsets.set(2 * i, y, x, -out.total_offset.x);
                    offsets.set(2 * i + 1, y, x, -out.total_offset.y);
                    disps.push(out.query_displacement);
                    kqe.push(out);
                    kqe_tapes.push(tape);
                }
                let (feat, tape) = pqe_forward_taped(&ri, c, &disps);
                let z = self.score_head.forward(&feat)[0];
                score.set(y, x, sigmoid(z));
                logits.push(z);
                pose_features.push(feat);
                pqe_tapes.push(tape);
            }
        }
        Ok(ForwardPass {
            score,
            offsets,
            kqe,
            activations,
            rk,
            ri,
            kqe_tapes,
            pqe_tapes,
            pose_features,
        })
    }

    /// Reverse pass given cotangents of the score map and the offset field.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        score_cot: &[f64],
        offset_cot: &[f64],
    ) -> Result<TinyModel> {
        let k = self.config.num_keypoints;
        let (h, w) = (pass.score.height(), pass.score.width());
        if score_cot.len() != h * w || offset_cot.len() != 2 * k * h * w {
            return Err(Error::TapeMismatch(format!(
                "expected {} score and {} offset cotangents, got {} and {}",
                h * w,
                2 * k * h * w,
                score_cot.len(),
                offset_cot.len()
            )));
        }
        let mut grad = self.zeros_like();
        let mut g_ri = FeatureGrid::zeros(pass.ri.channels(), h, w);
        let mut g_rk: Vec<FeatureGrid> = pass
            .rk
            .iter()
            .map(|g| FeatureGrid::zeros(g.channels(), h, w))
            .collect();
        let plane = h * w;
        for cell in 0..plane {
            let s = pass.score.as_slice()[cell];
            let g_z = score_cot[cell] * s * (1.0 - s);
            let mut g_disp = vec![Point2::default(); k];
            if g_z != 0.0 {
                let g_feat = self.score_head.backward(
                    &pass.pose_features[cell],
                    &[g_z],
                    &mut grad.score_head,
                );
                g_disp = pqe_backward(&pass.pqe_tapes[cell], &pass.ri, &g_feat, &mut g_ri)?;
            }
            for i in 0..k {
                // Offset field is the negated total offset.
                let cot = KqeCotangent {
                    total_offset: Point2::new(
                        -offset_cot[2 * i * plane + cell],
                        -offset_cot[(2 * i + 1) * plane + cell],
                    ),
                    query_displacement: g_disp[i],
                };
                if cot == KqeCotangent::default() {
                    continue;
                }
                kqe_backward(
                    &pass.kqe_tapes[cell * k + i],
                    &pass.rk[i],
                    &self.kqe[i],
                    &cot,
                    &mut grad.kqe[i],
                    &mut g_rk[i],
                )?;
            }
        }

        let rg = pass.activations.last().expect("non-empty");
        let mut g_rg =
            self.instance_head
                .backward(rg, &g_ri, &mut grad.instance_head, true);
        for (i, head) in self.keypoint_heads.iter().enumerate() {
            let g = head.backward(rg, &g_rk[i], &mut grad.keypoint_heads[i], true);
            for (a, b) in g_rg.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        for l in (0..self.backbone.len()).rev() {
            let out = &pass.activations[l + 1];
            for (g, o) in g_rg.as_mut_slice().iter_mut().zip(out.as_slice()) {
                // softplus' = 1 - exp(-softplus)
                *g *= 1.0 - (-*o).exp();
            }
            g_rg = self.backbone[l].backward(&pass.activations[l], &g_rg, &mut grad.backbone[l], l > 0);
        }
        Ok(grad)
    }
}

/// Everything a forward evaluation produced, including what backward needs.
pub struct ForwardPass {
    pub score: ScoreMap,
    pub offsets: OffsetField,
    /// Per-cell keypoint query outputs, cell-major then keypoint.
    pub kqe: Vec<KqeOutput>,
    activations: Vec<FeatureGrid>,
    rk: Vec<FeatureGrid>,
    ri: FeatureGrid,
    kqe_tapes: Vec<KqeTape>,
    pqe_tapes: Vec<PqeTape>,
    pose_features: Vec<Vec<f64>>,
}

impl ForwardPass {
    /// Interpolation cells and clamp states of every bilinear sample taken.
    /// Two passes with equal signatures lie on the same smooth piece.
    pub fn sampling_signature(&self) -> Vec<(u32, u32, u8)> {
        self.kqe_tapes
            .iter()
            .flat_map(|t| t.stencils())
            .chain(self.pqe_tapes.iter().flat_map(|t| t.stencils()))
            .map(|s| s.cell_key())
            .collect()
    }

    /// `R_I'` at a cell.
    pub fn pose_feature(&self, y: usize, x: usize) -> &[f64] {
        &self.pose_features[y * self.score.width() + x]
    }

    pub fn kqe_at(&self, y: usize, x: usize) -> &[KqeOutput] {
        let k = self.offsets.channels() / 2;
        let cell = y * self.score.width() + x;
        &self.kqe[cell * k..(cell + 1) * k]
    }
}
