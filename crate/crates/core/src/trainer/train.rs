use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    assign_regions, build_cir_target, build_offset_target, build_static_label, build_weight_map,
    InstanceLabel, OffsetTarget, RegionAssignment, WeightMap, DEFAULT_GAMMA,
};
use crate::decoder::{decode, pose_at, DecodeParams};
use crate::error::{Error, Result};
use crate::eval::{summarize, Detection, EvalParams, EvalResult};
use crate::grid::{OffsetField, ScoreMap};
use crate::losses::{smooth_l1, total_loss, weighted_l2, TotalLoss, DEFAULT_LAMBDA};
use crate::qem::{KqeOutput, DEFAULT_SEMANTIC_POINTS};
use crate::types::{FalloffConstants, GridGeometry};

use super::adam::Adam;
use super::model::{ForwardPass, ModelConfig, TinyModel};
use super::synth::{random_scene, toy_falloff, SceneSpec, SyntheticScene};

/// First seed of the held-out evaluation scenes; training draws from a
/// disjoint stream.
pub const EVAL_SEED_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    pub n_semantic: usize,
    pub lambda_i: f64,
    pub lambda_d: f64,
    pub grid: (usize, usize),
    pub num_keypoints: usize,
    pub instance_label: InstanceLabel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            gamma: DEFAULT_GAMMA,
            n_semantic: DEFAULT_SEMANTIC_POINTS,
            lambda_i: DEFAULT_LAMBDA,
            lambda_d: DEFAULT_LAMBDA,
            grid: (64, 64),
            num_keypoints: 5,
            instance_label: InstanceLabel::Cir,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.lambda_i >= 0.0) || !(self.lambda_d >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid must be at least 1x1");
        }
        if self.num_keypoints == 0 {
            return bad("num_keypoints must be positive");
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            height: self.grid.0,
            width: self.grid.1,
            stride: GridGeometry::DEFAULT_STRIDE,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::toy(self.num_keypoints, self.n_semantic)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            num_keypoints: self.num_keypoints,
            ..SceneSpec::default()
        }
    }

    pub fn falloff(&self) -> FalloffConstants {
        toy_falloff(self.num_keypoints)
    }

    /// Seed of the `index`-th training scene.
    pub fn train_scene_seed(&self, index: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base: u64 = rng.gen_range(0..EVAL_SEED_BASE / 2);
        base + index
    }
}

/// Prediction-independent supervision for one scene.
#[derive(Debug, Clone)]
pub struct SceneTargets {
    pub assignment: RegionAssignment,
    pub weights: WeightMap,
    pub offsets: OffsetTarget,
}

pub fn scene_targets(scene: &SyntheticScene, gamma: f64) -> Result<SceneTargets> {
    let assignment = assign_regions(&scene.annotations, &scene.geom, gamma)?;
    let weights = build_weight_map(&assignment);
    let offsets = build_offset_target(&scene.annotations, &assignment, scene.input.channels())?;
    Ok(SceneTargets {
        assignment,
        weights,
        offsets,
    })
}

/// Score-map target for the current predictions. For the quality-aware label
/// it is recomputed from the poses decoded at every assigned cell.
pub fn score_target(
    label: InstanceLabel,
    predicted_offsets: &OffsetField,
    scene: &SyntheticScene,
    targets: &SceneTargets,
    kc: &FalloffConstants,
) -> Result<ScoreMap> {
    match label {
        InstanceLabel::Cir => build_cir_target(
            |y, x| pose_at(predicted_offsets, y, x, 1.0),
            &scene.annotations,
            &targets.assignment,
            kc,
        ),
        other => Ok(build_static_label(other, &scene.annotations, &targets.assignment)),
    }
}

/// Forward output in the shape the pipeline consumes.
pub fn model_forward(
    model: &TinyModel,
    scene: &SyntheticScene,
) -> Result<(ScoreMap, OffsetField, Vec<KqeOutput>)> {
    let pass = model.forward(&scene.input)?;
    Ok((pass.score, pass.offsets, pass.kqe))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub score_loss: f64,
    pub offset_loss: f64,
}

pub(crate) fn scene_loss(
    pass: &ForwardPass,
    targets: &SceneTargets,
    score_target: &ScoreMap,
    config: &TrainConfig,
) -> Result<TotalLoss> {
    let l_i = weighted_l2(&pass.score, score_target, &targets.weights)?;
    let l_d = smooth_l1(&pass.offsets, &targets.offsets)?;
    Ok(total_loss(&l_i, &l_d, config.lambda_i, config.lambda_d))
}

/// One optimisation step on `batch`; gradients are averaged over the batch.
pub fn train_step(
    model: &mut TinyModel,
    optimizer: &mut Adam,
    batch: &[SyntheticScene],
    config: &TrainConfig,
    kc: &FalloffConstants,
) -> Result<StepReport> {
    let mut grad_sum = vec![0.0; model.num_params()];
    let (mut loss, mut li, mut ld) = (0.0, 0.0, 0.0);
    for scene in batch {
        let targets = scene_targets(scene, config.gamma)?;
        let pass = model.forward(&scene.input)?;
        let target = score_target(config.instance_label, &pass.offsets, scene, &targets, kc)?;
        let total = scene_loss(&pass, &targets, &target, config)?;
        if !total.value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: optimizer.steps() as usize + 1,
                score_loss: total.score.value,
                offset_loss: total.offset.value,
            });
        }
        let grad = model.backward(&pass, &total.score.grad, &total.offset.grad)?;
        for (a, b) in grad_sum.iter_mut().zip(grad.flat_params()) {
            *a += b;
        }
        loss += total.value;
        li += total.score.value;
        ld += total.offset.value;
    }
    let n = batch.len().max(1) as f64;
    grad_sum.iter_mut().for_each(|g| *g /= n);
    let mut params = model.flat_params();
    optimizer.update(&mut params, &grad_sum);
    model.load_flat_params(&params)?;
    Ok(StepReport {
        step: optimizer.steps() as usize,
        loss: loss / n,
        score_loss: li / n,
        offset_loss: ld / n,
    })
}

/// Model, optimizer and data stream of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TinyModel,
    pub optimizer: Adam,
    pub falloff: FalloffConstants,
    fixed: Option<Vec<SyntheticScene>>,
    drawn: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = TinyModel::new(config.model_config(), config.seed);
        let optimizer = Adam::new(model.num_params(), config.lr);
        let falloff = config.falloff();
        Ok(Self {
            config,
            model,
            optimizer,
            falloff,
            fixed: None,
            drawn: 0,
        })
    }

    /// Trains on a fixed scene list (cycled) instead of fresh scenes.
    pub fn with_fixed_data(mut self, scenes: Vec<SyntheticScene>) -> Self {
        self.fixed = Some(scenes);
        self
    }

    fn next_batch(&mut self) -> Result<Vec<SyntheticScene>> {
        let geom = self.config.geometry();
        let spec = self.config.scene_spec();
        (0..self.config.batch_size)
            .map(|_| {
                let i = self.drawn;
                self.drawn += 1;
                match &self.fixed {
                    Some(s) => Ok(s[(i as usize) % s.len()].clone()),
                    None => random_scene(self.config.train_scene_seed(i), &geom, &spec),
                }
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch()?;
        train_step(
            &mut self.model,
            &mut self.optimizer,
            &batch,
            &self.config,
            &self.falloff,
        )
    }

    /// Runs the configured number of steps, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        let mut history = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let r = self.step()?;
            on_step(&r);
            history.push(r);
        }
        Ok(history)
    }
}

/// Held-out evaluation scenes for a configuration.
pub fn eval_scenes(config: &TrainConfig, count: usize) -> Result<Vec<SyntheticScene>> {
    let geom = config.geometry();
    let spec = config.scene_spec();
    (0..count as u64)
        .map(|i| random_scene(EVAL_SEED_BASE + i, &geom, &spec))
        .collect()
}

/// Decodes every scene and scores the detections against its annotations.
pub fn evaluate_model(
    model: &TinyModel,
    scenes: &[SyntheticScene],
    params: &DecodeParams,
    kc: &FalloffConstants,
) -> Result<EvalResult> {
    let mut gts = BTreeMap::new();
    let mut dets = Vec::new();
    let mut stride = GridGeometry::DEFAULT_STRIDE;
    for (id, scene) in scenes.iter().enumerate() {
        stride = scene.geom.stride;
        let pass = model.forward(&scene.input)?;
        for c in decode(&pass.score, &pass.offsets, params, kc)? {
            dets.push(Detection {
                image_id: id as u64,
                pose: c.pose,
            });
        }
        gts.insert(id as u64, scene.annotations.clone());
    }
    summarize(&dets, &gts, &EvalParams::new(kc.clone(), stride))
}
