//! Desk-scale training: synthetic scenes, a tiny two-branch model, Adam and
//! gradient verification.

mod adam;
mod checkpoint;
mod gradcheck;
mod model;
mod synth;
mod train;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use model::{Conv2d, ForwardPass, ModelConfig, TinyModel, BACKBONE_LAYERS};
pub use synth::{
    random_scene, synth_scene, synth_scene_with, toy_falloff, SceneSpec, SyntheticScene,
    TOY_KEYPOINT_NAMES, TOY_SKELETON,
};
pub use train::{
    eval_scenes, evaluate_model, model_forward, scene_targets, score_target, train_step,
    SceneTargets, StepReport, TrainConfig, Trainer, EVAL_SEED_BASE,
};
