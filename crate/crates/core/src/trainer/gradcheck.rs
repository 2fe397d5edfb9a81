//! Central-difference verification of the model's analytic gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::FalloffConstants;

use super::model::TinyModel;
use super::synth::SyntheticScene;
use super::train::{scene_loss, scene_targets, score_target, TrainConfig};

/// Gradient magnitudes below this are compared absolutely.
const ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters passed over because a perturbation moved some bilinear
    /// sample across a cell edge or clamp boundary.
    pub skipped: usize,
    /// `(parameter index, analytic, numeric)` for every checked parameter.
    pub entries: Vec<(usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Compares the analytic gradient of the total loss with central
/// differences on `count` randomly chosen parameters. The score target is
/// built once from the unperturbed prediction and held fixed, matching how
/// training treats it.
///
/// Bilinear sampling is only piecewise smooth, so a parameter is replaced
/// by another random draw when either perturbed pass interpolates from a
/// different cell (or clamp state) than the base pass: there the central
/// difference straddles a kink and says nothing about the derivative.
pub fn finite_diff_check(
    model: &TinyModel,
    scene: &SyntheticScene,
    eps: f64,
    count: usize,
    seed: u64,
    config: &TrainConfig,
    kc: &FalloffConstants,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    let targets = scene_targets(scene, config.gamma)?;
    let pass = model.forward(&scene.input)?;
    let target = score_target(config.instance_label, &pass.offsets, scene, &targets, kc)?;
    let total = scene_loss(&pass, &targets, &target, config)?;
    let analytic = model
        .backward(&pass, &total.score.grad, &total.offset.grad)?
        .flat_params();

    let base = model.flat_params();
    let signature = pass.sampling_signature();
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut probe = model.clone();
    let mut loss_at = |params: &[f64]| -> Result<(f64, bool)> {
        probe.load_flat_params(params)?;
        let pass = probe.forward(&scene.input)?;
        let smooth = pass.sampling_signature() == signature;
        Ok((scene_loss(&pass, &targets, &target, config)?.value, smooth))
    };
    let mut entries = Vec::with_capacity(count);
    let mut skipped = 0;
    let mut worst = 0.0f64;
    let mut params = base.clone();
    for &i in &order {
        if entries.len() == count {
            break;
        }
        params[i] = base[i] + eps;
        let (up, up_smooth) = loss_at(&params)?;
        params[i] = base[i] - eps;
        let (down, down_smooth) = loss_at(&params)?;
        params[i] = base[i];
        if !(up_smooth && down_smooth) {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
        entries.push((i, analytic[i], numeric));
    }
    entries.sort_unstable_by_key(|e| e.0);
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked: entries.len(),
        skipped,
        entries,
    })
}
