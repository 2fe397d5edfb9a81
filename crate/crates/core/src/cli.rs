//! Command-line surface. `run_cli` returns the process exit code: 0 on
//! success, 1 when validation or processing fails, 2 on usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::codec::{
    assign_regions, build_cir_target, build_offset_target, build_static_label, build_weight_map,
    InstanceLabel, DEFAULT_GAMMA,
};
use crate::decoder::{
    decode, pose_at, score_quality_pairs, DecodeParams, DEFAULT_NMS_THRESHOLD,
    DEFAULT_SCORE_THRESHOLD, DEFAULT_TOP_K,
};
use crate::error::{Error, Result};
use crate::eval::{summarize, EvalParams};
use crate::grid::{FeatureGrid, ScoreMap};
use crate::io::{
    default_falloff, format_report, format_scatter, load_annotations, load_tensors, read_results,
    save_tensors, write_results, KvConfig, ResultRecord, Tensor,
};
use crate::trainer::{
    eval_scenes, evaluate_model, finite_diff_check, random_scene, save_checkpoint, TrainConfig,
    Trainer,
};
use crate::types::GridGeometry;

/// Largest full-model gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "cirpose", version, about = "Quality-aware single-stage pose regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build training targets for an annotation file and dump them as tensors.
    Encode {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = GridGeometry::DEFAULT_STRIDE)]
        stride: f64,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = InstanceLabel::Cir)]
        instance_label: InstanceLabel,
    },
    /// Turn score/offset tensors into a results file.
    Decode {
        /// Tensor file holding `score:<image id>` and `offsets:<image id>`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = GridGeometry::DEFAULT_STRIDE)]
        stride: f64,
        #[arg(long, default_value_t = 1)]
        category_id: u64,
        #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
        score_threshold: f64,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
        nms_threshold: f64,
        /// Ground truth; supplies falloff constants and is required for the scatter dump.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Write `(instance score, OKS against ground truth)` per kept candidate as CSV.
        #[arg(long, requires = "annotations")]
        emit_scatter: Option<PathBuf>,
    },
    /// Score a results file against ground truth.
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = GridGeometry::DEFAULT_STRIDE)]
        stride: f64,
    },
    /// Compare the toy model's analytic gradient with central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Square grid side overriding the config, to keep the check fast.
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Train the toy model on synthetic scenes.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the loss every this many steps (0 prints only the final loss).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        /// Held-out scenes scored after training (0 skips evaluation).
        #[arg(long, default_value_t = 30)]
        eval_scenes: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time target construction, decoding and evaluation.
    Bench {
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        #[arg(long, default_value_t = 64)]
        grid: usize,
    },
}

pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Encode {
            annotations,
            out,
            stride,
            gamma,
            instance_label,
        } => encode(&annotations, &out, stride, gamma, instance_label),
        Command::Decode {
            input,
            out,
            stride,
            category_id,
            score_threshold,
            top_k,
            nms_threshold,
            annotations,
            emit_scatter,
        } => {
            let params = DecodeParams {
                score_threshold,
                top_k,
                nms_threshold,
            };
            decode_cmd(
                &input,
                &out,
                stride,
                category_id,
                &params,
                annotations.as_deref(),
                emit_scatter.as_deref(),
            )
        }
        Command::Eval {
            annotations,
            results,
            out,
            stride,
        } => eval_cmd(&annotations, &results, out.as_deref(), stride),
        Command::Gradcheck {
            config,
            seed,
            eps,
            count,
            grid,
        } => {
            let mut cfg = load_train_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(g) = grid {
                cfg.grid = (g, g);
            }
            gradcheck(&cfg, eps, count)
        }
        Command::TrainToy {
            config,
            steps,
            seed,
            log_every,
            eval_scenes,
            checkpoint,
        } => {
            let mut cfg = load_train_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            train_toy(&cfg, log_every, eval_scenes, checkpoint.as_deref())
        }
        Command::Bench { iterations, grid } => bench(iterations, grid),
    }
}

const TRAIN_KEYS: &[&str] = &[
    "seed",
    "steps",
    "lr",
    "gamma",
    "n_semantic",
    "lambda_i",
    "lambda_d",
    "grid",
    "instance_label",
    "batch_size",
    "num_keypoints",
];

fn parse_grid(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::parse("config key grid", format!("expected HxW or N, got {v:?}"));
    let (h, w) = match v.split_once(['x', 'X']) {
        Some((h, w)) => (h.trim(), w.trim()),
        None => (v, v),
    };
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

/// Training configuration from a key/value document; absent keys keep
/// their defaults.
pub fn train_config_from(kv: &KvConfig) -> Result<TrainConfig> {
    kv.reject_unknown(TRAIN_KEYS)?;
    let mut cfg = TrainConfig::default();
    if let Some(v) = kv.get("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = kv.get("steps")? {
        cfg.steps = v;
    }
    if let Some(v) = kv.get("lr")? {
        cfg.lr = v;
    }
    if let Some(v) = kv.get("gamma")? {
        cfg.gamma = v;
    }
    if let Some(v) = kv.get("n_semantic")? {
        cfg.n_semantic = v;
    }
    if let Some(v) = kv.get("lambda_i")? {
        cfg.lambda_i = v;
    }
    if let Some(v) = kv.get("lambda_d")? {
        cfg.lambda_d = v;
    }
    if let Some(v) = kv.raw("grid") {
        cfg.grid = parse_grid(v)?;
    }
    if let Some(v) = kv.get("instance_label")? {
        cfg.instance_label = v;
    }
    if let Some(v) = kv.get("batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = kv.get("num_keypoints")? {
        cfg.num_keypoints = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => train_config_from(&KvConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn encode(
    annotations: &Path,
    out: &Path,
    stride: f64,
    gamma: f64,
    label: InstanceLabel,
) -> Result<i32> {
    let ds = load_annotations(annotations, stride)?;
    let k = ds.category.num_keypoints();
    let mut tensors = Vec::new();
    for image in &ds.images {
        let geom = ds.geometry(image)?;
        let anns = &ds.annotations[&image.id];
        let assignment = assign_regions(anns, &geom, gamma)?;
        let weights = build_weight_map(&assignment);
        let target = build_offset_target(anns, &assignment, k)?;
        // The ideal score map: the chosen label evaluated on exact offsets.
        let score = match label {
            InstanceLabel::Cir => build_cir_target(
                |y, x| pose_at(&target.offsets, y, x, 1.0),
                anns,
                &assignment,
                &ds.category.falloff,
            )?,
            other => build_static_label(other, anns, &assignment),
        };
        let (h, w) = (geom.height, geom.width);
        let id = image.id;
        tensors.push(Tensor::from_f64(format!("score:{id}"), vec![1, h, w], score.as_slice())?);
        tensors.push(Tensor::from_f64(
            format!("offsets:{id}"),
            vec![2 * k, h, w],
            target.offsets.as_slice(),
        )?);
        let mask: Vec<f64> = target.mask().iter().map(|&v| f64::from(u8::from(v))).collect();
        tensors.push(Tensor::from_f64(format!("offset_mask:{id}"), vec![2 * k, h, w], &mask)?);
        tensors.push(Tensor::from_f64(format!("weight:{id}"), vec![1, h, w], weights.as_slice())?);
    }
    save_tensors(&tensors, out)?;
    println!(
        "encoded {} images, {} instances -> {}",
        ds.images.len(),
        ds.num_instances(),
        out.display()
    );
    Ok(0)
}

/// Score and offset tensors grouped by image id.
fn decode_inputs(tensors: Vec<Tensor>) -> Result<BTreeMap<u64, (ScoreMap, FeatureGrid)>> {
    let mut scores = BTreeMap::new();
    let mut offsets = BTreeMap::new();
    for t in tensors {
        let Some((kind, id)) = t.name.split_once(':') else {
            continue;
        };
        let id: u64 = id
            .parse()
            .map_err(|_| Error::parse(format!("tensor {}", t.name), "image id is not an integer"))?;
        let shape_err = || Error::ShapeMismatch(format!("tensor {} has dims {:?}", t.name, t.dims));
        match (kind, t.dims.as_slice()) {
            ("score", &[1, h, w]) => {
                scores.insert(id, ScoreMap::from_vec(h, w, t.to_f64())?);
            }
            ("offsets", &[c, h, w]) if c % 2 == 0 && c > 0 => {
                offsets.insert(id, FeatureGrid::from_vec(c, h, w, t.to_f64())?);
            }
            ("score" | "offsets", _) => return Err(shape_err()),
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    for (id, s) in scores {
        let o = offsets
            .remove(&id)
            .ok_or_else(|| Error::MissingField(format!("offsets:{id}")))?;
        if o.height() != s.height() || o.width() != s.width() {
            return Err(Error::ShapeMismatch(format!(
                "image {id}: score {}x{} vs offsets {}x{}",
                s.height(),
                s.width(),
                o.height(),
                o.width()
            )));
        }
        out.insert(id, (s, o));
    }
    if let Some(id) = offsets.keys().next() {
        return Err(Error::MissingField(format!("score:{id}")));
    }
    Ok(out)
}

fn decode_cmd(
    input: &Path,
    out: &Path,
    stride: f64,
    category_id: u64,
    params: &DecodeParams,
    annotations: Option<&Path>,
    scatter: Option<&Path>,
) -> Result<i32> {
    if !(params.score_threshold >= 0.0) || !(params.nms_threshold >= 0.0) {
        return Err(Error::InvalidConfig("thresholds must be >= 0".into()));
    }
    let maps = decode_inputs(load_tensors(input)?)?;
    let gt = annotations.map(|p| load_annotations(p, stride)).transpose()?;
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for (id, (score, offsets)) in &maps {
        let k = offsets.channels() / 2;
        let kc = match &gt {
            Some(ds) => ds.category.falloff.clone(),
            None => default_falloff(k),
        };
        let kept = decode(score, offsets, params, &kc)?;
        if let Some(ds) = &gt {
            let gts = ds.annotations.get(id).ok_or(Error::UnknownImageId(*id))?;
            pairs.extend(score_quality_pairs(&kept, gts, &kc));
        }
        records.extend(
            kept.iter()
                .map(|c| ResultRecord::from_candidate(*id, category_id, c, stride)),
        );
    }
    write_results(&records, out)?;
    if let Some(path) = scatter {
        write_text(path, &format_scatter(&pairs))?;
    }
    println!("decoded {} images, {} poses -> {}", maps.len(), records.len(), out.display());
    Ok(0)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
}

fn eval_cmd(annotations: &Path, results: &Path, out: Option<&Path>, stride: f64) -> Result<i32> {
    let ds = load_annotations(annotations, stride)?;
    let dets = read_results(results)?
        .iter()
        .map(|r| {
            if r.keypoints.len() != 3 * ds.category.num_keypoints() {
                return Err(Error::KeypointCountMismatch {
                    expected: ds.category.num_keypoints(),
                    actual: r.keypoints.len() / 3,
                });
            }
            r.to_detection(stride)
        })
        .collect::<Result<Vec<_>>>()?;
    let result = summarize(&dets, &ds.annotations, &EvalParams::new(ds.category.falloff.clone(), stride))?;
    if let Some(path) = out {
        write_text(path, &format_report(&result))?;
    }
    println!(
        "AP {} AP50 {} AP75 {} APm {} APl {} AR {}",
        fmt_metric(result.ap),
        fmt_metric(result.ap50),
        fmt_metric(result.ap75),
        fmt_metric(result.ap_m),
        fmt_metric(result.ap_l),
        fmt_metric(result.ar)
    );
    Ok(0)
}

fn gradcheck(cfg: &TrainConfig, eps: f64, count: usize) -> Result<i32> {
    cfg.validate()?;
    let trainer = Trainer::new(cfg.clone())?;
    let scene = random_scene(cfg.train_scene_seed(0), &cfg.geometry(), &cfg.scene_spec())?;
    let report = finite_diff_check(&trainer.model, &scene, eps, count, cfg.seed, cfg, &trainer.falloff)?;
    println!(
        "max relative error {:.3e} over {} parameters ({} skipped at sampling-cell boundaries)",
        report.max_relative_error, report.checked, report.skipped
    );
    Ok(if report.max_relative_error > GRADCHECK_TOLERANCE {
        1
    } else {
        0
    })
}

fn train_toy(
    cfg: &TrainConfig,
    log_every: usize,
    num_eval: usize,
    checkpoint: Option<&Path>,
) -> Result<i32> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let history = trainer.run(|r| {
        if log_every > 0 && (r.step == 1 || r.step % log_every == 0) {
            println!(
                "step {} loss {:.6} score {:.6} offset {:.6}",
                r.step, r.loss, r.score_loss, r.offset_loss
            );
        }
    })?;
    if let Some(last) = history.last() {
        println!("final loss {:.6}", last.loss);
    }
    if num_eval > 0 {
        let scenes = eval_scenes(cfg, num_eval)?;
        let result = evaluate_model(&trainer.model, &scenes, &DecodeParams::default(), &trainer.falloff)?;
        println!(
            "toy AP {} AP50 {} AR {}",
            fmt_metric(result.ap),
            fmt_metric(result.ap50),
            fmt_metric(result.ar)
        );
    }
    if let Some(path) = checkpoint {
        save_checkpoint(&trainer.model, path)?;
    }
    Ok(0)
}

fn bench(iterations: usize, side: usize) -> Result<i32> {
    let cfg = TrainConfig {
        grid: (side, side),
        ..TrainConfig::default()
    };
    let kc = cfg.falloff();
    let scenes: Vec<_> = (0..iterations.max(1) as u64)
        .map(|s| random_scene(s, &cfg.geometry(), &cfg.scene_spec()))
        .collect::<Result<_>>()?;

    let timed = |name: &str, mut f: Box<dyn FnMut(usize) -> Result<()> + '_>| -> Result<()> {
        let start = Instant::now();
        for i in 0..scenes.len() {
            f(i)?;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        println!("{name}: {:.1} ops/sec", scenes.len() as f64 / secs);
        Ok(())
    };

    let mut encoded = Vec::new();
    timed(
        "codec",
        Box::new(|i| {
            let s = &scenes[i];
            let a = assign_regions(&s.annotations, &s.geom, cfg.gamma)?;
            let _ = build_weight_map(&a);
            let t = build_offset_target(&s.annotations, &a, cfg.num_keypoints)?;
            let score = build_cir_target(|y, x| pose_at(&t.offsets, y, x, 1.0), &s.annotations, &a, &kc)?;
            encoded.push((score, t.offsets));
            Ok(())
        }),
    )?;
    let mut decoded = Vec::new();
    timed(
        "decoder",
        Box::new(|i| {
            let (score, offsets) = &encoded[i];
            decoded.push(decode(score, offsets, &DecodeParams::default(), &kc)?);
            Ok(())
        }),
    )?;
    let gts: BTreeMap<u64, _> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (i as u64, s.annotations.clone()))
        .collect();
    let dets: Vec<_> = decoded
        .iter()
        .enumerate()
        .flat_map(|(i, cs)| {
            cs.iter().map(move |c| crate::eval::Detection {
                image_id: i as u64,
                pose: c.pose.clone(),
            })
        })
        .collect();
    let params = EvalParams::new(kc.clone(), GridGeometry::DEFAULT_STRIDE);
    let start = Instant::now();
    let result = summarize(&dets, &gts, &params)?;
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    println!("evaluator: {:.1} images/sec (AP {})", scenes.len() as f64 / secs, fmt_metric(result.ap));
    Ok(0)
}
