//! File formats: COCO-style annotation JSON, result records, the binary
//! tensor container, key/value configs, evaluation reports and CSV dumps.
//!
//! Every writer formats floats with six decimals and iterates in a stable
//! order so repeated runs produce byte-identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::decoder::Candidate;
use crate::error::{Error, Result};
use crate::eval::{oks_thresholds, Detection, EvalResult};
use crate::types::{
    FalloffConstants, GridGeometry, InstanceAnnotation, Keypoint, Point2, Pose, Visibility,
    COCO_KEYPOINT_NAMES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageInfo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: u64,
    pub keypoint_names: Vec<String>,
    pub falloff: FalloffConstants,
}

impl Category {
    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }
}

/// Parsed ground truth with keypoints already in grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub annotations: BTreeMap<u64, Vec<InstanceAnnotation>>,
    pub category: Category,
    pub stride: f64,
}

impl Dataset {
    /// Output grid covering an image at the dataset stride.
    pub fn geometry(&self, image: &ImageInfo) -> Result<GridGeometry> {
        let cells = |px: usize| ((px as f64 / self.stride).ceil() as usize).max(1);
        GridGeometry::new(cells(image.height), cells(image.width), self.stride)
    }

    pub fn num_instances(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }
}

/// Falloff used when a category does not carry its own constants.
pub fn default_falloff(num_keypoints: usize) -> FalloffConstants {
    crate::trainer::toy_falloff(num_keypoints)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn field<'a>(obj: &'a Value, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::MissingField(format!("{ctx}.{name}")))
}

fn as_u64(v: &Value, ctx: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::parse(ctx, format!("expected a non-negative integer, got {v}")))
}

fn as_f64(v: &Value, ctx: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::parse(ctx, format!("expected a number, got {v}")))
}

fn as_array<'a>(v: &'a Value, ctx: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::parse(ctx, "expected an array"))
}

fn parse_category(doc: &Value) -> Result<Category> {
    let cats = as_array(field(doc, "categories", "$")?, "categories")?;
    let cat = cats
        .first()
        .ok_or_else(|| Error::parse("categories", "no category defined"))?;
    let id = as_u64(field(cat, "id", "categories[0]")?, "categories[0].id")?;
    let names = as_array(field(cat, "keypoints", "categories[0]")?, "categories[0].keypoints")?
        .iter()
        .enumerate()
        .map(|(i, n)| {
            n.as_str()
                .map(str::to_owned)
                .ok_or_else(|| Error::parse(format!("categories[0].keypoints[{i}]"), "expected a string"))
        })
        .collect::<Result<Vec<_>>>()?;
    if names.is_empty() {
        return Err(Error::parse("categories[0].keypoints", "no keypoints defined"));
    }
    let falloff = match cat.get("falloff") {
        Some(v) => {
            let k = as_array(v, "categories[0].falloff")?
                .iter()
                .enumerate()
                .map(|(i, x)| as_f64(x, &format!("categories[0].falloff[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            if k.len() != names.len() {
                return Err(Error::parse(
                    "categories[0].falloff",
                    format!("{} constants for {} keypoints", k.len(), names.len()),
                ));
            }
            FalloffConstants::new(k)?
        }
        None if names.len() == COCO_KEYPOINT_NAMES.len() => FalloffConstants::coco(),
        None => default_falloff(names.len()),
    };
    Ok(Category {
        id,
        keypoint_names: names,
        falloff,
    })
}

/// Reads a COCO-keypoint-style document. Crowd annotations and annotations
/// without any labeled keypoint are skipped; both are unsupported by the
/// evaluator.
pub fn load_annotations(path: &Path, stride: f64) -> Result<Dataset> {
    let text = read_text(path)?;
    parse_annotations(&text, stride)
}

pub fn parse_annotations(text: &str, stride: f64) -> Result<Dataset> {
    if !(stride >= 1.0) {
        return Err(Error::InvalidConfig(format!("stride must be >= 1, got {stride}")));
    }
    let doc: Value = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let category = parse_category(&doc)?;
    let k = category.num_keypoints();

    let mut images = Vec::new();
    let mut annotations: BTreeMap<u64, Vec<InstanceAnnotation>> = BTreeMap::new();
    for (i, img) in as_array(field(&doc, "images", "$")?, "images")?.iter().enumerate() {
        let ctx = format!("images[{i}]");
        let id = as_u64(field(img, "id", &ctx)?, &format!("{ctx}.id"))?;
        let width = as_u64(field(img, "width", &ctx)?, &format!("{ctx}.width"))? as usize;
        let height = as_u64(field(img, "height", &ctx)?, &format!("{ctx}.height"))? as usize;
        if annotations.insert(id, Vec::new()).is_some() {
            return Err(Error::parse(format!("{ctx}.id"), format!("duplicate image id {id}")));
        }
        images.push(ImageInfo { id, width, height });
    }

    let scale = GridGeometry::new(1, 1, stride)?;
    for (i, ann) in as_array(field(&doc, "annotations", "$")?, "annotations")?
        .iter()
        .enumerate()
    {
        let ctx = format!("annotations[{i}]");
        let image_id = as_u64(field(ann, "image_id", &ctx)?, &format!("{ctx}.image_id"))?;
        let flat = as_array(field(ann, "keypoints", &ctx)?, &format!("{ctx}.keypoints"))?;
        let area = as_f64(field(ann, "area", &ctx)?, &format!("{ctx}.area"))?;
        let bucket = annotations.get_mut(&image_id).ok_or_else(|| {
            Error::parse(format!("{ctx}.image_id"), format!("unknown image id {image_id}"))
        })?;
        if flat.len() % 3 != 0 {
            return Err(Error::parse(
                format!("{ctx}.keypoints"),
                format!("{} numbers is not a list of (x, y, v) triples", flat.len()),
            ));
        }
        if flat.len() != 3 * k {
            return Err(Error::InconsistentK {
                annotation_id: ann.get("id").and_then(Value::as_u64).unwrap_or(i as u64),
                expected: k,
                actual: flat.len() / 3,
            });
        }
        if ann.get("iscrowd").and_then(Value::as_u64).unwrap_or(0) != 0 {
            continue;
        }
        let mut keypoints = Vec::with_capacity(k);
        for (j, t) in flat.chunks(3).enumerate() {
            let kctx = format!("{ctx}.keypoints[{}]", 3 * j);
            let x = as_f64(&t[0], &kctx)?;
            let y = as_f64(&t[1], &kctx)?;
            let flag = as_u64(&t[2], &kctx)?;
            let v = u8::try_from(flag)
                .ok()
                .and_then(Visibility::from_flag)
                .ok_or_else(|| Error::parse(&kctx, format!("visibility flag {flag} not in 0..=2")))?;
            let p = scale.to_grid(Point2::new(x, y));
            keypoints.push(match v {
                Visibility::NotLabeled => Keypoint::unlabeled(),
                _ => Keypoint::new(p.x, p.y, v),
            });
        }
        if !keypoints.iter().any(|kp| kp.visibility.is_labeled()) {
            continue;
        }
        bucket.push(InstanceAnnotation::from_keypoints(keypoints, area, &scale)?);
    }
    Ok(Dataset {
        images,
        annotations,
        category,
        stride,
    })
}

/// One prediction in the interchange format; keypoints in image pixels.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl ResultRecord {
    pub fn from_candidate(image_id: u64, category_id: u64, c: &Candidate, stride: f64) -> Self {
        let keypoints = c
            .pose
            .keypoints
            .iter()
            .flat_map(|kp| [kp.x * stride, kp.y * stride, 1.0])
            .collect();
        Self {
            image_id,
            category_id,
            keypoints,
            score: c.score,
        }
    }

    /// Converts back to a grid-unit detection. Every keypoint counts as
    /// visible, matching how predictions are written.
    pub fn to_detection(&self, stride: f64) -> Result<Detection> {
        if self.keypoints.len() % 3 != 0 {
            return Err(Error::parse(
                format!("result for image {}", self.image_id),
                format!("{} keypoint numbers is not a multiple of 3", self.keypoints.len()),
            ));
        }
        let keypoints = self
            .keypoints
            .chunks(3)
            .map(|t| Keypoint::visible(t[0] / stride, t[1] / stride))
            .collect();
        Ok(Detection {
            image_id: self.image_id,
            pose: Pose::new(keypoints, self.score),
        })
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Serializes records with one record per line and fixed field order.
pub fn format_results(records: &[ResultRecord]) -> String {
    if records.is_empty() {
        return "[]\n".to_owned();
    }
    let mut out = String::from("[\n");
    for (i, r) in records.iter().enumerate() {
        let kps: Vec<String> = r
            .keypoints
            .chunks(3)
            .flat_map(|t| {
                let mut v = vec![fmt6(t[0])];
                v.extend(t.get(1).map(|y| fmt6(*y)));
                // Visibility flags are integers in the interchange format.
                v.extend(t.get(2).map(|f| format!("{}", f.round() as i64)));
                v
            })
            .collect();
        let _ = write!(
            out,
            "  {{\"image_id\": {}, \"category_id\": {}, \"keypoints\": [{}], \"score\": {}}}",
            r.image_id,
            r.category_id,
            kps.join(", "),
            fmt6(r.score)
        );
        out.push_str(if i + 1 == records.len() { "\n" } else { ",\n" });
    }
    out.push_str("]\n");
    out
}

pub fn write_results(records: &[ResultRecord], path: &Path) -> Result<()> {
    fs::write(path, format_results(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    parse_results(&read_text(path)?)
}

const TENSOR_MAGIC: &[u8; 8] = b"CIRPTNSR";
const TENSOR_VERSION: u32 = 1;
/// dtype tag for little-endian IEEE-754 binary32.
const DTYPE_F32_LE: u32 = 1;

/// A named row-major tensor stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_f64(name: impl Into<String>, dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(name, dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Layout: magic, version, dtype, tensor count, then per tensor the name
/// length and UTF-8 bytes, rank, `u64` dims and the payload. Integers are
/// little-endian.
pub fn write_tensors(tensors: &[Tensor], out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&DTYPE_F32_LE.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.name.len() as u32).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(input: &mut impl Read, ctx: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::parse(ctx, e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read, ctx: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::parse(ctx, e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors(input: &mut impl Read) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::parse("tensor header", e.to_string()))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::parse("tensor header", "bad magic"));
    }
    let version = read_u32(input, "tensor version")?;
    if version != TENSOR_VERSION {
        return Err(Error::parse("tensor header", format!("unsupported version {version}")));
    }
    let dtype = read_u32(input, "tensor dtype")?;
    if dtype != DTYPE_F32_LE {
        return Err(Error::parse("tensor header", format!("unsupported dtype {dtype}")));
    }
    let count = read_u32(input, "tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let ctx = format!("tensor {i}");
        let len = read_u32(input, &ctx)? as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::parse(&ctx, e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| Error::parse(&ctx, e.to_string()))?;
        let rank = read_u32(input, &ctx)?;
        let dims = (0..rank)
            .map(|_| read_u64(input, &ctx).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input
            .read_exact(&mut bytes)
            .map_err(|e| Error::parse(&ctx, e.to_string()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    Ok(tensors)
}

pub fn save_tensors(tensors: &[Tensor], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(tensors, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensors(&mut bytes.as_slice())
}

pub const CONFIG_VERSION: u32 = 1;

/// Flat `key = value` document; `#` starts a comment. A `version` key is
/// required.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = format!("config line {}", n + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&ctx, "expected key = value"))?;
            let key = key.trim().to_owned();
            if entries.insert(key.clone(), value.trim().to_owned()).is_some() {
                return Err(Error::parse(&ctx, format!("duplicate key {key}")));
            }
        }
        let cfg = Self { entries };
        let version: u32 = cfg
            .get("version")?
            .ok_or_else(|| Error::MissingField("version".into()))?;
        if version != CONFIG_VERSION {
            return Err(Error::parse("config", format!("unsupported version {version}")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::parse(format!("config key {key}"), format!("{v:?}: {e}")))
            })
            .transpose()
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        let known: BTreeSet<&str> = known.iter().copied().collect();
        match self.keys().find(|k| *k != "version" && !known.contains(k)) {
            Some(k) => Err(Error::InvalidConfig(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }
}

pub const REPORT_VERSION: u32 = 1;

fn opt6(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_else(|| "null".to_owned())
}

/// JSON report with the summary metrics and per-threshold AP.
pub fn format_report(result: &EvalResult) -> String {
    let mut out = String::from("{\n");
    let _ = writeln!(out, "  \"version\": {REPORT_VERSION},");
    for (name, v) in [
        ("ap", result.ap),
        ("ap50", result.ap50),
        ("ap75", result.ap75),
        ("ap_m", result.ap_m),
        ("ap_l", result.ap_l),
        ("ar", result.ar),
    ] {
        let _ = writeln!(out, "  \"{name}\": {},", opt6(v));
    }
    let rows: Vec<String> = oks_thresholds()
        .into_iter()
        .map(|t| {
            let curve = result.curves.iter().find(|c| (c.threshold - t).abs() < 1e-12);
            format!(
                "    {{\"threshold\": {}, \"ap\": {}, \"recall\": {}}}",
                fmt6(t),
                opt6(curve.map(|c| c.ap)),
                opt6(curve.map(|c| c.recall))
            )
        })
        .collect();
    let _ = write!(out, "  \"per_threshold\": [\n{}\n  ]\n}}\n", rows.join(",\n"));
    out
}

pub fn write_report(result: &EvalResult, path: &Path) -> Result<()> {
    fs::write(path, format_report(result)).map_err(|e| Error::io(path, e))
}

/// `score,oks` rows, one per kept candidate.
pub fn format_scatter(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("score,oks\n");
    for (s, q) in pairs {
        let _ = writeln!(out, "{},{}", fmt6(*s), fmt6(*q));
    }
    out
}
