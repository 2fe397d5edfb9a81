//! Flat parameter checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, five `u32` model
//! dimensions (keypoints, width, keypoint channels, instance channels,
//! semantic points), `u64` parameter count, then the parameters as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{ModelConfig, TinyModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CIRPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &TinyModel, out: &mut impl Write) -> std::io::Result<()> {
    let c = &model.config;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for d in [
        c.num_keypoints,
        c.width,
        c.keypoint_channels,
        c.instance_channels,
        c.n_semantic,
    ] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let params = model.flat_params();
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<TinyModel> {
    let ctx = "checkpoint";
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::parse(ctx, e.to_string()))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::parse(ctx, format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(ctx, "bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(ctx, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32_at(take(4)?) as usize;
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let config = ModelConfig {
        num_keypoints: dims[0],
        width: dims[1],
        keypoint_channels: dims[2],
        instance_channels: dims[3],
        n_semantic: dims[4],
    };
    let mut model = TinyModel::new(config, 0);
    if count != model.num_params() {
        return Err(Error::parse(
            ctx,
            format!("expected {} parameters, header says {count}", model.num_params()),
        ));
    }
    let params: Vec<f64> = (0..count)
        .map(|_| take(8).map(|s| f64::from_le_bytes(s.try_into().expect("8 bytes"))))
        .collect::<Result<_>>()?;
    model.load_flat_params(&params)?;
    Ok(model)
}

pub fn save_checkpoint(model: &TinyModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, &mut f).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TinyModel> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}
