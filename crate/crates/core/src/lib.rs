//! Single-stage multi-person pose regression with quality-aware instance
//! scores.
//!
//! The crate covers target construction ([`codec`]), the OKS metric
//! ([`oks`]), differentiable query-encoding operators ([`qem`]), losses,
//! a desk-scale trainer, inference decoding with OKS-NMS ([`decoder`]),
//! COCO-style evaluation ([`eval`]) and file formats plus the CLI ([`io`],
//! [`cli`]).

pub mod cli;
pub mod codec;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod losses;
pub mod oks;
pub mod qem;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use grid::{FeatureGrid, OffsetField, ScoreMap};
pub use types::{
    FalloffConstants, GridGeometry, InstanceAnnotation, Keypoint, Point2, Pose, Visibility,
};
