//! Geometric core for weakly supervised dense canonicalization of objects.
//!
//! The crate covers view-synthesis losses over depth and NOCS maps,
//! keypoint-guided canonicalization into the normalized object coordinate
//! space, a synthetic ground-truth renderer, a per-pixel optimization
//! harness standing in for network training, and the evaluation metrics
//! (Chamfer, map L1, pose mAP, canonicalization dispersion).

pub mod camera;
pub mod canon;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fit;
pub mod grid;
pub mod io;
pub mod losses;
pub mod spatial;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
