//! Inverse perspective warp: resamples a source view into the target pixel
//! grid using the target depth and the target→source relative pose.

use rayon::prelude::*;

use crate::camera::{Intrinsics, RigidTransform, Vec3, BEHIND_CAMERA_EPS};
use crate::error::{Error, Result};
use crate::grid::{BilinearTaps, FloatGrid, GridPoint};

/// Reprojected coordinates within this distance of a pixel centre are
/// snapped onto it, so zero-motion warps reproduce the source exactly.
pub const SNAP_EPS: f64 = 1e-9;

#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP_EPS {
        r
    } else {
        x
    }
}

/// Where a target pixel lands in the source camera.
#[derive(Debug, Clone, Copy)]
pub struct Reprojection {
    pub point: GridPoint,
    /// Point in source-camera coordinates.
    pub source_point: Vec3,
    /// `(∂u'/∂d, ∂v'/∂d)` with respect to the target depth.
    pub d_point_d_depth: [f64; 2],
}

/// Maps target pixel `p` with depth `depth` into the source image.
/// Returns `None` when the depth is not positive or the point falls behind
/// the source camera.
#[inline]
pub fn reproject(
    p: GridPoint,
    depth: f64,
    k: &Intrinsics,
    t_rel: &RigidTransform,
) -> Option<Reprojection> {
    if !(depth > 0.0) {
        return None;
    }
    let ray = k.ray(p);
    let x = t_rel.rotation * (ray * depth) + t_rel.translation;
    if x.z <= BEHIND_CAMERA_EPS {
        return None;
    }
    let inv_z = 1.0 / x.z;
    let u = snap(k.fx * x.x * inv_z + k.cx);
    let v = snap(k.fy * x.y * inv_z + k.cy);
    let dx = t_rel.rotation * ray;
    let du = k.fx * (dx.x * inv_z - x.x * dx.z * inv_z * inv_z);
    let dv = k.fy * (dx.y * inv_z - x.y * dx.z * inv_z * inv_z);
    Some(Reprojection {
        point: GridPoint::new(u, v),
        source_point: x,
        d_point_d_depth: [du, dv],
    })
}

/// Synthesized target view plus the per-pixel validity of the resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub synthesized: FloatGrid,
    pub validity: FloatGrid,
}

impl WarpResult {
    /// Wraps an already-aligned grid as a fully valid warp.
    pub fn aligned(grid: FloatGrid) -> Self {
        let validity = FloatGrid::filled(grid.height(), grid.width(), 1, 1.0);
        Self {
            synthesized: grid,
            validity,
        }
    }
}

/// Relative depth disagreement beyond which a source tap counts as occluded.
pub const OCCLUSION_TOL: f64 = 0.02;

/// Source-side restrictions on which samples are valid.
#[derive(Debug, Clone, Copy, Default)]
pub struct SourceSupport<'a> {
    /// Source foreground; taps outside it are invalid.
    pub mask: Option<&'a FloatGrid>,
    /// Source depth; taps whose depth differs from the reprojected depth by
    /// more than [`OCCLUSION_TOL`] (relative) see a different surface.
    pub depth: Option<&'a FloatGrid>,
}

impl<'a> SourceSupport<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn mask(mask: &'a FloatGrid) -> Self {
        Self {
            mask: Some(mask),
            depth: None,
        }
    }

    /// Foreground mask plus occlusion test against the source depth.
    pub fn visible(mask: &'a FloatGrid, depth: &'a FloatGrid) -> Self {
        Self {
            mask: Some(mask),
            depth: Some(depth),
        }
    }
}

/// True if every tap with non-zero weight lies on supported, unoccluded
/// source pixels. `z` is the reprojected source-camera depth.
#[inline]
pub(crate) fn taps_supported(taps: &BilinearTaps, support: SourceSupport, z: f64) -> bool {
    let w = taps.weights();
    taps.pixels().iter().zip(w).all(|(&(r, c), w)| {
        w == 0.0
            || (support.mask.is_none_or(|m| m.at(r, c) != 0.0)
                && support
                    .depth
                    .is_none_or(|d| (d.at(r, c) - z).abs() <= OCCLUSION_TOL * z))
    })
}

/// Per-pixel lookup used by both the warp and the gradient code.
#[inline]
pub(crate) fn warp_taps(
    source: &FloatGrid,
    support: SourceSupport,
    row: usize,
    col: usize,
    depth: f64,
    k: &Intrinsics,
    t_rel: &RigidTransform,
) -> Option<(BilinearTaps, Reprojection)> {
    let rp = reproject(GridPoint::new(col as f64, row as f64), depth, k, t_rel)?;
    let taps = source.bilinear_taps(rp.point);
    if !taps.in_bounds || !taps_supported(&taps, support, rp.source_point.z) {
        return None;
    }
    Some((taps, rp))
}

fn check_inputs(
    source: &FloatGrid,
    support: SourceSupport,
    target_depth: &FloatGrid,
) -> Result<()> {
    if target_depth.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "target depth must be single-channel, got {}",
            target_depth.channels()
        )));
    }
    if !source.same_extent(target_depth) {
        return Err(Error::ShapeMismatch(format!(
            "source {}x{} vs target depth {}x{}",
            source.height(),
            source.width(),
            target_depth.height(),
            target_depth.width()
        )));
    }
    if let Some(s) = support.mask {
        source.ensure_mask_for(s, "warp support mask")?;
    }
    if let Some(d) = support.depth {
        source.ensure_mask_for(d, "warp support depth")?;
    }
    Ok(())
}

/// Synthesizes the target view from `source`.
///
/// For each target pixel with depth `d`: backproject, move into the source
/// camera with `t_rel`, project, and sample bilinearly. Pixels whose
/// reprojection leaves the source image or falls behind the camera get
/// validity 0 and a zero sample.
pub fn inverse_warp(
    source: &FloatGrid,
    target_depth: &FloatGrid,
    k: &Intrinsics,
    t_rel: &RigidTransform,
) -> Result<WarpResult> {
    inverse_warp_supported(source, SourceSupport::none(), target_depth, k, t_rel)
}

/// Like [`inverse_warp`], but samples touching a source pixel outside the
/// support mask, or one showing a surface at a different depth, are also
/// invalid.
pub fn inverse_warp_supported(
    source: &FloatGrid,
    source_support: SourceSupport,
    target_depth: &FloatGrid,
    k: &Intrinsics,
    t_rel: &RigidTransform,
) -> Result<WarpResult> {
    check_inputs(source, source_support, target_depth)?;
    let (h, w, c) = (source.height(), source.width(), source.channels());
    let mut synthesized = FloatGrid::zeros(h, w, c);
    let mut validity = FloatGrid::zeros(h, w, 1);
    synthesized
        .data_mut()
        .par_chunks_mut(w * c)
        .zip(validity.data_mut().par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (out_row, valid_row))| {
            for col in 0..w {
                let d = target_depth.at(row, col);
                if let Some((taps, _)) = warp_taps(source, source_support, row, col, d, k, t_rel) {
                    source.sample_taps_into(&taps, &mut out_row[col * c..(col + 1) * c]);
                    valid_row[col] = 1.0;
                }
            }
        });
    Ok(WarpResult {
        synthesized,
        validity,
    })
}
