//! Evaluation metrics: two-way Chamfer, NOCS map L1, pose estimation from
//! NOCS maps, precision curves and heatmaps, and keypoint dispersion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{rotation_angle_deg, Intrinsics, PointCloud, SimilarityTransform, Vec3};
use crate::canon::{masked_points, umeyama_points};
use crate::error::{Error, Result};
use crate::grid::FloatGrid;
use crate::spatial::NearestNeighborGrid;

/// Mean squared nearest-neighbour distance from `a` to `b` plus the same
/// from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(one_way(&a.points, &b.points) + one_way(&b.points, &a.points))
}

fn one_way(from: &[Vec3], to: &[Vec3]) -> f64 {
    let index = NearestNeighborGrid::new(to);
    let d: Vec<f64> = from.par_iter().map(|p| index.nearest(p).1).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Masked mean absolute difference over all channels.
pub fn nocs_map_l1(predicted: &FloatGrid, truth: &FloatGrid, mask: &FloatGrid) -> Result<f64> {
    predicted.ensure_same_shape(truth, "nocs_map_l1")?;
    predicted
        .zip_map(truth, |a, b| (a - b).abs())?
        .masked_mean(mask)
}

/// Canonical-to-camera similarity estimated from a NOCS map, with errors
/// against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub transform: SimilarityTransform,
    /// Degrees, in `[0, 180]`.
    pub rotation_error: f64,
    /// Scene units.
    pub translation_error: f64,
    /// `|s_pred / s_gt − 1|`.
    pub scale_error: f64,
}

impl PoseEstimate {
    pub fn against(transform: SimilarityTransform, gt: &SimilarityTransform) -> Self {
        Self {
            transform,
            rotation_error: rotation_angle_deg(&transform.rotation, &gt.rotation),
            translation_error: (transform.translation - gt.translation).norm(),
            scale_error: (transform.scale / gt.scale - 1.0).abs(),
        }
    }
}

/// Aligns the NOCS coordinates of masked pixels to their backprojected
/// camera-frame points. `gt` is the true canonical-to-camera transform.
pub fn estimate_pose(
    nocs_map: &FloatGrid,
    depth: &FloatGrid,
    mask: &FloatGrid,
    k: &Intrinsics,
    gt: &SimilarityTransform,
) -> Result<PoseEstimate> {
    if nocs_map.channels() != 3 || !nocs_map.same_extent(depth) {
        return Err(Error::ShapeMismatch(
            "estimate_pose: NOCS map must be 3-channel and match depth".into(),
        ));
    }
    let pts = masked_points(depth, mask, k)?;
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!("{} masked pixels", pts.len())));
    }
    let src: Vec<Vec3> = pts
        .iter()
        .map(|&((i, j), _)| Vec3::from_column_slice(nocs_map.pixel(i, j)))
        .collect();
    let dst: Vec<Vec3> = pts.iter().map(|p| p.1).collect();
    Ok(PoseEstimate::against(umeyama_points(&src, &dst, true)?, gt))
}

/// Fraction of estimates under each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
}

impl APCurve {
    pub fn is_monotone(&self) -> bool {
        self.precision.windows(2).all(|w| w[0] <= w[1])
    }

    /// Precision at an exact threshold value, if present.
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == round_threshold(threshold))
            .map(|i| self.precision[i])
    }
}

/// Joint precision over (rotation, translation) thresholds.
/// `values[r][t]` pairs `rot_thresholds[r]` with `trans_thresholds[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseHeatmap {
    pub rot_thresholds: Vec<f64>,
    pub trans_thresholds: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PoseHeatmap {
    pub fn at(&self, rot: f64, trans: f64) -> Option<f64> {
        let r = self
            .rot_thresholds
            .iter()
            .position(|&t| t == round_threshold(rot))?;
        let t = self
            .trans_thresholds
            .iter()
            .position(|&t| t == round_threshold(trans))?;
        Some(self.values[r][t])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseCurves {
    pub rotation: APCurve,
    pub translation: APCurve,
    pub heatmap: PoseHeatmap,
}

/// Thresholds are compared after rounding to 12 decimals so that grids
/// built by repeated addition hit values like 0.15 exactly.
pub fn round_threshold(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

fn threshold_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (0..=n).map(|i| round_threshold(i as f64 * step)).collect()
}

/// Rotation thresholds 0–60° in 5° steps.
pub fn default_rotation_thresholds() -> Vec<f64> {
    threshold_grid(60.0, 5.0)
}

/// Translation thresholds 0–0.25 scene units in 0.025 steps.
pub fn default_translation_thresholds() -> Vec<f64> {
    threshold_grid(0.25, 0.025)
}

fn normalized(thresholds: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = thresholds.iter().copied().map(round_threshold).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Rotation and translation precision curves plus their joint heatmap.
/// Fails if the curves come out non-monotone or the heatmap exceeds a
/// marginal, which would indicate a counting bug.
pub fn map_curves(
    estimates: &[PoseEstimate],
    rot_thresholds: &[f64],
    trans_thresholds: &[f64],
) -> Result<PoseCurves> {
    if estimates.is_empty() {
        return Err(Error::InsufficientInstances { needed: 1, have: 0 });
    }
    let n = estimates.len() as f64;
    let rt = normalized(rot_thresholds);
    let tt = normalized(trans_thresholds);
    let frac =
        |f: &dyn Fn(&PoseEstimate) -> bool| estimates.iter().filter(|e| f(e)).count() as f64 / n;
    let rotation = APCurve {
        precision: rt
            .iter()
            .map(|&t| frac(&|e| e.rotation_error <= t))
            .collect(),
        thresholds: rt.clone(),
    };
    let translation = APCurve {
        precision: tt
            .iter()
            .map(|&t| frac(&|e| e.translation_error <= t))
            .collect(),
        thresholds: tt.clone(),
    };
    let values: Vec<Vec<f64>> = rt
        .iter()
        .map(|&r| {
            tt.iter()
                .map(|&t| frac(&|e| e.rotation_error <= r && e.translation_error <= t))
                .collect()
        })
        .collect();
    if !rotation.is_monotone() || !translation.is_monotone() {
        return Err(Error::InvalidArgument(
            "precision curve is not monotone".into(),
        ));
    }
    for (r, row) in values.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            if v > rotation.precision[r] || v > translation.precision[t] {
                return Err(Error::InvalidArgument(
                    "heatmap exceeds a marginal curve".into(),
                ));
            }
        }
    }
    Ok(PoseCurves {
        rotation,
        translation,
        heatmap: PoseHeatmap {
            rot_thresholds: rt,
            trans_thresholds: tt,
            values,
        },
    })
}

pub const DISPERSION_BINS: usize = 32;
pub const MIN_DISPERSION_INSTANCES: usize = 10;

/// One instance's keypoints in its observed frame and its estimated
/// camera-to-canonical transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionInstance {
    pub keypoints: Vec<Vec3>,
    pub t_cano: SimilarityTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub keypoint: usize,
    /// `[axis][bin]` counts over `[0, 1]`.
    pub histograms_pre: [Vec<usize>; 3],
    pub histograms_post: [Vec<usize>; 3],
    /// Shannon entropy in bits per axis.
    pub entropy_pre: [f64; 3],
    pub entropy_post: [f64; 3],
}

/// Spread of one keypoint across instances before and after applying each
/// instance's `t_cano`. Observed positions already inside the unit cube are
/// binned as-is; otherwise each axis is min-max normalized over the pooled
/// instances first.
pub fn keypoint_dispersion(
    instances: &[DispersionInstance],
    keypoint: usize,
) -> Result<DispersionReport> {
    if instances.len() < MIN_DISPERSION_INSTANCES {
        return Err(Error::InsufficientInstances {
            needed: MIN_DISPERSION_INSTANCES,
            have: instances.len(),
        });
    }
    let pre: Vec<Vec3> = instances
        .iter()
        .map(|inst| {
            inst.keypoints
                .get(keypoint)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("keypoint {keypoint} out of range")))
        })
        .collect::<Result<_>>()?;
    let post: Vec<Vec3> = pre
        .iter()
        .zip(instances)
        .map(|(p, inst)| inst.t_cano.apply(p))
        .collect();

    let in_cube = |x: &f64| (0.0..=1.0).contains(x);
    let pre_norm: Vec<Vec3> = if pre.iter().all(|p| p.iter().all(in_cube)) {
        pre
    } else {
        let lo = pre
            .iter()
            .fold(Vec3::repeat(f64::INFINITY), |m, p| m.inf(p));
        let hi = pre
            .iter()
            .fold(Vec3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
        pre.iter()
            .map(|p| {
                Vec3::from_fn(|a, _| {
                    let span = hi[a] - lo[a];
                    if span > 0.0 {
                        (p[a] - lo[a]) / span
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    };
    let histograms_pre = [0, 1, 2].map(|a| histogram(pre_norm.iter().map(|p| p[a])));
    let histograms_post = [0, 1, 2].map(|a| histogram(post.iter().map(|p| p[a])));
    Ok(DispersionReport {
        keypoint,
        entropy_pre: [0, 1, 2].map(|a| entropy(&histograms_pre[a])),
        entropy_post: [0, 1, 2].map(|a| entropy(&histograms_post[a])),
        histograms_pre,
        histograms_post,
    })
}

/// Counts over [`DISPERSION_BINS`] equal bins of `[0, 1]`; values outside
/// fall into the end bins.
pub fn histogram(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut h = vec![0; DISPERSION_BINS];
    for x in values {
        let b = (x.clamp(0.0, 1.0) * DISPERSION_BINS as f64).floor() as usize;
        h[b.min(DISPERSION_BINS - 1)] += 1;
    }
    h
}

/// Shannon entropy (bits) of a count histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}
