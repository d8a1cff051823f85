//! Keypoint-guided canonicalization: similarity alignment, recovery of the
//! camera-to-canonical transform from sparse keypoints, densification of
//! depth into NOCS maps, and dataset-level frame alignment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{backproject, Intrinsics, Mat3, PointCloud, SimilarityTransform, Vec3};
use crate::error::{Error, Result};
use crate::eval::chamfer;
use crate::grid::{FloatGrid, GridPoint};
use crate::spatial::NearestNeighborGrid;

/// Minimum number of visible keypoints for sparse canonicalization.
pub const MIN_KEYPOINTS: usize = 4;

/// Closed-form least-squares similarity `x ↦ sRx + t` taking `source` onto
/// the index-aligned `target`.
pub fn umeyama(
    source: &PointCloud,
    target: &PointCloud,
    with_scale: bool,
) -> Result<SimilarityTransform> {
    umeyama_points(&source.points, &target.points, with_scale)
}

pub fn umeyama_points(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "umeyama: {} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "umeyama needs 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mu_x = src.iter().sum::<Vec3>() / nf;
    let mu_y = dst.iter().sum::<Vec3>() / nf;
    let mut var_x = 0.0;
    let mut cov = Mat3::zeros();
    for (x, y) in src.iter().zip(dst) {
        let dx = x - mu_x;
        var_x += dx.norm_squared();
        cov += (y - mu_y) * dx.transpose();
    }
    var_x /= nf;
    cov /= nf;
    if !(var_x > 0.0) || !cov.iter().all(|c| c.is_finite()) {
        return Err(Error::Degenerate("source points coincide".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let (s0, s1) = (sv[order[0]], sv[order[1]]);
    if !(s0 > 0.0) || s1 <= 1e-12 * s0 {
        return Err(Error::Degenerate(
            "covariance rank < 2 (collinear points)".into(),
        ));
    }
    let mut signs = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs[order[2]] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&signs) * v_t;
    let scale = if with_scale {
        sv.component_mul(&signs).sum() / var_x
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(Error::Degenerate(format!("non-positive scale {scale}")));
    }
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation: mu_y - rotation * mu_x * scale,
    })
}

/// A projected keypoint with its visibility flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2d {
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

impl Keypoint2d {
    pub fn point(&self) -> GridPoint {
        GridPoint::new(self.u, self.v)
    }
}

/// Per-view keypoints: image positions and index-aligned canonical template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "KeypointJson", try_from = "KeypointJson")]
pub struct KeypointSet {
    pub kp2d: Vec<Keypoint2d>,
    pub kp3d_canonical: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct KeypointJson {
    kp2d: Vec<[f64; 3]>,
    kp3d_canonical: Vec<[f64; 3]>,
}

impl From<KeypointSet> for KeypointJson {
    fn from(k: KeypointSet) -> Self {
        Self {
            kp2d: k
                .kp2d
                .iter()
                .map(|p| [p.u, p.v, if p.visible { 1.0 } else { 0.0 }])
                .collect(),
            kp3d_canonical: k.kp3d_canonical.iter().map(|x| [x.x, x.y, x.z]).collect(),
        }
    }
}

impl TryFrom<KeypointJson> for KeypointSet {
    type Error = Error;

    fn try_from(j: KeypointJson) -> Result<Self> {
        let kp2d = j
            .kp2d
            .iter()
            .map(|&[u, v, vis]| {
                if vis != 0.0 && vis != 1.0 {
                    return Err(Error::Format(format!(
                        "keypoint visibility must be 0 or 1, got {vis}"
                    )));
                }
                Ok(Keypoint2d {
                    u,
                    v,
                    visible: vis == 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        KeypointSet::new(kp2d, j.kp3d_canonical.into_iter().map(Vec3::from).collect())
    }
}

impl KeypointSet {
    pub fn new(kp2d: Vec<Keypoint2d>, kp3d_canonical: Vec<Vec3>) -> Result<Self> {
        if kp2d.len() != kp3d_canonical.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} image keypoints vs {} canonical keypoints",
                kp2d.len(),
                kp3d_canonical.len()
            )));
        }
        Ok(Self {
            kp2d,
            kp3d_canonical,
        })
    }

    pub fn len(&self) -> usize {
        self.kp2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kp2d.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.kp2d.iter().filter(|k| k.visible).count()
    }

    /// Copy keeping visibility only for the listed indices.
    pub fn restricted_to(&self, keep: &[usize]) -> KeypointSet {
        let mut out = self.clone();
        for (i, k) in out.kp2d.iter_mut().enumerate() {
            k.visible &= keep.contains(&i);
        }
        out
    }
}

/// Depth sampled at a sub-pixel keypoint location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointDepth {
    pub depth: f64,
    /// The surrounding 4×4 pixel block lies on one plane, so the
    /// interpolated value is exact.
    pub exact: bool,
}

/// Looks up depth at `p`. Inverse depth is affine in image coordinates over
/// a plane, so when the 4×4 block around `p` is planar the bilinear
/// interpolation of inverse depth is exact. Otherwise the interpolated value
/// of a fully covered 2×2 cell is used, or failing that the nearest covered
/// corner of the cell.
pub fn keypoint_depth(depth: &FloatGrid, p: GridPoint) -> Option<KeypointDepth> {
    let (h, w) = (depth.height(), depth.width());
    if h < 2
        || w < 2
        || !(p.u >= 0.0 && p.u <= (w - 1) as f64 && p.v >= 0.0 && p.v <= (h - 1) as f64)
    {
        return None;
    }
    let r0 = (p.v.floor() as usize).min(h - 2);
    let c0 = (p.u.floor() as usize).min(w - 2);
    let (fv, fu) = (p.v - r0 as f64, p.u - c0 as f64);
    let inv_at = |r: usize, c: usize| {
        let d = depth.at(r, c);
        (d > 0.0).then(|| 1.0 / d)
    };
    let lerp = |f00: f64, f01: f64, f10: f64, f11: f64| {
        (1.0 - fv) * ((1.0 - fu) * f00 + fu * f01) + fv * ((1.0 - fu) * f10 + fu * f11)
    };

    if r0 >= 1 && c0 >= 1 && r0 + 2 < h && c0 + 2 < w {
        let mut block = [[0.0; 4]; 4];
        let mut covered = true;
        'fill: for (a, row) in block.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                match inv_at(r0 + a - 1, c0 + b - 1) {
                    Some(f) => *cell = f,
                    None => {
                        covered = false;
                        break 'fill;
                    }
                }
            }
        }
        if covered && is_affine(&block) {
            let inv = lerp(block[1][1], block[1][2], block[2][1], block[2][2]);
            return Some(KeypointDepth {
                depth: 1.0 / inv,
                exact: true,
            });
        }
    }

    let corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
    let inv: Vec<Option<f64>> = corners.iter().map(|&(r, c)| inv_at(r, c)).collect();
    if let [Some(f00), Some(f01), Some(f10), Some(f11)] = inv[..] {
        return Some(KeypointDepth {
            depth: 1.0 / lerp(f00, f01, f10, f11),
            exact: false,
        });
    }
    corners
        .iter()
        .filter(|&&(r, c)| depth.at(r, c) > 0.0)
        .min_by(|&&(ra, ca), &&(rb, cb)| {
            let da = (ra as f64 - p.v).powi(2) + (ca as f64 - p.u).powi(2);
            let db = (rb as f64 - p.v).powi(2) + (cb as f64 - p.u).powi(2);
            da.total_cmp(&db)
        })
        .map(|&(r, c)| KeypointDepth {
            depth: depth.at(r, c),
            exact: false,
        })
}

/// Relative tolerance of the planarity test; loose enough for depth that
/// went through single-precision storage.
pub const PLANARITY_TOL: f64 = 1e-6;

fn is_affine(f: &[[f64; 4]; 4]) -> bool {
    let scale = f.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = PLANARITY_TOL * scale;
    let du = f[0][1] - f[0][0];
    let dv = f[1][0] - f[0][0];
    (0..4)
        .all(|a| (0..4).all(|b| (f[a][b] - (f[0][0] + a as f64 * dv + b as f64 * du)).abs() <= tol))
}

/// Result of sparse canonicalization with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseCanonicalization {
    pub transform: SimilarityTransform,
    pub keypoints_used: usize,
    /// All used keypoints had exact depth.
    pub exact_depth: bool,
    /// Mean distance between transformed keypoints and their templates.
    pub mean_residual: f64,
}

/// Recovers the camera-to-canonical similarity from visible keypoints.
pub fn sparse_canonicalize(
    kps: &KeypointSet,
    depth: &FloatGrid,
    k: &Intrinsics,
) -> Result<SimilarityTransform> {
    sparse_canonicalize_detailed(kps, depth, k).map(|c| c.transform)
}

/// As [`sparse_canonicalize`]. When at least [`MIN_KEYPOINTS`] keypoints
/// have exact depth only those are used.
pub fn sparse_canonicalize_detailed(
    kps: &KeypointSet,
    depth: &FloatGrid,
    k: &Intrinsics,
) -> Result<SparseCanonicalization> {
    if depth.channels() != 1 {
        return Err(Error::ShapeMismatch("depth must have one channel".into()));
    }
    let mut samples = Vec::new();
    for (kp, canon) in kps.kp2d.iter().zip(&kps.kp3d_canonical) {
        if !kp.visible {
            continue;
        }
        if let Some(d) = keypoint_depth(depth, kp.point()) {
            samples.push((backproject(kp.point(), d.depth, k)?, *canon, d.exact));
        }
    }
    let exact_count = samples.iter().filter(|s| s.2).count();
    if exact_count >= MIN_KEYPOINTS {
        samples.retain(|s| s.2);
    }
    if samples.len() < MIN_KEYPOINTS {
        return Err(Error::InsufficientKeypoints {
            needed: MIN_KEYPOINTS,
            have: samples.len(),
        });
    }
    let src: Vec<Vec3> = samples.iter().map(|s| s.0).collect();
    let dst: Vec<Vec3> = samples.iter().map(|s| s.1).collect();
    let transform = umeyama_points(&src, &dst, true)?;
    let mean_residual = src
        .iter()
        .zip(&dst)
        .map(|(x, y)| (transform.apply(x) - y).norm())
        .sum::<f64>()
        / src.len() as f64;
    Ok(SparseCanonicalization {
        transform,
        keypoints_used: src.len(),
        exact_depth: samples.iter().all(|s| s.2),
        mean_residual,
    })
}

/// Camera-frame points of every masked pixel, in row-major order.
pub fn masked_points(
    depth: &FloatGrid,
    mask: &FloatGrid,
    k: &Intrinsics,
) -> Result<Vec<((usize, usize), Vec3)>> {
    depth.ensure_mask_for(mask, "masked_points")?;
    let mut out = Vec::new();
    for i in 0..depth.height() {
        for j in 0..depth.width() {
            if mask.at(i, j) == 0.0 {
                continue;
            }
            let d = depth.at(i, j);
            if !(d > 0.0) {
                return Err(Error::NonPositiveDepth(d));
            }
            out.push((
                (i, j),
                backproject(GridPoint::new(j as f64, i as f64), d, k)?,
            ));
        }
    }
    Ok(out)
}

/// Excursions outside the unit cube smaller than this are rounding (including
/// single-precision depth storage), not counted as clamps.
pub const CLAMP_SLACK: f64 = 1e-6;

/// NOCS map produced from depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifiedNocs {
    pub map: FloatGrid,
    /// Masked pixels whose canonical coordinate left `[0,1]³` on any axis
    /// by more than [`CLAMP_SLACK`].
    pub clamped: usize,
}

/// Colors each masked pixel by its canonical coordinate; background is 1.0.
pub fn densify_to_nocs(
    depth: &FloatGrid,
    mask: &FloatGrid,
    k: &Intrinsics,
    t_cano: &SimilarityTransform,
) -> Result<DensifiedNocs> {
    let mut map = FloatGrid::filled(depth.height(), depth.width(), 3, 1.0);
    let mut clamped = 0;
    for ((i, j), x) in masked_points(depth, mask, k)? {
        let y = t_cano.apply(&x);
        if y.iter()
            .any(|c| !(-CLAMP_SLACK..=1.0 + CLAMP_SLACK).contains(c))
        {
            clamped += 1;
        }
        let px = map.pixel_mut(i, j);
        for c in 0..3 {
            px[c] = y[c].clamp(0.0, 1.0);
        }
    }
    Ok(DensifiedNocs { map, clamped })
}

/// Parameters of dataset-level frame alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Inlier threshold as a multiple of the median per-instance Chamfer.
    pub inlier_factor: f64,
    /// Lower bound on the inlier threshold, so noiseless data keeps exact fits.
    pub tau_floor: f64,
    pub icp_max_iterations: usize,
    pub icp_tolerance: f64,
    /// Points per cloud used for scoring and refinement.
    pub max_points: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            inlier_factor: 3.0,
            tau_floor: 1e-9,
            icp_max_iterations: 50,
            icp_tolerance: 1e-6,
            max_points: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalFrameAlignment {
    pub transform: SimilarityTransform,
    pub inlier_count: usize,
    pub mean_residual: f64,
    /// Instance indices counted as inliers.
    pub inliers: Vec<usize>,
    pub icp_iterations: usize,
}

/// Finds one similarity mapping every predicted instance frame onto its
/// reference. Candidates are per-instance alignments; the one with least
/// mean Chamfer wins and is refined by ICP over the inlier instances.
pub fn align_frames_dataset(
    predicted: &[PointCloud],
    reference: &[PointCloud],
) -> Result<CanonicalFrameAlignment> {
    align_frames_dataset_with(predicted, reference, &AlignConfig::default())
}

pub fn align_frames_dataset_with(
    predicted: &[PointCloud],
    reference: &[PointCloud],
    cfg: &AlignConfig,
) -> Result<CanonicalFrameAlignment> {
    if predicted.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted vs {} reference instances",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(Error::InsufficientInstances {
            needed: 2,
            have: predicted.len(),
        });
    }
    if predicted.iter().chain(reference).any(PointCloud::is_empty) {
        return Err(Error::EmptyCloud);
    }
    let pred: Vec<PointCloud> = predicted
        .iter()
        .map(|c| c.subsampled(cfg.max_points))
        .collect();
    let refs: Vec<PointCloud> = reference
        .iter()
        .map(|c| c.subsampled(cfg.max_points))
        .collect();

    let candidates: Vec<SimilarityTransform> = predicted
        .par_iter()
        .zip(reference.par_iter())
        .filter_map(|(p, r)| instance_candidate(p, r, cfg).ok())
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoCandidate);
    }

    let scored: Vec<(f64, Vec<f64>)> = candidates
        .par_iter()
        .map(|t| {
            let per: Vec<f64> = pred
                .iter()
                .zip(&refs)
                .map(|(p, r)| chamfer_under(t, p, r))
                .collect();
            (per.iter().sum::<f64>() / per.len() as f64, per)
        })
        .collect();
    let mut best = 0;
    for (i, (score, _)) in scored.iter().enumerate() {
        if score < &scored[best].0 {
            best = i;
        }
    }
    let per = &scored[best].1;
    let tau = (cfg.inlier_factor * median(per)).max(cfg.tau_floor);
    let inliers: Vec<usize> = (0..per.len()).filter(|&i| per[i] < tau).collect();
    let inliers = if inliers.is_empty() {
        // Every residual ties at the threshold; keep the best instance.
        vec![(0..per.len())
            .min_by(|&a, &b| per[a].total_cmp(&per[b]))
            .unwrap()]
    } else {
        inliers
    };

    let src: Vec<Vec3> = inliers
        .iter()
        .flat_map(|&i| pred[i].points.iter().copied())
        .collect();
    let dst: Vec<Vec3> = inliers
        .iter()
        .flat_map(|&i| refs[i].points.iter().copied())
        .collect();
    let src = PointCloud::metric(src).subsampled(cfg.max_points).points;
    let dst = PointCloud::metric(dst).subsampled(cfg.max_points).points;
    let (transform, icp_iterations) = icp(&src, &dst, candidates[best], cfg)?;

    let mean_residual = inliers
        .iter()
        .map(|&i| chamfer_under(&transform, &pred[i], &refs[i]))
        .sum::<f64>()
        / inliers.len() as f64;
    Ok(CanonicalFrameAlignment {
        transform,
        inlier_count: inliers.len(),
        mean_residual,
        inliers,
        icp_iterations,
    })
}

fn chamfer_under(t: &SimilarityTransform, p: &PointCloud, r: &PointCloud) -> f64 {
    let moved = PointCloud::new(p.points.iter().map(|x| t.apply(x)).collect(), r.units);
    chamfer(&moved, r).unwrap_or(f64::INFINITY)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-instance hypothesis: index-aligned Umeyama when the clouds have one
/// point per pixel in common, otherwise ICP from centroid alignment.
fn instance_candidate(
    p: &PointCloud,
    r: &PointCloud,
    cfg: &AlignConfig,
) -> Result<SimilarityTransform> {
    if p.len() == r.len() {
        return umeyama(p, r, true);
    }
    let (cp, cr) = (p.centroid().unwrap(), r.centroid().unwrap());
    let init = SimilarityTransform {
        scale: 1.0,
        rotation: Mat3::identity(),
        translation: cr - cp,
    };
    let ps = p.subsampled(cfg.max_points);
    let rs = r.subsampled(cfg.max_points);
    icp(&ps.points, &rs.points, init, cfg).map(|(t, _)| t)
}

/// Point-to-point ICP with similarity updates. Returns the transform with
/// the lowest mean squared nearest-neighbour distance seen and the
/// iteration count.
pub fn icp(
    src: &[Vec3],
    dst: &[Vec3],
    init: SimilarityTransform,
    cfg: &AlignConfig,
) -> Result<(SimilarityTransform, usize)> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = NearestNeighborGrid::new(dst);
    let residual = |t: &SimilarityTransform| -> (f64, Vec<Vec3>) {
        let matches: Vec<(usize, f64)> =
            src.par_iter().map(|x| index.nearest(&t.apply(x))).collect();
        let err = matches.iter().map(|m| m.1).sum::<f64>() / src.len() as f64;
        (err, matches.iter().map(|m| dst[m.0]).collect())
    };
    let mut best = init;
    let (mut best_err, mut matched) = residual(&init);
    let mut iterations = 0;
    while iterations < cfg.icp_max_iterations {
        iterations += 1;
        let Ok(next) = umeyama_points(src, &matched, true) else {
            break;
        };
        let (err, m) = residual(&next);
        let improvement = best_err - err;
        if err < best_err {
            best = next;
            best_err = err;
            matched = m;
        }
        if improvement < cfg.icp_tolerance {
            break;
        }
    }
    Ok((best, iterations))
}
