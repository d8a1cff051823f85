//! Training objectives over depth and NOCS fields.
//!
//! Every "⊙ M" reduction is a mean over the selected pixels; masks are
//! intersected with warp validity wherever a warp is involved.

mod features;
mod objective;
mod ssim;

pub use crate::warp::SourceSupport;
pub use features::{perceptual_loss, ConvFilter, FeatureBank};
pub use objective::{
    grad_wrt_depth, grad_wrt_nocs, DepthObjective, GeometricInputs, NocsObjective, Term,
};
pub use ssim::{ssim, SSIM_C1, SSIM_C2};

use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, RigidTransform};
use crate::error::{Error, Result};
use crate::grid::FloatGrid;
use crate::warp::{inverse_warp_supported, WarpResult};

/// SSIM/L1 balance of the photometric loss.
pub const DEFAULT_ALPHA: f64 = 0.15;

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;

/// A nearby view used as warp source.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    /// Payload to resample (RGB for photometric terms, NOCS for geometric).
    pub payload: &'a FloatGrid,
    /// Source-side foreground and depth used to reject samples.
    pub support: SourceSupport<'a>,
    /// Target camera → source camera.
    pub t_rel: RigidTransform,
}

impl SourceView<'_> {
    pub fn warp(&self, depth: &FloatGrid, k: &Intrinsics) -> Result<WarpResult> {
        inverse_warp_supported(self.payload, self.support, depth, k, &self.t_rel)
    }
}

/// Per-pixel `|a - b|` averaged over channels.
fn abs_diff_mean(a: &FloatGrid, b: &FloatGrid) -> Result<FloatGrid> {
    a.ensure_same_shape(b, "abs_diff")?;
    let c = a.channels() as f64;
    Ok(FloatGrid::from_fn(a.height(), a.width(), 1, |i, j, _| {
        a.pixel(i, j)
            .iter()
            .zip(b.pixel(i, j))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / c
    }))
}

/// `α/2 · (1 − ssim(Î, I)) + (1 − α) · |Î − I|`, averaged over mask ∧ validity.
///
/// SSIM is evaluated on the full frames before masking.
pub fn photometric_loss(
    target: &FloatGrid,
    synthesized: &WarpResult,
    mask: &FloatGrid,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    target.ensure_same_shape(&synthesized.synthesized, "photometric_loss")?;
    target.ensure_mask_for(mask, "photometric_loss")?;
    let effective = mask.mask_and(&synthesized.validity)?;
    let l1 = abs_diff_mean(&synthesized.synthesized, target)?;
    let per_pixel = if alpha > 0.0 {
        let s = ssim(&synthesized.synthesized, target)?;
        s.zip_map(&l1, |s, d| alpha / 2.0 * (1.0 - s) + (1.0 - alpha) * d)?
    } else {
        l1
    };
    per_pixel.masked_mean(&effective)
}

/// Edge-aware weights `e^{−|δ I|}` along x and y, channel-averaged.
pub(crate) fn edge_weights(image: &FloatGrid) -> Result<(FloatGrid, FloatGrid)> {
    let gx = image.gradient_x()?.map(f64::abs).channel_mean();
    let gy = image.gradient_y()?.map(f64::abs).channel_mean();
    Ok((gx.map(|g| (-g).exp()), gy.map(|g| (-g).exp())))
}

/// Edge-aware smoothness of `field` (depth or NOCS) guided by `image`.
///
/// A forward difference contributes only when both of its pixels lie in the
/// mask, so the frozen background never pulls on the object boundary.
pub fn smoothness_loss(field: &FloatGrid, image: &FloatGrid, mask: &FloatGrid) -> Result<f64> {
    if !field.same_extent(image) {
        return Err(Error::ShapeMismatch("smoothness: field vs image".into()));
    }
    field.ensure_mask_for(mask, "smoothness_loss")?;
    let (wx, wy) = edge_weights(image)?;
    let fx = field.gradient_x()?;
    let fy = field.gradient_y()?;
    let (h, w) = (field.height(), field.width());
    let c = field.channels() as f64;
    let per_pixel = FloatGrid::from_fn(h, w, 1, |i, j, _| {
        let mut v = 0.0;
        if j + 1 < w && mask.at(i, j + 1) != 0.0 {
            v += fx.pixel(i, j).iter().map(|d| d.abs()).sum::<f64>() / c * wx.at(i, j);
        }
        if i + 1 < h && mask.at(i + 1, j) != 0.0 {
            v += fy.pixel(i, j).iter().map(|d| d.abs()).sum::<f64>() / c * wy.at(i, j);
        }
        v
    });
    per_pixel.masked_mean(mask)
}

/// Binary cross-entropy over all pixels, predictions clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn mask_bce(predicted: &FloatGrid, truth: &FloatGrid) -> Result<f64> {
    predicted.ensure_same_shape(truth, "mask_bce")?;
    if predicted.data().is_empty() {
        return Err(Error::EmptyMask);
    }
    let sum: f64 = predicted
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &m)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(m * p.ln() + (1.0 - m) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / predicted.data().len() as f64)
}

/// L1 between the source NOCS warped into the target frame and the target
/// NOCS, averaged over mask ∧ validity.
pub fn geometric_consistency_loss(
    nocs_target: &FloatGrid,
    source: &SourceView,
    depth: &FloatGrid,
    k: &Intrinsics,
    mask: &FloatGrid,
) -> Result<f64> {
    if nocs_target.channels() != 3 || source.payload.channels() != 3 {
        return Err(Error::ShapeMismatch(
            "NOCS maps must have 3 channels".into(),
        ));
    }
    nocs_target.ensure_mask_for(mask, "geometric_consistency_loss")?;
    let warped = source.warp(depth, k)?;
    let effective = mask.mask_and(&warped.validity)?;
    abs_diff_mean(&warped.synthesized, nocs_target)?.masked_mean(&effective)
}

/// Per-term weights for the aggregate objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub photometric: f64,
    pub smoothness: f64,
    pub perceptual: f64,
    pub mask_bce: f64,
    pub geometric: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            photometric: 1.0,
            smoothness: 1.0,
            perceptual: 1.0,
            mask_bce: 1.0,
            geometric: 1.0,
        }
    }
}

/// Term values of one objective evaluation. `None` marks a term that does
/// not apply (it is not the same as zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photometric: Option<f64>,
    pub smoothness: Option<f64>,
    pub perceptual: Option<f64>,
    pub mask_bce: Option<f64>,
    pub geometric: Option<f64>,
    pub total: f64,
    pub weights: TermWeights,
}

impl LossBreakdown {
    pub fn new(
        weights: TermWeights,
        photometric: Option<f64>,
        smoothness: Option<f64>,
        perceptual: Option<f64>,
        mask_bce: Option<f64>,
        geometric: Option<f64>,
    ) -> Self {
        let mut b = Self {
            photometric,
            smoothness,
            perceptual,
            mask_bce,
            geometric,
            total: 0.0,
            weights,
        };
        b.total = b.weighted_sum();
        b
    }

    fn pairs(&self) -> [(Option<f64>, f64); 5] {
        let w = &self.weights;
        [
            (self.photometric, w.photometric),
            (self.smoothness, w.smoothness),
            (self.perceptual, w.perceptual),
            (self.mask_bce, w.mask_bce),
            (self.geometric, w.geometric),
        ]
    }

    /// Σ weight · term over present terms.
    pub fn weighted_sum(&self) -> f64 {
        self.pairs()
            .iter()
            .filter_map(|(t, w)| t.map(|t| t * w))
            .sum()
    }

    pub const CSV_HEADER: &'static str =
        "photometric,smoothness,perceptual,mask_bce,geometric,total";

    /// Terms as CSV fields; absent terms are written as `NA`.
    pub fn csv_fields(&self) -> String {
        let f = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.12e}"));
        format!(
            "{},{},{},{},{},{:.12e}",
            f(self.photometric),
            f(self.smoothness),
            f(self.perceptual),
            f(self.mask_bce),
            f(self.geometric),
            self.total
        )
    }
}

/// Inputs of the depth-stage objective for one target view.
#[derive(Debug, Clone)]
pub struct DepthLossInputs<'a> {
    pub image: &'a FloatGrid,
    pub depth: &'a FloatGrid,
    pub mask: &'a FloatGrid,
    pub k: Intrinsics,
    /// Nearby RGB views.
    pub sources: Vec<SourceView<'a>>,
    /// Mask prediction scored against `mask` when present.
    pub predicted_mask: Option<&'a FloatGrid>,
}

/// `L_ph` (summed over nearby views) + `L_smooth` + `L_per` (summed over
/// nearby views), plus the mask BCE when a predicted mask is supplied.
pub fn aggregate_depth_loss(
    inputs: &DepthLossInputs,
    weights: TermWeights,
    alpha: f64,
    bank: Option<&FeatureBank>,
) -> Result<LossBreakdown> {
    let mut photometric = 0.0;
    let mut perceptual = 0.0;
    for src in &inputs.sources {
        let warped = src.warp(inputs.depth, &inputs.k)?;
        photometric += photometric_loss(inputs.image, &warped, inputs.mask, alpha)?;
        if let Some(bank) = bank {
            let m = inputs.mask.mask_and(&warped.validity)?;
            perceptual += perceptual_loss(inputs.image, &warped.synthesized, &m, bank)?;
        }
    }
    let smoothness = smoothness_loss(inputs.depth, inputs.image, inputs.mask)?;
    let bce = inputs
        .predicted_mask
        .map(|p| mask_bce(p, inputs.mask))
        .transpose()?;
    Ok(LossBreakdown::new(
        weights,
        Some(photometric),
        Some(smoothness),
        bank.map(|_| perceptual),
        bce,
        None,
    ))
}

/// Inputs of the NOCS-stage objective for one target view.
#[derive(Debug, Clone)]
pub struct NocsLossInputs<'a> {
    /// Predicted NOCS map of the target view.
    pub nocs: &'a FloatGrid,
    /// Independent estimate densified from depth.
    pub nocs_from_depth: &'a FloatGrid,
    /// Target RGB, used for the smoothness edge weights.
    pub image: &'a FloatGrid,
    pub depth: &'a FloatGrid,
    pub mask: &'a FloatGrid,
    pub k: Intrinsics,
    /// NOCS maps of the nearby views.
    pub sources: Vec<SourceView<'a>>,
}

/// `L_geo` (summed over nearby views) + `L_ph` and `L_per` between the
/// predicted and depth-derived NOCS maps + `L_smooth` on the prediction.
pub fn aggregate_nocs_loss(
    inputs: &NocsLossInputs,
    weights: TermWeights,
    alpha: f64,
    bank: Option<&FeatureBank>,
) -> Result<LossBreakdown> {
    let mut geometric = 0.0;
    for src in &inputs.sources {
        geometric +=
            geometric_consistency_loss(inputs.nocs, src, inputs.depth, &inputs.k, inputs.mask)?;
    }
    let aligned = WarpResult::aligned(inputs.nocs_from_depth.clone());
    let photometric = photometric_loss(inputs.nocs, &aligned, inputs.mask, alpha)?;
    let perceptual = bank
        .map(|b| perceptual_loss(inputs.nocs, inputs.nocs_from_depth, inputs.mask, b))
        .transpose()?;
    let smoothness = smoothness_loss(inputs.nocs, inputs.image, inputs.mask)?;
    Ok(LossBreakdown::new(
        weights,
        Some(photometric),
        Some(smoothness),
        perceptual,
        None,
        Some(geometric),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Mat3, Vec3};

    fn image(h: usize, w: usize) -> FloatGrid {
        FloatGrid::from_fn(h, w, 3, |i, j, c| {
            0.5 + 0.35 * ((0.6 * i as f64 + c as f64).sin() * (0.4 * j as f64).cos())
        })
    }

    fn full(h: usize, w: usize) -> FloatGrid {
        FloatGrid::filled(h, w, 1, 1.0)
    }

    #[test]
    fn photometric_zero_at_identity() {
        let img = image(10, 12);
        let r = WarpResult::aligned(img.clone());
        assert_eq!(
            photometric_loss(&img, &r, &full(10, 12), 0.15).unwrap(),
            0.0
        );
    }

    #[test]
    fn photometric_alpha_zero_is_l1() {
        let img = image(10, 12);
        let shifted = img.map(|x| x + 0.1);
        let r = WarpResult::aligned(shifted);
        let l = photometric_loss(&img, &r, &full(10, 12), 0.0).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn photometric_ignores_edits_outside_effective_mask() {
        let img = image(10, 12);
        let mask = FloatGrid::from_fn(10, 12, 1, |i, _, _| if i < 5 { 1.0 } else { 0.0 });
        let mut validity = full(10, 12);
        validity.set(2, 3, 0, 0.0);
        let base = WarpResult {
            synthesized: img.map(|x| x * 0.9),
            validity: validity.clone(),
        };
        let mut edited = base.clone();
        for j in 0..12 {
            for c in 0..3 {
                edited.synthesized.set(8, j, c, 0.0);
            }
        }
        edited.synthesized.set(2, 3, 0, 0.77);
        let a = photometric_loss(&img, &base, &mask, 0.0).unwrap();
        let b = photometric_loss(&img, &edited, &mask, 0.0).unwrap();
        assert_eq!(a, b);
        let bad = WarpResult {
            synthesized: img.clone(),
            validity: FloatGrid::zeros(10, 12, 1),
        };
        assert!(matches!(
            photometric_loss(&img, &bad, &mask, 0.15),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn smoothness_cases() {
        let img = FloatGrid::filled(6, 8, 3, 0.4);
        let mask = full(6, 8);
        assert_eq!(
            smoothness_loss(&FloatGrid::filled(6, 8, 1, 2.0), &img, &mask).unwrap(),
            0.0
        );
        let ramp = FloatGrid::from_fn(6, 8, 1, |_, j, _| j as f64);
        // Interior pixels carry |δx| · e^0 = 1; the zero-padded last column carries 0.
        assert!((smoothness_loss(&ramp, &img, &mask).unwrap() - 7.0 / 8.0).abs() < 1e-12);
        let interior = FloatGrid::from_fn(6, 8, 1, |_, j, _| if j < 7 { 1.0 } else { 0.0 });
        assert!((smoothness_loss(&ramp, &img, &interior).unwrap() - 6.0 / 7.0).abs() < 1e-12);

        let step = FloatGrid::from_fn(6, 8, 1, |_, j, _| if j < 4 { 1.0 } else { 2.0 });
        let edge_img = FloatGrid::from_fn(6, 8, 3, |_, j, _| if j < 4 { 0.0 } else { 1.0 });
        let flat = smoothness_loss(&step, &img, &mask).unwrap();
        let edged = smoothness_loss(&step, &edge_img, &mask).unwrap();
        assert!(edged < flat);
    }

    #[test]
    fn smoothness_ignores_pairs_leaving_the_mask() {
        let img = FloatGrid::filled(4, 4, 3, 0.5);
        let mask = FloatGrid::from_fn(4, 4, 1, |_, j, _| if j < 2 { 1.0 } else { 0.0 });
        let depth = FloatGrid::from_fn(4, 4, 1, |_, j, _| if j < 2 { 3.0 } else { 0.0 });
        assert_eq!(smoothness_loss(&depth, &img, &mask).unwrap(), 0.0);
    }

    #[test]
    fn bce_cases() {
        let truth = FloatGrid::from_rows(&[&[1.0, 0.0]]).unwrap();
        let pred = FloatGrid::from_rows(&[&[0.9, 0.2]]).unwrap();
        let expect = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((mask_bce(&pred, &truth).unwrap() - expect).abs() < 1e-15);
        let half = FloatGrid::filled(1, 2, 1, 0.5);
        assert!((mask_bce(&half, &truth).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let floor = mask_bce(&truth, &truth).unwrap();
        assert!((floor - (-(1.0 - BCE_EPS).ln())).abs() < 1e-18);
        assert!(floor > 0.0 && floor < 1e-6);
    }

    #[test]
    fn geometric_cases() {
        let (h, w) = (10, 12);
        let nocs = image(h, w);
        let depth = FloatGrid::filled(h, w, 1, 2.0);
        let k = Intrinsics::centered(w, h, 15.0);
        let src = SourceView {
            payload: &nocs,
            support: SourceSupport::none(),
            t_rel: RigidTransform::identity(),
        };
        let l = geometric_consistency_loss(&nocs, &src, &depth, &k, &full(h, w)).unwrap();
        assert_eq!(l, 0.0);
        let shifted = nocs.map(|x| x + 0.1);
        let src = SourceView {
            payload: &shifted,
            ..src
        };
        let l = geometric_consistency_loss(&nocs, &src, &depth, &k, &full(h, w)).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn breakdown_bookkeeping() {
        let (h, w) = (10, 12);
        let img = image(h, w);
        let depth = FloatGrid::filled(h, w, 1, 2.0);
        let k = Intrinsics::centered(w, h, 15.0);
        let moved = RigidTransform::new(Mat3::identity(), Vec3::new(0.05, 0.0, 0.0)).unwrap();
        let inputs = DepthLossInputs {
            image: &img,
            depth: &depth,
            mask: &full(h, w),
            k,
            sources: vec![SourceView {
                payload: &img,
                support: SourceSupport::none(),
                t_rel: moved,
            }],
            predicted_mask: None,
        };
        let bank = FeatureBank::new(0, 3);
        let all = aggregate_depth_loss(&inputs, TermWeights::default(), 0.15, Some(&bank)).unwrap();
        assert!(all.mask_bce.is_none() && all.geometric.is_none());
        assert!((all.total - all.weighted_sum()).abs() < 1e-12);
        let only_ph = TermWeights {
            smoothness: 0.0,
            perceptual: 0.0,
            ..TermWeights::default()
        };
        let b = aggregate_depth_loss(&inputs, only_ph, 0.15, Some(&bank)).unwrap();
        assert_eq!(b.total, b.photometric.unwrap());
        let row = b.csv_fields();
        assert_eq!(row.split(',').count(), 6);
        assert!(row.contains("NA"));
    }
}
