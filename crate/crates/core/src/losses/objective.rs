//! Weighted objectives over a depth or NOCS field, with analytic gradients
//! for the L1-photometric, smoothness and geometric terms.

use serde::{Deserialize, Serialize};

use super::{edge_weights, perceptual_loss, smoothness_loss, ssim, FeatureBank, SourceView};
use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::grid::FloatGrid;
use crate::warp::{warp_taps, WarpResult};

/// Objective terms. `Ssim` is the `(1 − ssim)/2` half of the photometric
/// loss, so `α·Ssim + (1 − α)·PhotometricL1` reproduces the full term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    PhotometricL1,
    Ssim,
    Smoothness,
    Perceptual,
    Geometric,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::PhotometricL1 => "photometric_l1",
            Term::Ssim => "ssim",
            Term::Smoothness => "smoothness",
            Term::Perceptual => "perceptual",
            Term::Geometric => "geometric",
        }
    }

    pub fn has_analytic_gradient(self) -> bool {
        matches!(
            self,
            Term::PhotometricL1 | Term::Smoothness | Term::Geometric
        )
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_analytic(terms: &[(Term, f64)]) -> Result<()> {
    for &(t, w) in terms {
        if w != 0.0 && !t.has_analytic_gradient() {
            return Err(Error::UnsupportedTerm(t.name()));
        }
    }
    Ok(())
}

fn l1_mean(a: &FloatGrid, b: &FloatGrid, mask: &FloatGrid) -> Result<f64> {
    let c = a.channels() as f64;
    let per = FloatGrid::from_fn(a.height(), a.width(), 1, |i, j, _| {
        a.pixel(i, j)
            .iter()
            .zip(b.pixel(i, j))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / c
    });
    per.masked_mean(mask)
}

fn dssim_mean(a: &FloatGrid, b: &FloatGrid, mask: &FloatGrid) -> Result<f64> {
    ssim(a, b)?.map(|s| (1.0 - s) / 2.0).masked_mean(mask)
}

/// Adds the smoothness gradient with respect to `field`.
fn add_smoothness_grad(
    grad: &mut FloatGrid,
    field: &FloatGrid,
    image: &FloatGrid,
    mask: &FloatGrid,
    weight: f64,
) -> Result<()> {
    let n = mask.count_nonzero();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let (wx, wy) = edge_weights(image)?;
    let (h, w, ch) = (field.height(), field.width(), field.channels());
    let scale = weight / (n as f64 * ch as f64);
    for i in 0..h {
        for j in 0..w {
            if mask.at(i, j) == 0.0 {
                continue;
            }
            for (ni, nj, ew) in [(i, j + 1, wx.at(i, j)), (i + 1, j, wy.at(i, j))] {
                if ni >= h || nj >= w || mask.at(ni, nj) == 0.0 {
                    continue;
                }
                for c in 0..ch {
                    let g = scale * ew * sign(field.get(ni, nj, c) - field.get(i, j, c));
                    grad.data_mut()[(ni * w + nj) * ch + c] += g;
                    grad.data_mut()[(i * w + j) * ch + c] -= g;
                }
            }
        }
    }
    Ok(())
}

/// Adds `∂/∂depth` of the masked-mean L1 between the warped `source` payload
/// and `reference`, over mask ∧ validity.
fn add_warp_l1_depth_grad(
    grad: &mut FloatGrid,
    source: &SourceView,
    reference: &FloatGrid,
    depth: &FloatGrid,
    k: &Intrinsics,
    mask: &FloatGrid,
    weight: f64,
) -> Result<()> {
    let payload = source.payload;
    let (h, w, ch) = (depth.height(), depth.width(), payload.channels());
    let mut hits = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask.at(i, j) == 0.0 {
                continue;
            }
            if let Some(hit) = warp_taps(
                payload,
                source.support,
                i,
                j,
                depth.at(i, j),
                k,
                &source.t_rel,
            ) {
                hits.push((i, j, hit));
            }
        }
    }
    if hits.is_empty() {
        return Err(Error::EmptyMask);
    }
    let scale = weight / (hits.len() as f64 * ch as f64);
    let mut sample = vec![0.0; ch];
    for (i, j, (taps, rp)) in hits {
        payload.sample_taps_into(&taps, &mut sample);
        let [r0, r1] = taps.rows;
        let [c0, c1] = taps.cols;
        let (fu, fv) = (taps.fu, taps.fv);
        let mut g = 0.0;
        for c in 0..ch {
            let s = sign(sample[c] - reference.get(i, j, c));
            if s == 0.0 {
                continue;
            }
            let g00 = payload.get(r0, c0, c);
            let g01 = payload.get(r0, c1, c);
            let g10 = payload.get(r1, c0, c);
            let g11 = payload.get(r1, c1, c);
            let ds_du = (1.0 - fv) * (g01 - g00) + fv * (g11 - g10);
            let ds_dv = (1.0 - fu) * (g10 - g00) + fu * (g11 - g01);
            g += s * (ds_du * rp.d_point_d_depth[0] + ds_dv * rp.d_point_d_depth[1]);
        }
        grad.data_mut()[i * w + j] += scale * g;
    }
    Ok(())
}

/// Nearby NOCS maps and the target NOCS map for the geometric term of the
/// depth objective.
#[derive(Debug, Clone)]
pub struct GeometricInputs<'a> {
    pub nocs_target: &'a FloatGrid,
    pub sources: Vec<SourceView<'a>>,
}

/// Weighted objective over the target depth field.
#[derive(Debug, Clone)]
pub struct DepthObjective<'a> {
    pub image: &'a FloatGrid,
    pub mask: &'a FloatGrid,
    pub k: Intrinsics,
    /// Nearby RGB views.
    pub sources: Vec<SourceView<'a>>,
    pub geometric: Option<GeometricInputs<'a>>,
    pub terms: Vec<(Term, f64)>,
    pub bank: Option<&'a FeatureBank>,
}

impl DepthObjective<'_> {
    fn warps(&self, depth: &FloatGrid) -> Result<Vec<WarpResult>> {
        self.sources
            .iter()
            .map(|s| s.warp(depth, &self.k))
            .collect()
    }

    pub fn value(&self, depth: &FloatGrid) -> Result<f64> {
        let needs_warp = self.terms.iter().any(|(t, w)| {
            *w != 0.0 && matches!(t, Term::PhotometricL1 | Term::Ssim | Term::Perceptual)
        });
        let warps = if needs_warp {
            self.warps(depth)?
        } else {
            Vec::new()
        };
        let mut total = 0.0;
        for &(term, weight) in &self.terms {
            if weight == 0.0 {
                continue;
            }
            let v = match term {
                Term::PhotometricL1 | Term::Ssim | Term::Perceptual => {
                    let mut acc = 0.0;
                    for wr in &warps {
                        let m = self.mask.mask_and(&wr.validity)?;
                        acc += match term {
                            Term::PhotometricL1 => l1_mean(&wr.synthesized, self.image, &m)?,
                            Term::Ssim => dssim_mean(&wr.synthesized, self.image, &m)?,
                            _ => {
                                let bank = self.bank.ok_or_else(|| {
                                    Error::InvalidArgument(
                                        "perceptual term needs a feature bank".into(),
                                    )
                                })?;
                                perceptual_loss(self.image, &wr.synthesized, &m, bank)?
                            }
                        };
                    }
                    acc
                }
                Term::Smoothness => smoothness_loss(depth, self.image, self.mask)?,
                Term::Geometric => {
                    let g = self.geometric.as_ref().ok_or_else(|| {
                        Error::InvalidArgument("geometric term needs NOCS inputs".into())
                    })?;
                    let mut acc = 0.0;
                    for s in &g.sources {
                        acc += super::geometric_consistency_loss(
                            g.nocs_target,
                            s,
                            depth,
                            &self.k,
                            self.mask,
                        )?;
                    }
                    acc
                }
            };
            total += weight * v;
        }
        Ok(total)
    }

    pub fn gradient(&self, depth: &FloatGrid) -> Result<FloatGrid> {
        grad_wrt_depth(self, depth)
    }

    /// Unweighted value of a single term.
    pub fn term_value(&self, term: Term, depth: &FloatGrid) -> Result<f64> {
        DepthObjective {
            terms: vec![(term, 1.0)],
            ..self.clone()
        }
        .value(depth)
    }
}

/// Analytic gradient of the depth objective, differentiating through
/// backprojection, the rigid motion, projection and bilinear sampling.
/// Validity masks are held fixed.
pub fn grad_wrt_depth(obj: &DepthObjective, depth: &FloatGrid) -> Result<FloatGrid> {
    check_analytic(&obj.terms)?;
    depth.ensure_mask_for(obj.mask, "grad_wrt_depth")?;
    let mut grad = FloatGrid::zeros(depth.height(), depth.width(), 1);
    for &(term, weight) in &obj.terms {
        if weight == 0.0 {
            continue;
        }
        match term {
            Term::PhotometricL1 => {
                for s in &obj.sources {
                    add_warp_l1_depth_grad(
                        &mut grad, s, obj.image, depth, &obj.k, obj.mask, weight,
                    )?;
                }
            }
            Term::Smoothness => add_smoothness_grad(&mut grad, depth, obj.image, obj.mask, weight)?,
            Term::Geometric => {
                let g = obj.geometric.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("geometric term needs NOCS inputs".into())
                })?;
                for s in &g.sources {
                    add_warp_l1_depth_grad(
                        &mut grad,
                        s,
                        g.nocs_target,
                        depth,
                        &obj.k,
                        obj.mask,
                        weight,
                    )?;
                }
            }
            Term::Ssim | Term::Perceptual => unreachable!("rejected by check_analytic"),
        }
    }
    Ok(grad)
}

/// Weighted objective over the target NOCS field with depth held fixed.
#[derive(Debug, Clone)]
pub struct NocsObjective<'a> {
    image: &'a FloatGrid,
    mask: &'a FloatGrid,
    nocs_from_depth: &'a FloatGrid,
    /// Nearby NOCS maps resampled into the target frame (depth is frozen).
    warped: Vec<WarpResult>,
    effective: Vec<FloatGrid>,
    terms: Vec<(Term, f64)>,
    bank: Option<&'a FeatureBank>,
}

impl<'a> NocsObjective<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image: &'a FloatGrid,
        mask: &'a FloatGrid,
        depth: &FloatGrid,
        k: &Intrinsics,
        nocs_from_depth: &'a FloatGrid,
        sources: &[SourceView<'_>],
        terms: Vec<(Term, f64)>,
        bank: Option<&'a FeatureBank>,
    ) -> Result<Self> {
        nocs_from_depth.ensure_mask_for(mask, "NocsObjective")?;
        let warped: Vec<WarpResult> = sources
            .iter()
            .map(|s| s.warp(depth, k))
            .collect::<Result<_>>()?;
        let effective = warped
            .iter()
            .map(|w| mask.mask_and(&w.validity))
            .collect::<Result<_>>()?;
        Ok(Self {
            image,
            mask,
            nocs_from_depth,
            warped,
            effective,
            terms,
            bank,
        })
    }

    pub fn terms(&self) -> &[(Term, f64)] {
        &self.terms
    }

    pub fn value(&self, nocs: &FloatGrid) -> Result<f64> {
        let mut total = 0.0;
        for &(term, weight) in &self.terms {
            if weight == 0.0 {
                continue;
            }
            let v = match term {
                Term::PhotometricL1 => l1_mean(nocs, self.nocs_from_depth, self.mask)?,
                Term::Ssim => dssim_mean(nocs, self.nocs_from_depth, self.mask)?,
                Term::Smoothness => smoothness_loss(nocs, self.image, self.mask)?,
                Term::Perceptual => {
                    let bank = self.bank.ok_or_else(|| {
                        Error::InvalidArgument("perceptual term needs a feature bank".into())
                    })?;
                    perceptual_loss(nocs, self.nocs_from_depth, self.mask, bank)?
                }
                Term::Geometric => {
                    let mut acc = 0.0;
                    for (w, m) in self.warped.iter().zip(&self.effective) {
                        acc += l1_mean(&w.synthesized, nocs, m)?;
                    }
                    acc
                }
            };
            total += weight * v;
        }
        Ok(total)
    }

    pub fn gradient(&self, nocs: &FloatGrid) -> Result<FloatGrid> {
        grad_wrt_nocs(self, nocs)
    }

    /// Unweighted value of a single term.
    pub fn term_value(&self, term: Term, nocs: &FloatGrid) -> Result<f64> {
        NocsObjective {
            terms: vec![(term, 1.0)],
            ..self.clone()
        }
        .value(nocs)
    }
}

/// Adds `∂/∂field` of the masked-mean L1 between `field` and `reference`.
fn add_direct_l1_grad(
    grad: &mut FloatGrid,
    field: &FloatGrid,
    reference: &FloatGrid,
    mask: &FloatGrid,
    weight: f64,
) -> Result<()> {
    let n = mask.count_nonzero();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let ch = field.channels();
    let scale = weight / (n as f64 * ch as f64);
    let w = field.width();
    for i in 0..field.height() {
        for j in 0..w {
            if mask.at(i, j) == 0.0 {
                continue;
            }
            for c in 0..ch {
                grad.data_mut()[(i * w + j) * ch + c] +=
                    scale * sign(field.get(i, j, c) - reference.get(i, j, c));
            }
        }
    }
    Ok(())
}

/// Analytic gradient of the NOCS objective with respect to the target NOCS field.
pub fn grad_wrt_nocs(obj: &NocsObjective, nocs: &FloatGrid) -> Result<FloatGrid> {
    check_analytic(&obj.terms)?;
    nocs.ensure_same_shape(obj.nocs_from_depth, "grad_wrt_nocs")?;
    let mut grad = FloatGrid::zeros(nocs.height(), nocs.width(), nocs.channels());
    for &(term, weight) in &obj.terms {
        if weight == 0.0 {
            continue;
        }
        match term {
            Term::PhotometricL1 => {
                add_direct_l1_grad(&mut grad, nocs, obj.nocs_from_depth, obj.mask, weight)?
            }
            Term::Smoothness => add_smoothness_grad(&mut grad, nocs, obj.image, obj.mask, weight)?,
            Term::Geometric => {
                for (w, m) in obj.warped.iter().zip(&obj.effective) {
                    add_direct_l1_grad(&mut grad, nocs, &w.synthesized, m, weight)?;
                }
            }
            Term::Ssim | Term::Perceptual => unreachable!("rejected by check_analytic"),
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{axis_angle, RigidTransform, Vec3};
    use crate::losses::SourceSupport;

    /// Smooth textured 8×8 scene with a tilted depth plane.
    struct Scene {
        image: FloatGrid,
        src_a: FloatGrid,
        src_b: FloatGrid,
        nocs: FloatGrid,
        nocs_src: FloatGrid,
        depth: FloatGrid,
        mask: FloatGrid,
        k: Intrinsics,
        t_a: RigidTransform,
        t_b: RigidTransform,
    }

    fn tex(phase: f64, c: usize) -> impl Fn(usize, usize, usize) -> f64 {
        move |i, j, ch| {
            let x = j as f64 + phase;
            let y = i as f64 - 0.5 * phase;
            0.5 + 0.3 * (0.9 * x + 0.4 * ch as f64).sin() * (0.7 * y + 0.2 * c as f64).cos()
        }
    }

    fn scene() -> Scene {
        let (h, w) = (8, 8);
        let mask = FloatGrid::from_fn(h, w, 1, |i, j, _| {
            if (1..7).contains(&i) && (1..7).contains(&j) {
                1.0
            } else {
                0.0
            }
        });
        Scene {
            image: FloatGrid::from_fn(h, w, 3, tex(0.0, 0)),
            src_a: FloatGrid::from_fn(h, w, 3, tex(0.37, 0)),
            src_b: FloatGrid::from_fn(h, w, 3, tex(-0.29, 1)),
            nocs: FloatGrid::from_fn(h, w, 3, tex(0.1, 2)),
            nocs_src: FloatGrid::from_fn(h, w, 3, tex(0.45, 2)),
            depth: FloatGrid::from_fn(h, w, 1, |i, j, _| {
                2.0 + 0.043 * i as f64 - 0.031 * j as f64 + 0.011 * ((i * j) % 3) as f64
            }),
            mask,
            k: Intrinsics::new(9.0, 9.5, 3.6, 3.4).unwrap(),
            t_a: RigidTransform::new(
                axis_angle(&Vec3::new(0.1, 1.0, 0.2), 0.03),
                Vec3::new(0.07, 0.01, 0.02),
            )
            .unwrap(),
            t_b: RigidTransform::new(
                axis_angle(&Vec3::new(-0.3, 1.0, 0.0), -0.025),
                Vec3::new(-0.06, 0.02, -0.01),
            )
            .unwrap(),
        }
    }

    fn central_difference(
        f: impl Fn(&FloatGrid) -> f64,
        x: &FloatGrid,
        mask: &FloatGrid,
        h: f64,
    ) -> FloatGrid {
        let mut g = FloatGrid::zeros(x.height(), x.width(), x.channels());
        for i in 0..x.height() {
            for j in 0..x.width() {
                if mask.at(i, j) == 0.0 {
                    continue;
                }
                for c in 0..x.channels() {
                    let mut p = x.clone();
                    p.set(i, j, c, x.get(i, j, c) + h);
                    let mut m = x.clone();
                    m.set(i, j, c, x.get(i, j, c) - h);
                    g.set(i, j, c, (f(&p) - f(&m)) / (2.0 * h));
                }
            }
        }
        g
    }

    fn max_rel_err(a: &FloatGrid, b: &FloatGrid) -> f64 {
        let scale = b
            .data()
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let s = scene();
        for terms in [
            vec![(Term::PhotometricL1, 1.0)],
            vec![(Term::Smoothness, 1.0)],
            vec![(Term::Geometric, 1.0)],
            vec![
                (Term::PhotometricL1, 1.0),
                (Term::Smoothness, 0.3),
                (Term::Geometric, 0.5),
            ],
        ] {
            let obj = DepthObjective {
                image: &s.image,
                mask: &s.mask,
                k: s.k,
                sources: vec![
                    SourceView {
                        payload: &s.src_a,
                        support: SourceSupport::none(),
                        t_rel: s.t_a,
                    },
                    SourceView {
                        payload: &s.src_b,
                        support: SourceSupport::none(),
                        t_rel: s.t_b,
                    },
                ],
                geometric: Some(GeometricInputs {
                    nocs_target: &s.nocs,
                    sources: vec![SourceView {
                        payload: &s.nocs_src,
                        support: SourceSupport::none(),
                        t_rel: s.t_a,
                    }],
                }),
                terms: terms.clone(),
                bank: None,
            };
            let g = obj.gradient(&s.depth).unwrap();
            let fd = central_difference(|d| obj.value(d).unwrap(), &s.depth, &s.mask, 1e-4);
            let err = max_rel_err(&g, &fd);
            assert!(err < 1e-4, "{terms:?}: {err}");
            assert!(fd.data().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn nocs_gradient_matches_finite_differences() {
        let s = scene();
        let srcs = [
            SourceView {
                payload: &s.nocs_src,
                support: SourceSupport::none(),
                t_rel: s.t_a,
            },
            SourceView {
                payload: &s.nocs,
                support: SourceSupport::none(),
                t_rel: s.t_b,
            },
        ];
        let target = s.nocs.map(|x| 0.8 * x + 0.07);
        for terms in [
            vec![(Term::PhotometricL1, 1.0)],
            vec![(Term::Smoothness, 1.0)],
            vec![(Term::Geometric, 1.0)],
            vec![
                (Term::PhotometricL1, 0.7),
                (Term::Smoothness, 0.2),
                (Term::Geometric, 1.0),
            ],
        ] {
            let obj = NocsObjective::new(
                &s.image,
                &s.mask,
                &s.depth,
                &s.k,
                &target,
                &srcs,
                terms.clone(),
                None,
            )
            .unwrap();
            let field = s.nocs.map(|x| 0.9 * x + 0.031);
            let g = obj.gradient(&field).unwrap();
            let fd = central_difference(|n| obj.value(n).unwrap(), &field, &s.mask, 1e-4);
            let err = max_rel_err(&g, &fd);
            assert!(err < 1e-4, "{terms:?}: {err}");
        }
    }

    #[test]
    fn gradient_vanishes_at_identity_minimum() {
        let s = scene();
        let obj = DepthObjective {
            image: &s.image,
            mask: &s.mask,
            k: s.k,
            sources: vec![SourceView {
                payload: &s.image,
                support: SourceSupport::none(),
                t_rel: RigidTransform::identity(),
            }],
            geometric: None,
            terms: vec![(Term::PhotometricL1, 1.0)],
            bank: None,
        };
        assert_eq!(obj.value(&s.depth).unwrap(), 0.0);
        assert!(obj
            .gradient(&s.depth)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));

        let flat = FloatGrid::filled(8, 8, 1, 3.0);
        let smooth = DepthObjective {
            terms: vec![(Term::Smoothness, 1.0)],
            ..obj
        };
        assert!(smooth
            .gradient(&flat)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn unsupported_terms_are_rejected() {
        let s = scene();
        for t in [Term::Ssim, Term::Perceptual] {
            let obj = DepthObjective {
                image: &s.image,
                mask: &s.mask,
                k: s.k,
                sources: vec![],
                geometric: None,
                terms: vec![(t, 1.0)],
                bank: None,
            };
            assert!(matches!(
                obj.gradient(&s.depth),
                Err(Error::UnsupportedTerm(_))
            ));
        }
    }

    #[test]
    fn ssim_plus_l1_reproduces_photometric_loss() {
        let s = scene();
        let src = SourceView {
            payload: &s.src_a,
            support: SourceSupport::none(),
            t_rel: s.t_a,
        };
        let alpha = 0.15;
        let obj = DepthObjective {
            image: &s.image,
            mask: &s.mask,
            k: s.k,
            sources: vec![src],
            geometric: None,
            terms: vec![(Term::Ssim, alpha), (Term::PhotometricL1, 1.0 - alpha)],
            bank: None,
        };
        let warped = src.warp(&s.depth, &s.k).unwrap();
        let direct = super::super::photometric_loss(&s.image, &warped, &s.mask, alpha).unwrap();
        assert!((obj.value(&s.depth).unwrap() - direct).abs() < 1e-12);
    }
}
