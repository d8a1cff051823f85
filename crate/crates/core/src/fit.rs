//! Per-pixel gradient descent on a depth field (stage 1) or a NOCS field
//! (stage 2) of one target view, driven by the view-synthesis objectives.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{relative_pose, Intrinsics, SimilarityTransform};
use crate::canon::densify_to_nocs;
use crate::dataset::ViewBundle;
use crate::error::{Error, Result};
use crate::grid::FloatGrid;
use crate::losses::{
    DepthObjective, LossBreakdown, NocsObjective, SourceSupport, SourceView, Term, TermWeights,
};
use crate::synth::{Camera, RenderedView};

/// Depth is kept inside `[DEPTH_RANGE.0, DEPTH_RANGE.1]` times the mean
/// initial masked depth.
pub const DEPTH_RANGE: (f64, f64) = (0.1, 10.0);
/// A plain (non-backtracking) run fails after this many consecutive increases.
pub const DIVERGENCE_PATIENCE: usize = 50;
/// Finite-difference step of the slow gradient mode.
pub const FD_STEP: f64 = 1e-6;
const STEP_GROWTH: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Depth,
    Nocs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Mean masked ground-truth depth, or gray 0.5 for NOCS.
    Flat,
    /// Ground truth plus Gaussian noise of `noise_sigma` (relative to the
    /// mean depth for the depth stage, absolute for NOCS).
    NoisyGt,
    Gt,
    /// NOCS stage only: the map densified from depth with the given `T_cano`.
    DepthDerived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    /// Central differences of the objective value, one masked value at a time.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitWeights {
    pub photometric: f64,
    pub smoothness: f64,
    pub geometric: f64,
}

impl FitWeights {
    fn term_weights(&self) -> TermWeights {
        TermWeights {
            photometric: self.photometric,
            smoothness: self.smoothness,
            perceptual: 0.0,
            mask_bce: 0.0,
            geometric: self.geometric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub stage: Stage,
    pub iterations: usize,
    /// Step per unit of per-value gradient: the objective gradient is
    /// multiplied by the number of free values before stepping.
    pub step_size: f64,
    pub weights: FitWeights,
    pub init: InitMode,
    pub noise_sigma: f64,
    pub seed: u64,
    /// History is recorded at iteration 0, every `log_every` iterations and
    /// at the last iteration.
    pub log_every: usize,
    /// Halve the step and reject the update whenever the objective rises.
    pub backtracking: bool,
    /// Backtracking stops once the step falls below this.
    pub min_step: f64,
    pub gradient: GradientMode,
}

impl FitConfig {
    pub fn depth() -> Self {
        Self {
            stage: Stage::Depth,
            iterations: 500,
            step_size: 0.5,
            weights: FitWeights {
                photometric: 1.0,
                smoothness: 0.05,
                geometric: 0.0,
            },
            init: InitMode::Flat,
            noise_sigma: 0.05,
            seed: 0,
            log_every: 1,
            backtracking: true,
            min_step: 1e-9,
            gradient: GradientMode::Analytic,
        }
    }

    pub fn nocs() -> Self {
        Self {
            stage: Stage::Nocs,
            step_size: 0.01,
            weights: FitWeights {
                photometric: 1.0,
                smoothness: 0.05,
                geometric: 1.0,
            },
            ..Self::depth()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "iterations must be at least 1".into(),
            ));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid step size {}",
                self.step_size
            )));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "log_every must be at least 1".into(),
            ));
        }
        let w = &self.weights;
        if [w.photometric, w.smoothness, w.geometric]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(Error::InvalidArgument(
                "weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Iterations,
    StepUnderflow,
    ZeroGradient,
}

/// One logged iteration. `objective == breakdown.total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub iteration: usize,
    pub step: f64,
    pub breakdown: LossBreakdown,
    /// Masked L1 to ground truth, for reporting only.
    pub l1_to_gt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stage: Stage,
    pub history: Vec<FitRecord>,
    pub initial_l1: f64,
    pub final_l1: f64,
    pub iterations_run: usize,
    pub accepted_steps: usize,
    pub stop: StopReason,
    pub wall_time_s: f64,
}

impl FitReport {
    pub const CSV_HEADER: &'static str =
        "iteration,step,photometric,smoothness,perceptual,mask_bce,geometric,total,l1_to_gt";

    /// History as CSV. Wall time is left out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{:.12e},{},{:.12e}",
                r.iteration,
                r.step,
                r.breakdown.csv_fields(),
                r.l1_to_gt
            );
        }
        out
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.final_l1 / self.initial_l1
    }
}

/// Borrowed view data needed by the fitting stages.
#[derive(Debug, Clone, Copy)]
pub struct FitView<'a> {
    pub rgb: &'a FloatGrid,
    pub depth: &'a FloatGrid,
    pub nocs: &'a FloatGrid,
    pub mask: &'a FloatGrid,
    pub camera: Camera,
    pub t_cano: SimilarityTransform,
}

impl<'a> From<&'a RenderedView> for FitView<'a> {
    fn from(v: &'a RenderedView) -> Self {
        Self {
            rgb: &v.rgb,
            depth: &v.depth,
            nocs: &v.nocs,
            mask: &v.mask,
            camera: v.camera,
            t_cano: v.t_cano,
        }
    }
}

impl<'a> From<&'a ViewBundle> for FitView<'a> {
    fn from(v: &'a ViewBundle) -> Self {
        Self {
            rgb: &v.rgb,
            depth: &v.depth,
            nocs: &v.nocs,
            mask: &v.mask,
            camera: v.camera(),
            t_cano: v.meta.t_cano,
        }
    }
}

/// Target view in the middle, nearby views on either side.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub target: FitView<'a>,
    pub sources: [FitView<'a>; 2],
}

impl<'a> Triplet<'a> {
    pub fn new(
        prev: impl Into<FitView<'a>>,
        target: impl Into<FitView<'a>>,
        next: impl Into<FitView<'a>>,
    ) -> Self {
        Self {
            target: target.into(),
            sources: [prev.into(), next.into()],
        }
    }

    fn intrinsics(&self) -> Result<Intrinsics> {
        let k = self.target.camera.intrinsics;
        if self.sources.iter().any(|s| s.camera.intrinsics != k) {
            return Err(Error::InvalidArgument(
                "triplet views must share intrinsics".into(),
            ));
        }
        for v in self.views() {
            if v.mask.count_nonzero() == 0 {
                return Err(Error::EmptyMask);
            }
        }
        Ok(k)
    }

    fn views(&self) -> [&FitView<'a>; 3] {
        [&self.sources[0], &self.target, &self.sources[1]]
    }
}

fn masked_indices(mask: &FloatGrid) -> Vec<usize> {
    (0..mask.len_pixels())
        .filter(|&p| mask.data()[p] != 0.0)
        .collect()
}

/// Channel-averaged masked mean absolute difference.
pub fn masked_l1(a: &FloatGrid, b: &FloatGrid, mask: &FloatGrid) -> Result<f64> {
    a.ensure_same_shape(b, "masked_l1")?;
    let c = a.channels();
    let idx = masked_indices(mask);
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let sum: f64 = idx
        .iter()
        .flat_map(|&p| (0..c).map(move |ch| p * c + ch))
        .map(|q| (a.data()[q] - b.data()[q]).abs())
        .sum();
    Ok(sum / (idx.len() * c) as f64)
}

/// The objective as seen by the optimizer.
trait Problem: Sync {
    fn value(&self, x: &FloatGrid) -> Result<f64>;
    fn analytic_gradient(&self, x: &FloatGrid) -> Result<FloatGrid>;
    fn breakdown(&self, x: &FloatGrid) -> Result<LossBreakdown>;
}

struct DepthProblem<'a> {
    objective: DepthObjective<'a>,
    weights: FitWeights,
}

impl Problem for DepthProblem<'_> {
    fn value(&self, x: &FloatGrid) -> Result<f64> {
        self.objective.value(x)
    }
    fn analytic_gradient(&self, x: &FloatGrid) -> Result<FloatGrid> {
        self.objective.gradient(x)
    }
    fn breakdown(&self, x: &FloatGrid) -> Result<LossBreakdown> {
        Ok(LossBreakdown::new(
            self.weights.term_weights(),
            Some(self.objective.term_value(Term::PhotometricL1, x)?),
            Some(self.objective.term_value(Term::Smoothness, x)?),
            None,
            None,
            None,
        ))
    }
}

struct NocsProblem<'a> {
    objective: NocsObjective<'a>,
    weights: FitWeights,
}

impl Problem for NocsProblem<'_> {
    fn value(&self, x: &FloatGrid) -> Result<f64> {
        self.objective.value(x)
    }
    fn analytic_gradient(&self, x: &FloatGrid) -> Result<FloatGrid> {
        self.objective.gradient(x)
    }
    fn breakdown(&self, x: &FloatGrid) -> Result<LossBreakdown> {
        Ok(LossBreakdown::new(
            self.weights.term_weights(),
            Some(self.objective.term_value(Term::PhotometricL1, x)?),
            Some(self.objective.term_value(Term::Smoothness, x)?),
            None,
            None,
            Some(self.objective.term_value(Term::Geometric, x)?),
        ))
    }
}

fn finite_difference_gradient(
    problem: &dyn Problem,
    x: &FloatGrid,
    free: &[usize],
) -> Result<FloatGrid> {
    let partials: Vec<(usize, f64)> = free
        .par_iter()
        .map(|&q| {
            let mut y = x.clone();
            let x0 = x.data()[q];
            y.data_mut()[q] = x0 + FD_STEP;
            let fp = problem.value(&y)?;
            y.data_mut()[q] = x0 - FD_STEP;
            let fm = problem.value(&y)?;
            Ok((q, (fp - fm) / (2.0 * FD_STEP)))
        })
        .collect::<Result<_>>()?;
    let mut g = FloatGrid::zeros(x.height(), x.width(), x.channels());
    for (q, d) in partials {
        g.data_mut()[q] = d;
    }
    Ok(g)
}

/// Counts consecutive objective increases.
#[derive(Debug, Default, Clone, Copy)]
struct RiseCounter(usize);

impl RiseCounter {
    /// Returns true once [`DIVERGENCE_PATIENCE`] increases occurred in a row.
    fn observe(&mut self, before: f64, after: f64) -> bool {
        self.0 = if after > before { self.0 + 1 } else { 0 };
        self.0 >= DIVERGENCE_PATIENCE
    }
}

struct Descent<'a> {
    problem: &'a dyn Problem,
    /// Flat indices of the values being optimized.
    free: Vec<usize>,
    bounds: (f64, f64),
    truth: &'a FloatGrid,
    mask: &'a FloatGrid,
    stage: Stage,
}

impl Descent<'_> {
    fn record(&self, iteration: usize, step: f64, x: &FloatGrid) -> Result<FitRecord> {
        Ok(FitRecord {
            iteration,
            step,
            breakdown: self.problem.breakdown(x)?,
            l1_to_gt: masked_l1(x, self.truth, self.mask)?,
        })
    }

    fn run(&self, mut x: FloatGrid, cfg: &FitConfig) -> Result<(FloatGrid, FitReport)> {
        let start = Instant::now();
        let n = self.free.len() as f64;
        let (lo, hi) = self.bounds;
        let initial_l1 = masked_l1(&x, self.truth, self.mask)?;
        let mut f = self.problem.value(&x)?;
        let mut step = cfg.step_size;
        let mut history = vec![self.record(0, step, &x)?];
        let mut accepted = 0;
        let mut rises = RiseCounter::default();
        let mut stop = StopReason::Iterations;
        let mut it = 0;
        while it < cfg.iterations {
            it += 1;
            let g = match cfg.gradient {
                GradientMode::Analytic => self.problem.analytic_gradient(&x)?,
                GradientMode::FiniteDifference => {
                    finite_difference_gradient(self.problem, &x, &self.free)?
                }
            };
            if self.free.iter().all(|&q| g.data()[q] == 0.0) {
                stop = StopReason::ZeroGradient;
                history.push(self.record(it, step, &x)?);
                break;
            }
            let mut candidate = x.clone();
            for &q in &self.free {
                let v = x.data()[q] - step * n * g.data()[q];
                candidate.data_mut()[q] = v.clamp(lo, hi);
            }
            let fc = self.problem.value(&candidate)?;
            if cfg.backtracking {
                if fc <= f {
                    x = candidate;
                    f = fc;
                    accepted += 1;
                    step = (step * STEP_GROWTH).min(cfg.step_size);
                } else {
                    step *= 0.5;
                    if step < cfg.min_step {
                        stop = StopReason::StepUnderflow;
                        history.push(self.record(it, step, &x)?);
                        break;
                    }
                }
            } else {
                let diverged = rises.observe(f, fc);
                x = candidate;
                f = fc;
                accepted += 1;
                if diverged {
                    return Err(Error::Diverged(it));
                }
            }
            if it % cfg.log_every == 0 || it == cfg.iterations {
                history.push(self.record(it, step, &x)?);
            }
        }
        let final_l1 = masked_l1(&x, self.truth, self.mask)?;
        let report = FitReport {
            stage: self.stage,
            history,
            initial_l1,
            final_l1,
            iterations_run: it,
            accepted_steps: accepted,
            stop,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok((x, report))
    }
}

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))
}

fn source_views<'a>(
    triplet: &Triplet<'a>,
    payload: impl Fn(&FitView<'a>) -> &'a FloatGrid,
    support: impl Fn(&FitView<'a>) -> SourceSupport<'a>,
) -> Vec<SourceView<'a>> {
    triplet
        .sources
        .iter()
        .map(|s| SourceView {
            payload: payload(s),
            support: support(s),
            t_rel: relative_pose(&triplet.target.camera.extrinsics, &s.camera.extrinsics),
        })
        .collect()
}

/// Stage 1: optimizes the target depth under L1-photometric + smoothness.
/// Nearby views contribute their RGB and foreground mask only.
pub fn fit_depth(triplet: &Triplet, cfg: &FitConfig) -> Result<(FloatGrid, FitReport)> {
    cfg.validate()?;
    if cfg.stage != Stage::Depth {
        return Err(Error::InvalidArgument(
            "fit_depth needs a depth-stage config".into(),
        ));
    }
    let k = triplet.intrinsics()?;
    let t = &triplet.target;
    let free = masked_indices(t.mask);
    let gt_mean = free.iter().map(|&p| t.depth.data()[p]).sum::<f64>() / free.len() as f64;
    let mut init = t.depth.clone();
    match cfg.init {
        InitMode::Gt => {}
        InitMode::Flat => free.iter().for_each(|&p| init.data_mut()[p] = gt_mean),
        InitMode::NoisyGt => {
            let noise = gaussian(cfg.noise_sigma * gt_mean)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for &p in &free {
                init.data_mut()[p] += noise.sample(&mut rng);
            }
        }
        InitMode::DepthDerived => {
            return Err(Error::InvalidArgument(
                "depth-derived init applies to the NOCS stage".into(),
            ))
        }
    }
    let scale = free.iter().map(|&p| init.data()[p]).sum::<f64>() / free.len() as f64;
    let bounds = (DEPTH_RANGE.0 * scale, DEPTH_RANGE.1 * scale);
    for &p in &free {
        init.data_mut()[p] = init.data()[p].clamp(bounds.0, bounds.1);
    }
    let problem = DepthProblem {
        objective: DepthObjective {
            image: t.rgb,
            mask: t.mask,
            k,
            sources: source_views(triplet, |s| s.rgb, |s| SourceSupport::mask(s.mask)),
            geometric: None,
            terms: vec![
                (Term::PhotometricL1, cfg.weights.photometric),
                (Term::Smoothness, cfg.weights.smoothness),
            ],
            bank: None,
        },
        weights: cfg.weights,
    };
    Descent {
        problem: &problem,
        free,
        bounds,
        truth: t.depth,
        mask: t.mask,
        stage: Stage::Depth,
    }
    .run(init, cfg)
}

/// Stage 2: optimizes the target NOCS map under the geometric term, L1 to
/// the depth-derived map and smoothness, with `depth` frozen.
///
/// `t_cano` maps the target camera frame to canonical space. Nearby NOCS
/// maps are densified from each nearby view's own depth with the matching
/// transform.
pub fn fit_nocs(
    triplet: &Triplet,
    depth: &FloatGrid,
    t_cano: &SimilarityTransform,
    cfg: &FitConfig,
) -> Result<(FloatGrid, FitReport)> {
    cfg.validate()?;
    if cfg.stage != Stage::Nocs {
        return Err(Error::InvalidArgument(
            "fit_nocs needs a NOCS-stage config".into(),
        ));
    }
    let k = triplet.intrinsics()?;
    let t = &triplet.target;
    let nocs_from_depth = densify_to_nocs(depth, t.mask, &k, t_cano)?.map;
    let source_nocs: Vec<FloatGrid> = triplet
        .sources
        .iter()
        .map(|s| {
            let to_target = relative_pose(&s.camera.extrinsics, &t.camera.extrinsics);
            let src_cano = t_cano.compose(&SimilarityTransform::from_rigid(&to_target));
            densify_to_nocs(s.depth, s.mask, &k, &src_cano).map(|d| d.map)
        })
        .collect::<Result<_>>()?;
    // A nearby view with no consistent overlap drops out of the geometric term.
    let mut sources = Vec::new();
    for (s, payload) in triplet.sources.iter().zip(&source_nocs) {
        let view = SourceView {
            payload,
            support: SourceSupport::visible(s.mask, s.depth),
            t_rel: relative_pose(&t.camera.extrinsics, &s.camera.extrinsics),
        };
        if t.mask
            .mask_and(&view.warp(depth, &k)?.validity)?
            .count_nonzero()
            > 0
        {
            sources.push(view);
        }
    }
    let problem = NocsProblem {
        objective: NocsObjective::new(
            t.rgb,
            t.mask,
            depth,
            &k,
            &nocs_from_depth,
            &sources,
            vec![
                (Term::Geometric, cfg.weights.geometric),
                (Term::PhotometricL1, cfg.weights.photometric),
                (Term::Smoothness, cfg.weights.smoothness),
            ],
            None,
        )?,
        weights: cfg.weights,
    };
    let free: Vec<usize> = masked_indices(t.mask)
        .into_iter()
        .flat_map(|p| (0..3).map(move |c| p * 3 + c))
        .collect();
    let mut init = nocs_from_depth.clone();
    match cfg.init {
        InitMode::DepthDerived => {}
        InitMode::Flat => free.iter().for_each(|&q| init.data_mut()[q] = 0.5),
        InitMode::Gt => free
            .iter()
            .for_each(|&q| init.data_mut()[q] = t.nocs.data()[q]),
        InitMode::NoisyGt => {
            let noise = gaussian(cfg.noise_sigma)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for &q in &free {
                init.data_mut()[q] = (t.nocs.data()[q] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    Descent {
        problem: &problem,
        free,
        bounds: (0.0, 1.0),
        truth: t.nocs,
        mask: t.mask,
        stage: Stage::Nocs,
    }
    .run(init, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Mat3, RigidTransform, Vec3};

    const PLANE_Z: f64 = 2.0;

    struct OwnedView {
        rgb: FloatGrid,
        depth: FloatGrid,
        nocs: FloatGrid,
        mask: FloatGrid,
        camera: Camera,
        t_cano: SimilarityTransform,
    }

    impl OwnedView {
        fn view(&self) -> FitView<'_> {
            FitView {
                rgb: &self.rgb,
                depth: &self.depth,
                nocs: &self.nocs,
                mask: &self.mask,
                camera: self.camera,
                t_cano: self.t_cano,
            }
        }
    }

    fn texture(x: &Vec3) -> [f64; 3] {
        [
            0.5 + 0.3 * (3.0 * x.x + 1.3 * x.y).sin(),
            0.5 + 0.25 * (2.1 * x.x - 2.7 * x.y).cos(),
            0.4 + 0.2 * (4.0 * x.y + x.x).sin(),
        ]
    }

    fn world_to_canonical() -> SimilarityTransform {
        SimilarityTransform::new(0.2, Mat3::identity(), Vec3::new(0.78, 0.78, 0.2)).unwrap()
    }

    /// Textured plane `z = PLANE_Z` seen by a camera shifted along x.
    fn plane_view(shift: f64, n: usize) -> OwnedView {
        let k = Intrinsics::centered(n, n, n as f64);
        let extrinsics = RigidTransform::new(Mat3::identity(), Vec3::new(shift, 0.0, 0.0)).unwrap();
        let world = |i: usize, j: usize| {
            let r = k.ray(crate::grid::GridPoint::new(j as f64, i as f64));
            r * (PLANE_Z / r.z) - extrinsics.translation
        };
        let cano = world_to_canonical();
        OwnedView {
            rgb: FloatGrid::from_fn(n, n, 3, |i, j, c| texture(&world(i, j))[c]),
            depth: FloatGrid::filled(n, n, 1, PLANE_Z),
            nocs: FloatGrid::from_fn(n, n, 3, |i, j, c| cano.apply(&world(i, j))[c]),
            mask: FloatGrid::filled(n, n, 1, 1.0),
            camera: Camera {
                intrinsics: k,
                extrinsics,
            },
            t_cano: cano.compose(&SimilarityTransform::from_rigid(&extrinsics.inverse())),
        }
    }

    fn scene(n: usize) -> [OwnedView; 3] {
        [
            plane_view(0.15, n),
            plane_view(0.0, n),
            plane_view(-0.15, n),
        ]
    }

    fn triplet(s: &[OwnedView; 3]) -> Triplet<'_> {
        Triplet {
            target: s[1].view(),
            sources: [s[0].view(), s[2].view()],
        }
    }

    fn max_abs_diff(a: &FloatGrid, b: &FloatGrid) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn gt_depth_is_a_fixed_point() {
        let s = scene(8);
        let cfg = FitConfig {
            init: InitMode::Gt,
            iterations: 50,
            ..FitConfig::depth()
        };
        let (depth, report) = fit_depth(&triplet(&s), &cfg).unwrap();
        assert_eq!(report.initial_l1, 0.0);
        assert!(report.final_l1 < 1e-3 * PLANE_Z, "{}", report.final_l1);
        assert!(max_abs_diff(&depth, &s[1].depth) < 1e-2);
    }

    #[test]
    fn zero_step_leaves_field_unchanged() {
        let s = scene(8);
        let cfg = FitConfig {
            init: InitMode::NoisyGt,
            step_size: 0.0,
            iterations: 10,
            ..FitConfig::depth()
        };
        let (a, ra) = fit_depth(&triplet(&s), &cfg).unwrap();
        let (b, _) = fit_depth(
            &triplet(&s),
            &FitConfig {
                iterations: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.initial_l1, ra.final_l1);
    }

    #[test]
    fn smoothness_alone_keeps_gray_nocs() {
        let s = scene(8);
        let cfg = FitConfig {
            weights: FitWeights {
                photometric: 0.0,
                smoothness: 1.0,
                geometric: 0.0,
            },
            ..FitConfig::nocs()
        };
        let (nocs, report) = fit_nocs(&triplet(&s), &s[1].depth, &s[1].t_cano, &cfg).unwrap();
        assert!(nocs.data().iter().all(|&x| x == 0.5));
        assert_eq!(report.stop, StopReason::ZeroGradient);
    }

    #[test]
    fn backtracking_objective_is_monotone() {
        let s = scene(8);
        for cfg in [
            FitConfig {
                init: InitMode::NoisyGt,
                noise_sigma: 0.1,
                step_size: 5.0,
                iterations: 60,
                ..FitConfig::depth()
            },
            FitConfig {
                step_size: 0.5,
                iterations: 60,
                ..FitConfig::nocs()
            },
        ] {
            let report = match cfg.stage {
                Stage::Depth => fit_depth(&triplet(&s), &cfg).unwrap().1,
                Stage::Nocs => {
                    fit_nocs(&triplet(&s), &s[1].depth, &s[1].t_cano, &cfg)
                        .unwrap()
                        .1
                }
            };
            assert_eq!(report.history.len(), report.iterations_run + 1);
            for w in report.history.windows(2) {
                assert!(w[1].breakdown.total <= w[0].breakdown.total);
            }
            let last = report.history.last().unwrap();
            assert!(last.breakdown.total < report.history[0].breakdown.total);
        }
    }

    fn assert_same_trajectory(a: &FitReport, b: &FitReport, fa: &FloatGrid, fb: &FloatGrid) {
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert!(
                (x.breakdown.total - y.breakdown.total).abs() < 1e-6,
                "{} vs {}",
                x.breakdown.total,
                y.breakdown.total
            );
            assert!((x.l1_to_gt - y.l1_to_gt).abs() < 1e-6);
        }
        assert!(max_abs_diff(fa, fb) < 1e-6, "{}", max_abs_diff(fa, fb));
    }

    #[test]
    fn finite_difference_mode_tracks_analytic_depth() {
        let s = scene(8);
        let cfg = FitConfig {
            init: InitMode::NoisyGt,
            noise_sigma: 0.05,
            step_size: 0.05,
            iterations: 20,
            backtracking: false,
            ..FitConfig::depth()
        };
        let (fa, ra) = fit_depth(&triplet(&s), &cfg).unwrap();
        let fd = FitConfig {
            gradient: GradientMode::FiniteDifference,
            ..cfg
        };
        let (fb, rb) = fit_depth(&triplet(&s), &fd).unwrap();
        assert_eq!(ra.iterations_run, 20);
        assert!(max_abs_diff(&fa, &s[1].depth) > 1e-3);
        assert_same_trajectory(&ra, &rb, &fa, &fb);
    }

    #[test]
    fn finite_difference_mode_tracks_analytic_nocs() {
        let s = scene(8);
        let cfg = FitConfig {
            step_size: 5e-4,
            iterations: 20,
            backtracking: false,
            weights: FitWeights {
                photometric: 1.0,
                smoothness: 0.0,
                geometric: 1.0,
            },
            ..FitConfig::nocs()
        };
        let (fa, ra) = fit_nocs(&triplet(&s), &s[1].depth, &s[1].t_cano, &cfg).unwrap();
        let fd = FitConfig {
            gradient: GradientMode::FiniteDifference,
            ..cfg
        };
        let (fb, rb) = fit_nocs(&triplet(&s), &s[1].depth, &s[1].t_cano, &fd).unwrap();
        assert!(ra.final_l1 < ra.initial_l1);
        assert_same_trajectory(&ra, &rb, &fa, &fb);
    }

    #[test]
    fn nocs_stage_does_not_touch_depth() {
        let s = scene(8);
        for factor in [1.01, 1.2] {
            let depth = s[1].depth.map(|d| d * factor);
            let before = depth.clone();
            let (nocs, report) =
                fit_nocs(&triplet(&s), &depth, &s[1].t_cano, &FitConfig::nocs()).unwrap();
            assert_eq!(depth.data(), before.data());
            assert!(report.final_l1 < report.initial_l1);
            assert!(nocs.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn nocs_from_depth_init_stays_close_to_truth() {
        let s = scene(8);
        let cfg = FitConfig {
            init: InitMode::DepthDerived,
            ..FitConfig::nocs()
        };
        let (_, report) = fit_nocs(&triplet(&s), &s[1].depth, &s[1].t_cano, &cfg).unwrap();
        assert!(report.initial_l1 < 1e-12);
        assert!(report.final_l1 < 2e-3);
    }

    #[test]
    fn csv_has_one_row_per_logged_iteration() {
        let s = scene(8);
        let cfg = FitConfig {
            log_every: 4,
            iterations: 10,
            backtracking: false,
            step_size: 0.01,
            ..FitConfig::depth()
        };
        let (_, report) = fit_depth(&triplet(&s), &cfg).unwrap();
        let iters: Vec<usize> = report.history.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![0, 4, 8, 10]);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], FitReport::CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].contains(",NA,NA,NA,"));
        let (_, again) = fit_depth(&triplet(&s), &cfg).unwrap();
        assert_eq!(again.to_csv(), csv);
    }

    #[test]
    fn rise_counter_trips_after_patience() {
        let mut c = RiseCounter::default();
        for i in 0..DIVERGENCE_PATIENCE - 1 {
            assert!(!c.observe(i as f64, i as f64 + 1.0));
        }
        assert!(!c.observe(5.0, 5.0));
        for i in 0..DIVERGENCE_PATIENCE - 1 {
            assert!(!c.observe(i as f64, i as f64 + 1.0));
        }
        assert!(c.observe(0.0, 1.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let s = scene(8);
        let t = triplet(&s);
        let bad = [
            FitConfig {
                iterations: 0,
                ..FitConfig::depth()
            },
            FitConfig {
                step_size: -1.0,
                ..FitConfig::depth()
            },
            FitConfig::nocs(),
            FitConfig {
                init: InitMode::DepthDerived,
                ..FitConfig::depth()
            },
        ];
        for cfg in bad {
            assert!(fit_depth(&t, &cfg).is_err());
        }
        assert!(fit_nocs(&t, &s[1].depth, &s[1].t_cano, &FitConfig::depth()).is_err());
        let empty = FloatGrid::zeros(8, 8, 1);
        let mut tv = t;
        tv.target.mask = &empty;
        assert!(matches!(
            fit_depth(&tv, &FitConfig::depth()),
            Err(Error::EmptyMask)
        ));
    }
}
