//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use canonkit::camera::{relative_pose, CloudUnits, PointCloud, SimilarityTransform, Vec3};
use canonkit::canon::{densify_to_nocs, sparse_canonicalize_detailed};
use canonkit::dataset::{read_manifest, read_view, view_path, write_dataset, Manifest, SynthConfig, ViewBundle};
use canonkit::eval::{
    chamfer, estimate_pose, keypoint_dispersion, map_curves, nocs_map_l1, round_threshold, DispersionInstance,
    PoseEstimate,
};
use canonkit::fit::{fit_depth, fit_nocs, FitConfig, FitReport, GradientMode, Triplet};
use canonkit::grid::FloatGrid;
use canonkit::io::{read_json, read_pfm, write_atomic, write_json, write_mask_png, write_pfm, write_rgb_png};
use canonkit::losses::{
    aggregate_depth_loss, aggregate_nocs_loss, DepthLossInputs, FeatureBank, NocsLossInputs, SourceSupport, SourceView,
    TermWeights,
};
use canonkit::synth::make_instance;
use canonkit::warp::WarpResult;

use crate::run::{require_exists, usage, write_run_json, CliResult, OutputLock};
use crate::svg::{self, Table};
use crate::{CanonArgs, EvalArgs, FitArgs, LossArgs, PlotArgs, StageArg, SynthArgs, WarpArgs};

/// Pose tolerance of the headline precision figure: rotation in degrees and
/// translation as a fraction of the instance extent.
const HEADLINE_ROTATION_DEG: f64 = 5.0;
const HEADLINE_TRANSLATION_FRACTION: f64 = 0.01;

fn open_dataset(root: &Path) -> CliResult<Manifest> {
    require_exists(root, "dataset")?;
    Ok(read_manifest(root)?)
}

fn check_view(m: &Manifest, seed: u64, view: usize) -> CliResult<()> {
    if !m.seeds.contains(&seed) {
        return Err(usage(format!("instance {seed} is not in the dataset")));
    }
    if view >= m.views {
        return Err(usage(format!("view {view} out of range (dataset has {} views)", m.views)));
    }
    Ok(())
}

fn load(root: &Path, m: &Manifest, seed: u64, view: usize) -> CliResult<ViewBundle> {
    check_view(m, seed, view)?;
    Ok(read_view(root, seed, view)?)
}

fn scaled(depth: &FloatGrid, factor: f64) -> FloatGrid {
    if factor == 1.0 {
        depth.clone()
    } else {
        depth.map(|d| d * factor)
    }
}

/// Source samples must land on the source foreground; with `occlusion` they
/// must also agree with the source depth.
fn source_view<'a>(target: &ViewBundle, source: &'a ViewBundle, payload: &'a FloatGrid, occlusion: bool) -> SourceView<'a> {
    SourceView {
        payload,
        support: if occlusion {
            SourceSupport::visible(&source.mask, &source.depth)
        } else {
            SourceSupport::mask(&source.mask)
        },
        t_rel: relative_pose(&target.meta.extrinsics, &source.meta.extrinsics),
    }
}

fn same_intrinsics(target: &ViewBundle, others: &[ViewBundle]) -> CliResult<()> {
    if others.iter().any(|o| o.meta.intrinsics != target.meta.intrinsics) {
        return Err(usage("views do not share intrinsics"));
    }
    Ok(())
}

/// Per-pixel channel-averaged `|a − b|` where `mask` is set, zero elsewhere.
fn residual_map(a: &FloatGrid, b: &FloatGrid, mask: &FloatGrid) -> FloatGrid {
    let c = a.channels() as f64;
    FloatGrid::from_fn(a.height(), a.width(), 1, |i, j, _| {
        if mask.at(i, j) == 0.0 {
            0.0
        } else {
            a.pixel(i, j).iter().zip(b.pixel(i, j)).map(|(x, y)| (x - y).abs()).sum::<f64>() / c
        }
    })
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    if a.instances == 0 || a.views == 0 {
        return Err(usage("instances and views must be at least 1"));
    }
    if !(a.radius_factor > 0.0 && a.radius_factor.is_finite()) {
        return Err(usage("radius factor must be positive"));
    }
    let _lock = OutputLock::acquire(&a.out)?;
    let cfg = SynthConfig {
        category: a.category,
        seeds: (a.seed..a.seed + a.instances as u64).collect(),
        views: a.views,
        width: a.res.0,
        height: a.res.1,
        radius_factor: a.radius_factor,
    };
    write_dataset(&a.out, &cfg)?;
    write_run_json(&a.out, "synth", a, &[a.out.join("manifest.json")])
}

pub fn loss(a: &LossArgs) -> CliResult<()> {
    let m = open_dataset(&a.view.data)?;
    let target = load(&a.view.data, &m, a.view.instance, a.view.target)?;
    let t = a.view.target;
    let source_ids: Vec<usize> = if a.sources.is_empty() {
        [t.checked_sub(1), Some(t + 1).filter(|&s| s < m.views)].into_iter().flatten().collect()
    } else {
        a.sources.clone()
    };
    if source_ids.is_empty() || source_ids.contains(&t) {
        return Err(usage("need at least one source view different from the target"));
    }
    let sources: Vec<ViewBundle> = source_ids
        .iter()
        .map(|&s| load(&a.view.data, &m, a.view.instance, s))
        .collect::<CliResult<_>>()?;
    same_intrinsics(&target, &sources)?;
    let depth = match &a.depth {
        Some(p) => read_pfm(p)?,
        None => target.depth.clone(),
    };
    let depth = scaled(&depth, a.depth_scale);
    let nocs = match &a.nocs {
        Some(p) => read_pfm(p)?,
        None => target.nocs.clone(),
    };
    let k = target.meta.intrinsics;
    let bank = a.perceptual.then(|| FeatureBank::new(a.seed, 3));
    let weights = TermWeights::default();
    let _lock = OutputLock::acquire(&a.out)?;

    // The photometric term scores the depth under test, so it must not drop
    // pixels merely because that depth disagrees with the source depth.
    let rgb_sources: Vec<SourceView> = sources.iter().map(|s| source_view(&target, s, &s.rgb, false)).collect();
    let depth_stage = aggregate_depth_loss(
        &DepthLossInputs {
            image: &target.rgb,
            depth: &depth,
            mask: &target.mask,
            k,
            sources: rgb_sources.clone(),
            predicted_mask: Some(&target.mask),
        },
        weights,
        a.alpha,
        bank.as_ref(),
    )?;
    let densified = densify_to_nocs(&depth, &target.mask, &k, &target.meta.t_cano)?;
    let nocs_sources: Vec<SourceView> = sources.iter().map(|s| source_view(&target, s, &s.nocs, true)).collect();
    let nocs_stage = aggregate_nocs_loss(
        &NocsLossInputs {
            nocs: &nocs,
            nocs_from_depth: &densified.map,
            image: &target.rgb,
            depth: &depth,
            mask: &target.mask,
            k,
            sources: nocs_sources.clone(),
        },
        weights,
        a.alpha,
        bank.as_ref(),
    );
    // With a depth far from the sources' no sample survives the occlusion
    // test and the geometric term is undefined.
    let (nocs_stage, nocs_stage_error) = match nocs_stage {
        Ok(b) => (Some(b), None),
        Err(canonkit::Error::EmptyMask) => (None, Some("no source sample consistent with the target depth")),
        Err(e) => return Err(e.into()),
    };

    let mut outputs = vec![a.out.join("loss.json")];
    if a.residuals {
        for (id, (rgb_src, nocs_src)) in source_ids.iter().zip(rgb_sources.iter().zip(&nocs_sources)) {
            for (name, src, reference) in [("photometric", rgb_src, &target.rgb), ("geometric", nocs_src, &nocs)] {
                let w: WarpResult = src.warp(&depth, &k)?;
                let m = target.mask.mask_and(&w.validity)?;
                let path = a.out.join(format!("residual_{name}_{id}.pfm"));
                write_pfm(&path, &residual_map(&w.synthesized, reference, &m))?;
                outputs.push(path);
            }
        }
    }
    let report = json!({
        "instance": a.view.instance,
        "target": t,
        "sources": source_ids,
        "alpha": a.alpha,
        "depth_scale": a.depth_scale,
        "depth_stage": depth_stage,
        "nocs_stage": nocs_stage,
        "nocs_stage_error": nocs_stage_error,
        "nocs_from_depth_clamped": densified.clamped,
    });
    write_json(&outputs[0], &report)?;
    write_run_json(&a.out, "loss", a, &outputs)
}

pub fn warp(a: &WarpArgs) -> CliResult<()> {
    let m = open_dataset(&a.view.data)?;
    let target = load(&a.view.data, &m, a.view.instance, a.view.target)?;
    let source = load(&a.view.data, &m, a.view.instance, a.source)?;
    same_intrinsics(&target, std::slice::from_ref(&source))?;
    let depth = scaled(&target.depth, a.depth_scale);
    let (payload, reference) = if a.nocs { (&source.nocs, &target.nocs) } else { (&source.rgb, &target.rgb) };
    let _lock = OutputLock::acquire(&a.out)?;
    let w = source_view(&target, &source, payload, a.occlusion).warp(&depth, &target.meta.intrinsics)?;
    let effective = target.mask.mask_and(&w.validity)?;
    let valid = effective.count_nonzero();
    let l1 = if valid > 0 {
        Some(residual_map(&w.synthesized, reference, &effective).masked_mean(&effective)?)
    } else {
        None
    };
    let outputs = [
        a.out.join("warped.pfm"),
        a.out.join("warped.png"),
        a.out.join("validity.png"),
        a.out.join("warp.json"),
    ];
    write_pfm(&outputs[0], &w.synthesized)?;
    write_rgb_png(&outputs[1], &w.synthesized)?;
    write_mask_png(&outputs[2], &w.validity)?;
    write_json(
        &outputs[3],
        &json!({
            "instance": a.view.instance,
            "target": a.view.target,
            "source": a.source,
            "payload": if a.nocs { "nocs" } else { "rgb" },
            "valid_pixels": w.validity.count_nonzero(),
            "valid_masked_pixels": valid,
            "masked_l1": l1,
        }),
    )?;
    write_run_json(&a.out, "warp", a, &outputs)
}

/// Per-view output of `canon`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CanonRecord {
    pub seed: u64,
    pub view: usize,
    /// Camera-to-canonical transform recovered from keypoints.
    pub t_cano: SimilarityTransform,
    pub keypoints_used: usize,
    pub exact_depth: bool,
    pub mean_residual: f64,
    pub clamped: usize,
}

fn canon_view(data: &Path, out: &Path, seed: u64, view: usize) -> canonkit::Result<CanonRecord> {
    let b = read_view(data, seed, view)?;
    let k = b.meta.intrinsics;
    let c = sparse_canonicalize_detailed(&b.meta.keypoints, &b.depth, &k)?;
    let d = densify_to_nocs(&b.depth, &b.mask, &k, &c.transform)?;
    write_pfm(&view_path(out, seed, view, "nocs_from_depth.pfm"), &d.map)?;
    let rec = CanonRecord {
        seed,
        view,
        t_cano: c.transform,
        keypoints_used: c.keypoints_used,
        exact_depth: c.exact_depth,
        mean_residual: c.mean_residual,
        clamped: d.clamped,
    };
    write_json(&view_path(out, seed, view, "t_cano.json"), &rec)?;
    Ok(rec)
}

pub fn canon(a: &CanonArgs) -> CliResult<()> {
    let m = open_dataset(&a.data)?;
    let _lock = OutputLock::acquire(&a.out)?;
    let jobs: Vec<(u64, usize)> = m.seeds.iter().flat_map(|&s| (0..m.views).map(move |v| (s, v))).collect();
    let results: Vec<((u64, usize), canonkit::Result<CanonRecord>)> = jobs
        .par_iter()
        .map(|&(s, v)| ((s, v), canon_view(&a.data, &a.out, s, v)))
        .collect();
    let mut failures = Vec::new();
    let mut succeeded = 0;
    for ((seed, view), r) in &results {
        match r {
            Ok(_) => succeeded += 1,
            Err(e @ (canonkit::Error::InsufficientKeypoints { .. } | canonkit::Error::Degenerate(_))) => {
                failures.push(json!({ "seed": seed, "view": view, "kind": e.kind(), "message": e.to_string() }))
            }
            Err(e) => return Err(canonkit::Error::InvalidArgument(format!("seed {seed} view {view}: {e}")).into()),
        }
    }
    let summary = a.out.join("canon.json");
    write_json(
        &summary,
        &json!({ "views": results.len(), "succeeded": succeeded, "failures": failures }),
    )?;
    write_run_json(&a.out, "canon", a, &[summary])
}

pub fn fit(a: &FitArgs) -> CliResult<()> {
    let m = open_dataset(&a.view.data)?;
    let t = a.view.target;
    if t == 0 || t + 1 >= m.views {
        return Err(usage(format!("target {t} needs a view on either side (dataset has {} views)", m.views)));
    }
    let views: Vec<ViewBundle> = (t - 1..=t + 1)
        .map(|v| load(&a.view.data, &m, a.view.instance, v))
        .collect::<CliResult<_>>()?;
    let triplet = Triplet::new(&views[0], &views[1], &views[2]);
    let mut cfg = match a.stage {
        StageArg::Depth => FitConfig::depth(),
        StageArg::Nocs => FitConfig::nocs(),
    };
    cfg.iterations = a.iterations;
    cfg.step_size = a.step_size.unwrap_or(cfg.step_size);
    cfg.init = a.init.into();
    cfg.noise_sigma = a.noise_sigma;
    cfg.seed = a.seed;
    cfg.log_every = a.log_every;
    cfg.backtracking = !a.no_backtracking;
    cfg.gradient = if a.finite_difference { GradientMode::FiniteDifference } else { GradientMode::Analytic };
    cfg.weights.photometric = a.w_photometric.unwrap_or(cfg.weights.photometric);
    cfg.weights.smoothness = a.w_smoothness.unwrap_or(cfg.weights.smoothness);
    cfg.weights.geometric = a.w_geometric.unwrap_or(cfg.weights.geometric);
    cfg.validate()?;
    let _lock = OutputLock::acquire(&a.out)?;
    let (name, field, report): (&str, FloatGrid, FitReport) = match a.stage {
        StageArg::Depth => {
            let (f, r) = fit_depth(&triplet, &cfg)?;
            ("depth", f, r)
        }
        StageArg::Nocs => {
            let depth = match &a.depth {
                Some(p) => read_pfm(p)?,
                None => views[1].depth.clone(),
            };
            let (f, r) = fit_nocs(&triplet, &depth, &views[1].meta.t_cano, &cfg)?;
            ("nocs", f, r)
        }
    };
    let field_path = a.out.join(format!("{name}_fit.pfm"));
    let csv_path = a.out.join(format!("{name}_report.csv"));
    let summary_path = a.out.join("fit.json");
    write_pfm(&field_path, &field)?;
    write_atomic(&csv_path, report.to_csv().as_bytes())?;
    write_json(
        &summary_path,
        &json!({
            "stage": report.stage,
            "initial_l1": report.initial_l1,
            "final_l1": report.final_l1,
            "reduction": report.reduction(),
            "iterations_run": report.iterations_run,
            "accepted_steps": report.accepted_steps,
            "stop": report.stop,
            "wall_time_s": report.wall_time_s,
            "config": cfg,
        }),
    )?;
    write_run_json(&a.out, "fit", a, &[field_path, csv_path, summary_path])
}

fn threshold_grid(max: f64, step: f64, what: &str) -> CliResult<Vec<f64>> {
    if !(step > 0.0 && max >= 0.0 && max.is_finite()) {
        return Err(usage(format!("{what} grid needs a positive step and a non-negative maximum")));
    }
    let n = (max / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| round_threshold(i as f64 * step)).collect())
}

#[derive(Debug, Clone, Serialize)]
struct ViewMetrics {
    seed: u64,
    view: usize,
    rotation_error_deg: f64,
    translation_error: f64,
    translation_error_rel_extent: f64,
    scale_error: f64,
    nocs_l1: f64,
    chamfer: f64,
}

fn nocs_cloud(map: &FloatGrid, mask: &FloatGrid) -> PointCloud {
    let pts = (0..map.height())
        .flat_map(|i| (0..map.width()).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.at(i, j) != 0.0)
        .map(|(i, j)| Vec3::from_column_slice(map.pixel(i, j)))
        .collect();
    PointCloud::new(pts, CloudUnits::Normalized)
}

fn eval_view(a: &EvalArgs, m: &Manifest, seed: u64, view: usize) -> CliResult<Option<(ViewMetrics, PoseEstimate)>> {
    let b = read_view(&a.data, seed, view)?;
    let predicted = match &a.pred {
        Some(pred) => {
            let p = view_path(pred, seed, view, "nocs_from_depth.pfm");
            if !p.exists() {
                return Ok(None);
            }
            read_pfm(&p)?
        }
        None => b.nocs.clone(),
    };
    let k = b.meta.intrinsics;
    let gt = b.meta.t_cano.inverse();
    let pose = estimate_pose(&predicted, &b.depth, &b.mask, &k, &gt)?;
    let extent = make_instance(seed, m.category).extent;
    let metrics = ViewMetrics {
        seed,
        view,
        rotation_error_deg: pose.rotation_error,
        translation_error: pose.translation_error,
        translation_error_rel_extent: pose.translation_error / extent,
        scale_error: pose.scale_error,
        nocs_l1: nocs_map_l1(&predicted, &b.nocs, &b.mask)?,
        chamfer: chamfer(&nocs_cloud(&predicted, &b.mask), &nocs_cloud(&b.nocs, &b.mask))?,
    };
    Ok(Some((metrics, pose)))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Dispersion of one keypoint over instances, using each instance's first
/// view and its ground-truth or predicted `T_cano`.
fn dispersion(a: &EvalArgs, m: &Manifest) -> CliResult<Option<canonkit::eval::DispersionReport>> {
    if m.seeds.len() < canonkit::eval::MIN_DISPERSION_INSTANCES {
        return Ok(None);
    }
    let mut instances = Vec::new();
    for &seed in &m.seeds {
        let b = read_view(&a.data, seed, 0)?;
        let kps = &b.meta.keypoints.kp3d_canonical;
        if a.keypoint >= kps.len() {
            return Err(usage(format!("keypoint {} out of range ({} keypoints)", a.keypoint, kps.len())));
        }
        let to_camera = b.meta.t_cano.inverse();
        let t_cano = match &a.pred {
            Some(pred) => {
                let p = view_path(pred, seed, 0, "t_cano.json");
                if !p.exists() {
                    continue;
                }
                read_json::<CanonRecord>(&p)?.t_cano
            }
            None => b.meta.t_cano,
        };
        instances.push(DispersionInstance {
            keypoints: kps.iter().map(|x| to_camera.apply(x)).collect(),
            t_cano,
        });
    }
    if instances.len() < canonkit::eval::MIN_DISPERSION_INSTANCES {
        return Ok(None);
    }
    Ok(Some(keypoint_dispersion(&instances, a.keypoint)?))
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let m = open_dataset(&a.data)?;
    if let Some(p) = &a.pred {
        require_exists(p, "prediction directory")?;
    }
    let rot = threshold_grid(a.rot_max, a.rot_step, "rotation")?;
    let trans = threshold_grid(a.trans_max, a.trans_step, "translation")?;
    let _lock = OutputLock::acquire(&a.out)?;
    let jobs: Vec<(u64, usize)> = m.seeds.iter().flat_map(|&s| (0..m.views).map(move |v| (s, v))).collect();
    let results: Vec<Option<(ViewMetrics, PoseEstimate)>> =
        jobs.par_iter().map(|&(s, v)| eval_view(a, &m, s, v)).collect::<CliResult<_>>()?;

    let mut per_view = Vec::new();
    let mut estimates = Vec::new();
    let mut missing = Vec::new();
    for (&(seed, view), r) in jobs.iter().zip(results) {
        match r {
            Some((metrics, pose)) => {
                per_view.push(metrics);
                estimates.push(pose);
            }
            None => {
                missing.push(json!({ "seed": seed, "view": view }));
                // A view without a prediction is a miss at every threshold.
                estimates.push(PoseEstimate {
                    transform: SimilarityTransform::identity(),
                    rotation_error: 180.0,
                    translation_error: f64::INFINITY,
                    scale_error: f64::INFINITY,
                });
            }
        }
    }
    let curves = map_curves(&estimates, &rot, &trans)?;
    let headline = per_view
        .iter()
        .filter(|v| {
            v.rotation_error_deg <= HEADLINE_ROTATION_DEG && v.translation_error_rel_extent <= HEADLINE_TRANSLATION_FRACTION
        })
        .count() as f64
        / jobs.len() as f64;
    let disp = dispersion(a, &m)?;

    let mut outputs = Vec::new();
    let mut write_csv = |name: &str, body: String| -> CliResult<()> {
        let p = a.out.join(name);
        write_atomic(&p, body.as_bytes())?;
        outputs.push(p);
        Ok(())
    };
    let curve_csv = |c: &canonkit::eval::APCurve| {
        let mut s = String::from("threshold,precision\n");
        for (t, p) in c.thresholds.iter().zip(&c.precision) {
            let _ = writeln!(s, "{t},{p:.12}");
        }
        s
    };
    write_csv("ap_rotation.csv", curve_csv(&curves.rotation))?;
    write_csv("ap_translation.csv", curve_csv(&curves.translation))?;
    if a.heatmap {
        let h = &curves.heatmap;
        let mut s = String::from("rotation_deg,translation,fraction\n");
        for (r, row) in h.rot_thresholds.iter().zip(&h.values) {
            for (t, v) in h.trans_thresholds.iter().zip(row) {
                let _ = writeln!(s, "{r},{t},{v:.12}");
            }
        }
        write_csv("heatmap.csv", s)?;
    }
    if let Some(d) = &disp {
        let mut s = String::from("axis,bin,count,phase\n");
        for (phase, hists) in [("pre", &d.histograms_pre), ("post", &d.histograms_post)] {
            for (axis, hist) in ["x", "y", "z"].iter().zip(hists.iter()) {
                for (bin, count) in hist.iter().enumerate() {
                    let _ = writeln!(s, "{axis},{bin},{count},{phase}");
                }
            }
        }
        write_csv("dispersion.csv", s)?;
    }
    let metrics_path = a.out.join("metrics.json");
    write_json(
        &metrics_path,
        &json!({
            "views": jobs.len(),
            "evaluated": per_view.len(),
            "missing": missing,
            "mean_rotation_error_deg": mean(per_view.iter().map(|v| v.rotation_error_deg)),
            "mean_translation_error": mean(per_view.iter().map(|v| v.translation_error)),
            "mean_scale_error": mean(per_view.iter().map(|v| v.scale_error)),
            "mean_nocs_l1": mean(per_view.iter().map(|v| v.nocs_l1)),
            "mean_chamfer": mean(per_view.iter().map(|v| v.chamfer)),
            "ap_5deg_1pct_extent": headline,
            "curves_monotone": curves.rotation.is_monotone() && curves.translation.is_monotone(),
            "dispersion": disp.as_ref().map(|d| json!({
                "keypoint": d.keypoint,
                "entropy_pre": d.entropy_pre,
                "entropy_post": d.entropy_post,
            })),
            "per_view": per_view,
        }),
    )?;
    outputs.push(metrics_path);
    write_run_json(&a.out, "eval", a, &outputs)
}

pub fn plot(a: &PlotArgs) -> CliResult<()> {
    require_exists(&a.input, "input CSV")?;
    let table = Table::read(&a.input)?;
    let title = a
        .title
        .clone()
        .unwrap_or_else(|| a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let body = svg::render(&table, &title)?;
    let dir: PathBuf = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let _lock = OutputLock::acquire(&dir)?;
    write_atomic(&a.out, body.as_bytes())?;
    write_run_json(&dir, "plot", a, std::slice::from_ref(&a.out))
}
