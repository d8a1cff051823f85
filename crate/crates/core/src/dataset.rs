//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<seed>/<view>.rgb.png
//! <root>/<seed>/<view>.depth.pfm
//! <root>/<seed>/<view>.nocs.pfm
//! <root>/<seed>/<view>.mask.png
//! <root>/<seed>/<view>.meta.json
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, RigidTransform, SimilarityTransform, Vec3};
use crate::canon::KeypointSet;
use crate::error::{Error, Result};
use crate::grid::FloatGrid;
use crate::io::{
    read_json, read_mask_png, read_pfm, read_rgb_png, write_json, write_mask_png, write_pfm,
    write_rgb_png,
};
use crate::synth::{make_instance, render_helix, Camera, Category, HelixParams, RenderedView};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub category: Category,
    pub seeds: Vec<u64>,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Helix radius as a multiple of each instance's extent.
    pub radius_factor: f64,
}

/// Per-view metadata stored next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub seed: u64,
    pub view: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// World-to-camera, 16 values row-major.
    pub extrinsics: RigidTransform,
    /// Camera-to-canonical ground truth.
    pub t_cano: SimilarityTransform,
    #[serde(flatten)]
    pub keypoints: KeypointSet,
}

/// A view as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub rgb: FloatGrid,
    pub depth: FloatGrid,
    pub nocs: FloatGrid,
    pub mask: FloatGrid,
    pub meta: ViewMeta,
}

impl ViewBundle {
    pub fn camera(&self) -> Camera {
        Camera {
            intrinsics: self.meta.intrinsics,
            extrinsics: self.meta.extrinsics,
        }
    }
}

/// File stem of a view inside the dataset.
pub fn view_path(root: &Path, seed: u64, view: usize, suffix: &str) -> PathBuf {
    root.join(seed.to_string()).join(format!("{view}.{suffix}"))
}

pub fn write_view(root: &Path, seed: u64, view: usize, v: &RenderedView) -> Result<()> {
    write_rgb_png(&view_path(root, seed, view, "rgb.png"), &v.rgb)?;
    write_pfm(&view_path(root, seed, view, "depth.pfm"), &v.depth)?;
    write_pfm(&view_path(root, seed, view, "nocs.pfm"), &v.nocs)?;
    write_mask_png(&view_path(root, seed, view, "mask.png"), &v.mask)?;
    let meta = ViewMeta {
        seed,
        view,
        width: v.rgb.width(),
        height: v.rgb.height(),
        intrinsics: v.camera.intrinsics,
        extrinsics: v.camera.extrinsics,
        t_cano: v.t_cano,
        keypoints: v.keypoints.clone(),
    };
    write_json(&view_path(root, seed, view, "meta.json"), &meta)
}

pub fn read_view(root: &Path, seed: u64, view: usize) -> Result<ViewBundle> {
    let missing = |suffix: &str| {
        let p = view_path(root, seed, view, suffix);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::InvalidArgument(format!("missing {}", p.display())))
        }
    };
    let meta: ViewMeta = read_json(&missing("meta.json")?)?;
    let bundle = ViewBundle {
        rgb: read_rgb_png(&missing("rgb.png")?)?,
        depth: read_pfm(&missing("depth.pfm")?)?,
        nocs: read_pfm(&missing("nocs.pfm")?)?,
        mask: read_mask_png(&missing("mask.png")?)?,
        meta,
    };
    let (h, w) = (bundle.meta.height, bundle.meta.width);
    for (name, g, c) in [
        ("rgb", &bundle.rgb, 3),
        ("depth", &bundle.depth, 1),
        ("nocs", &bundle.nocs, 3),
        ("mask", &bundle.mask, 1),
    ] {
        if g.height() != h || g.width() != w || g.channels() != c {
            return Err(Error::Format(format!(
                "{name} of seed {seed} view {view} is {}x{}x{}, expected {h}x{w}x{c}",
                g.height(),
                g.width(),
                g.channels()
            )));
        }
    }
    Ok(bundle)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&root.join("manifest.json"))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub category: Category,
    pub seeds: Vec<u64>,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub radius_factor: f64,
}

/// Renders every (seed, view) and writes the dataset under `root`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.seeds.par_iter().try_for_each(|&seed| -> Result<()> {
        let inst = make_instance(seed, cfg.category);
        let helix = HelixParams::new(cfg.radius_factor * inst.extent, Vec3::zeros());
        let views = render_helix(&inst, &helix, cfg.views, cfg.width, cfg.height)?;
        views
            .par_iter()
            .enumerate()
            .try_for_each(|(i, v)| write_view(root, seed, i, v))
    })?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        category: cfg.category,
        seeds: cfg.seeds.clone(),
        views: cfg.views,
        width: cfg.width,
        height: cfg.height,
        radius_factor: cfg.radius_factor,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
