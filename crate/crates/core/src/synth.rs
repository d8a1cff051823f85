//! Synthetic ground truth: parametric multi-cuboid objects, helical camera
//! paths, and a z-buffered rasterizer producing RGB, depth, NOCS, mask and
//! keypoints per view.
//!
//! The world frame is the object frame: the tight bounding box is centred at
//! the origin, +x points to the front and +z up.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Mat3, RigidTransform, SimilarityTransform, Vec3};
use crate::canon::{Keypoint2d, KeypointSet};
use crate::error::{Error, Result};
use crate::grid::FloatGrid;

/// Near plane for rasterization; triangles with a vertex closer are dropped.
pub const NEAR_PLANE: f64 = 1e-3;
/// Slack of the keypoint occlusion test, in camera depth units.
pub const VISIBILITY_SLACK: f64 = 1e-3;
/// Default angular step between consecutive helix views.
pub const HELIX_STEP: f64 = 2.0 * PI / 50.0;
pub const DEFAULT_WIDTH: usize = 160;
pub const DEFAULT_HEIGHT: usize = 120;
pub const MIN_RESOLUTION: usize = 16;

const LIGHT_DIR: [f64; 3] = [0.4, 0.3, 0.85];
const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;
const NOISE_FREQUENCY: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "car-like")]
    CarLike,
    #[serde(rename = "plane-like")]
    PlaneLike,
}

impl Category {
    pub fn name(&self) -> &'static str {
        match self {
            Category::CarLike => "car-like",
            Category::PlaneLike => "plane-like",
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car-like" | "car" => Ok(Category::CarLike),
            "plane-like" | "plane" => Ok(Category::PlaneLike),
            _ => Err(Error::InvalidArgument(format!("unknown category {s:?}"))),
        }
    }
}

/// Axis-aligned box part in the object frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub name: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Cuboid {
    fn new(name: &str, center: Vec3, size: Vec3) -> Self {
        Self {
            name: name.into(),
            center: center.into(),
            size: size.into(),
        }
    }

    fn lo(&self) -> Vec3 {
        Vec3::from(self.center) - Vec3::from(self.size) / 2.0
    }

    fn hi(&self) -> Vec3 {
        Vec3::from(self.center) + Vec3::from(self.size) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub seed: u64,
    pub category: Category,
    pub parts: Vec<Cuboid>,
    pub albedo_seed: u64,
    pub keypoint_names: Vec<String>,
}

/// Indexed triangle mesh with a per-vertex NOCS attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    pub nocs: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Part index of each triangle.
    pub part_of: Vec<usize>,
}

impl Mesh {
    /// Outward unit normal of a triangle.
    pub fn normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t].map(|i| self.positions[i as usize]);
        (b - a).cross(&(c - a)).normalize()
    }
}

/// An instance ready to render.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub spec: InstanceSpec,
    pub mesh: Mesh,
    /// Object frame to canonical unit cube.
    pub to_canonical: SimilarityTransform,
    /// Largest side of the tight bounding box, in scene units.
    pub extent: f64,
    pub keypoints_world: Vec<Vec3>,
    pub keypoints_canonical: Vec<Vec3>,
}

/// Face offsets sampled for keypoints, in units of the face half-size.
const FACE_SAMPLES: [(&str, f64, f64); 5] = [
    ("c", 0.0, 0.0),
    ("pp", 0.6, 0.6),
    ("pm", 0.6, -0.6),
    ("mp", -0.6, 0.6),
    ("mm", -0.6, -0.6),
];

fn parts_for(category: Category, rng: &mut ChaCha8Rng) -> Vec<Cuboid> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match category {
        Category::CarLike => {
            let (l, w, h) = (u(1.7, 2.0), u(0.75, 0.85), u(0.38, 0.48));
            let cabin_l = l * u(0.45, 0.55);
            let cabin_h = h * u(0.7, 0.9);
            let cabin_x = -l * u(0.08, 0.14);
            vec![
                Cuboid::new("body", Vec3::new(0.0, 0.0, h / 2.0), Vec3::new(l, w, h)),
                Cuboid::new(
                    "cabin",
                    Vec3::new(cabin_x, 0.0, h + cabin_h / 2.0),
                    Vec3::new(cabin_l, w * 0.86, cabin_h),
                ),
            ]
        }
        Category::PlaneLike => {
            let (l, d) = (u(2.2, 2.5), u(0.26, 0.32));
            let (span, chord) = (u(1.9, 2.2), u(0.38, 0.46));
            let wing_x = l * u(0.08, 0.12);
            let fin_h = u(0.4, 0.5);
            let stab_span = u(0.7, 0.8);
            let tail_x = -l / 2.0 + 0.18;
            vec![
                Cuboid::new("fuselage", Vec3::new(0.0, 0.0, d / 2.0), Vec3::new(l, d, d)),
                Cuboid::new(
                    "wing",
                    Vec3::new(wing_x, 0.0, d * 0.35),
                    Vec3::new(chord, span, 0.05),
                ),
                Cuboid::new(
                    "fin",
                    Vec3::new(tail_x, 0.0, d + fin_h / 2.0),
                    Vec3::new(0.3, 0.05, fin_h),
                ),
                Cuboid::new(
                    "stabilizer",
                    Vec3::new(tail_x, 0.0, d * 0.75),
                    Vec3::new(0.24, stab_span, 0.04),
                ),
            ]
        }
    }
}

/// Surface keypoints of a part: its 8 corners and 5 samples per face.
fn part_keypoints(part: &Cuboid) -> Vec<(String, Vec3)> {
    let (lo, hi) = (part.lo(), part.hi());
    let c = Vec3::from(part.center);
    let half = Vec3::from(part.size) / 2.0;
    let mut out = Vec::new();
    for corner in 0..8 {
        let pick = |bit: usize, a: usize| if corner >> bit & 1 == 1 { hi[a] } else { lo[a] };
        let name = format!(
            "{}_corner_{}{}{}",
            part.name,
            if corner & 1 == 1 { 'p' } else { 'm' },
            if corner >> 1 & 1 == 1 { 'p' } else { 'm' },
            if corner >> 2 & 1 == 1 { 'p' } else { 'm' },
        );
        out.push((name, Vec3::new(pick(0, 0), pick(1, 1), pick(2, 2))));
    }
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for (sign, tag) in [(-1.0, 'm'), (1.0, 'p')] {
            for (name, sa, sb) in FACE_SAMPLES {
                let mut p = c;
                p[axis] += sign * half[axis];
                p[a] += sa * half[a];
                p[b] += sb * half[b];
                out.push((
                    format!("{}_{}{}_{}", part.name, tag, ['x', 'y', 'z'][axis], name),
                    p,
                ));
            }
        }
    }
    out
}

/// Builds a deterministic instance for `(seed, category)`.
pub fn make_instance(seed: u64, category: Category) -> SynthInstance {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (category as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut parts = parts_for(category, &mut rng);
    let albedo_seed = rng.random();

    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in &parts {
        lo = lo.inf(&p.lo());
        hi = hi.sup(&p.hi());
    }
    let mid = (lo + hi) / 2.0;
    for p in &mut parts {
        p.center = (Vec3::from(p.center) - mid).into();
    }
    let extent = (hi - lo).max();
    let to_canonical = SimilarityTransform {
        scale: 1.0 / extent,
        rotation: Mat3::identity(),
        translation: Vec3::repeat(0.5),
    };

    let mut mesh = Mesh {
        positions: Vec::new(),
        nocs: Vec::new(),
        triangles: Vec::new(),
        part_of: Vec::new(),
    };
    for (pi, part) in parts.iter().enumerate() {
        add_cuboid(&mut mesh, part, pi, &to_canonical);
    }

    let (names, kps): (Vec<String>, Vec<Vec3>) = parts.iter().flat_map(part_keypoints).unzip();
    let keypoints_canonical = kps.iter().map(|p| to_canonical.apply(p)).collect();
    SynthInstance {
        spec: InstanceSpec {
            seed,
            category,
            parts,
            albedo_seed,
            keypoint_names: names,
        },
        mesh,
        to_canonical,
        extent,
        keypoints_world: kps,
        keypoints_canonical,
    }
}

fn add_cuboid(
    mesh: &mut Mesh,
    part: &Cuboid,
    part_index: usize,
    to_canonical: &SimilarityTransform,
) {
    let (lo, hi) = (part.lo(), part.hi());
    let base = mesh.positions.len() as u32;
    for corner in 0..8 {
        let p = Vec3::new(
            if corner & 1 == 1 { hi.x } else { lo.x },
            if corner & 2 == 2 { hi.y } else { lo.y },
            if corner & 4 == 4 { hi.z } else { lo.z },
        );
        mesh.positions.push(p);
        mesh.nocs.push(to_canonical.apply(&p));
    }
    // Counter-clockwise seen from outside.
    const QUADS: [[u32; 4]; 6] = [
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
    ];
    for q in QUADS {
        mesh.triangles.push([base + q[0], base + q[1], base + q[2]]);
        mesh.triangles.push([base + q[0], base + q[2], base + q[3]]);
        mesh.part_of.extend([part_index, part_index]);
    }
}

/// Helix parameters around `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HelixParams {
    /// Horizontal distance from the target axis.
    pub radius: f64,
    /// Height gained per full turn.
    pub height_span: f64,
    /// Camera height above the target at the first view.
    pub base_height: f64,
    /// Azimuth step between consecutive views, radians.
    pub step: f64,
    pub target: [f64; 3],
}

impl HelixParams {
    /// Radius 2.5× the object extent, rising from 0.2 to 0.5 radii over a turn.
    pub fn for_extent(extent: f64) -> Self {
        Self::new(2.5 * extent, Vec3::zeros())
    }

    pub fn new(radius: f64, target: Vec3) -> Self {
        Self {
            radius,
            height_span: 0.3 * radius,
            base_height: 0.2 * radius,
            step: HELIX_STEP,
            target: target.into(),
        }
    }

    pub fn eye(&self, index: usize) -> Vec3 {
        let theta = index as f64 * self.step;
        Vec3::from(self.target)
            + Vec3::new(
                self.radius * theta.cos(),
                self.radius * theta.sin(),
                self.base_height + self.height_span * theta / (2.0 * PI),
            )
    }
}

/// World-to-camera extrinsics on a helix of given radius and height gain
/// per turn around `target`, each looking at `target` with +z up.
pub fn helical_trajectory(
    n_views: usize,
    radius: f64,
    height_span: f64,
    target: Vec3,
) -> Result<Vec<RigidTransform>> {
    let mut params = HelixParams::new(radius, target);
    params.height_span = height_span;
    helix(n_views, &params)
}

pub fn helix(n_views: usize, params: &HelixParams) -> Result<Vec<RigidTransform>> {
    if n_views < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 views, got {n_views}"
        )));
    }
    if !(params.radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be positive, got {}",
            params.radius
        )));
    }
    (0..n_views)
        .map(|i| RigidTransform::look_at(&params.eye(i), &Vec3::from(params.target), &Vec3::z()))
        .collect()
}

/// Camera looking at the origin from a seeded random direction in the
/// upper hemisphere.
pub fn random_view_pose(seed: u64, radius: f64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let az: f64 = rng.random_range(0.0..2.0 * PI);
    let el: f64 = rng.random_range(0.15..1.0);
    let eye = radius * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
    RigidTransform::look_at(&eye, &Vec3::zeros(), &Vec3::z()).expect("elevation below the pole")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-to-camera.
    pub extrinsics: RigidTransform,
}

impl Camera {
    /// Default intrinsics for a `width × height` image: focal 1.2·width,
    /// centred principal point.
    pub fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
        Intrinsics::centered(width, height, 1.2 * width as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: FloatGrid,
    pub depth: FloatGrid,
    pub nocs: FloatGrid,
    pub mask: FloatGrid,
    pub camera: Camera,
    pub keypoints: KeypointSet,
    /// Camera-to-canonical similarity.
    pub t_cano: SimilarityTransform,
    /// Visible triangle per pixel.
    pub triangle_ids: Vec<Option<u32>>,
}

/// Coverage, depth and interpolated NOCS of a mesh seen by a camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub depth: FloatGrid,
    pub nocs: FloatGrid,
    pub mask: FloatGrid,
    pub triangle_ids: Vec<Option<u32>>,
}

/// A triangle projected to the image, ready for edge-function tests.
struct ScreenTriangle {
    id: u32,
    uv: [(f64, f64); 3],
    inv_z: [f64; 3],
    nocs: [Vec3; 3],
    area: f64,
    bbox: (f64, f64, f64, f64),
}

impl ScreenTriangle {
    /// Perspective-correct depth and NOCS at `(u, v)` if covered.
    #[inline]
    fn sample(&self, u: f64, v: f64) -> Option<(f64, Vec3)> {
        if u < self.bbox.0 || u > self.bbox.1 || v < self.bbox.2 || v > self.bbox.3 {
            return None;
        }
        let [p0, p1, p2] = self.uv;
        let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
        let b0 = edge(p1, p2) / self.area;
        let b1 = edge(p2, p0) / self.area;
        let b2 = edge(p0, p1) / self.area;
        if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
            return None;
        }
        let w = [b0 * self.inv_z[0], b1 * self.inv_z[1], b2 * self.inv_z[2]];
        let inv_z = w[0] + w[1] + w[2];
        let nocs = (self.nocs[0] * w[0] + self.nocs[1] * w[1] + self.nocs[2] * w[2]) / inv_z;
        Some((1.0 / inv_z, nocs))
    }
}

fn project_mesh(mesh: &Mesh, camera: &Camera) -> Result<Vec<ScreenTriangle>> {
    let k = &camera.intrinsics;
    let cam: Vec<Vec3> = mesh
        .positions
        .iter()
        .map(|p| camera.extrinsics.apply(p))
        .collect();
    let mut out = Vec::with_capacity(mesh.triangles.len());
    for (id, tri) in mesh.triangles.iter().enumerate() {
        let x = tri.map(|i| cam[i as usize]);
        if x.iter().any(|p| p.z <= NEAR_PLANE) {
            continue;
        }
        let uv = x.map(|p| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy));
        let area =
            (uv[1].0 - uv[0].0) * (uv[2].1 - uv[0].1) - (uv[1].1 - uv[0].1) * (uv[2].0 - uv[0].0);
        if area.abs() < 1e-12 {
            continue;
        }
        let us = uv.map(|p| p.0);
        let vs = uv.map(|p| p.1);
        let fold = |a: [f64; 3], f: fn(f64, f64) -> f64| a.into_iter().reduce(f).unwrap();
        out.push(ScreenTriangle {
            id: id as u32,
            uv,
            inv_z: x.map(|p| 1.0 / p.z),
            nocs: tri.map(|i| mesh.nocs[i as usize]),
            area,
            bbox: (
                fold(us, f64::min),
                fold(us, f64::max),
                fold(vs, f64::min),
                fold(vs, f64::max),
            ),
        });
    }
    if out.is_empty() {
        return Err(Error::DegenerateCamera);
    }
    Ok(out)
}

/// Z-buffered rasterization sampling each pixel at its centre `(u, v) = (col, row)`.
/// Ties in depth keep the lower triangle index.
pub fn rasterize_mesh(mesh: &Mesh, camera: &Camera, width: usize, height: usize) -> Result<Raster> {
    if width < MIN_RESOLUTION || height < MIN_RESOLUTION {
        return Err(Error::DimensionTooSmall {
            axis: if width < MIN_RESOLUTION {
                "width"
            } else {
                "height"
            },
            needed: MIN_RESOLUTION,
            got: width.min(height),
        });
    }
    let tris = project_mesh(mesh, camera)?;
    let rows: Vec<Vec<Option<(u32, f64, Vec3)>>> = (0..height)
        .into_par_iter()
        .map(|i| {
            let v = i as f64;
            let row_tris: Vec<&ScreenTriangle> = tris
                .iter()
                .filter(|t| v >= t.bbox.2 && v <= t.bbox.3)
                .collect();
            (0..width)
                .map(|j| {
                    let mut best: Option<(u32, f64, Vec3)> = None;
                    for t in &row_tris {
                        if let Some((z, n)) = t.sample(j as f64, v) {
                            if best.is_none_or(|b| z < b.1) {
                                best = Some((t.id, z, n));
                            }
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();

    let mut depth = FloatGrid::zeros(height, width, 1);
    let mut nocs = FloatGrid::filled(height, width, 3, 1.0);
    let mut mask = FloatGrid::zeros(height, width, 1);
    let mut triangle_ids = vec![None; width * height];
    for (i, row) in rows.into_iter().enumerate() {
        for (j, hit) in row.into_iter().enumerate() {
            if let Some((id, z, n)) = hit {
                depth.set(i, j, 0, z);
                mask.set(i, j, 0, 1.0);
                let px = nocs.pixel_mut(i, j);
                for c in 0..3 {
                    px[c] = n[c].clamp(0.0, 1.0);
                }
                triangle_ids[i * width + j] = Some(id);
            }
        }
    }
    Ok(Raster {
        depth,
        nocs,
        mask,
        triangle_ids,
    })
}

/// Nearest surface depth along the ray through sub-pixel `(u, v)`, using the
/// same coverage rule as the rasterizer.
fn surface_depth(tris: &[ScreenTriangle], u: f64, v: f64) -> Option<f64> {
    tris.iter()
        .filter_map(|t| t.sample(u, v).map(|s| s.0))
        .min_by(f64::total_cmp)
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (z as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth 3D value noise in `[0, 1)`.
pub fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let cell = p.map(f64::floor);
    let f = p - cell;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (x, y, z) = (cell.x as i64, cell.y as i64, cell.z as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, corner >> 1 & 1, corner >> 2 & 1);
        let w = (if dx == 1 { s.x } else { 1.0 - s.x })
            * (if dy == 1 { s.y } else { 1.0 - s.y })
            * (if dz == 1 { s.z } else { 1.0 - s.z });
        acc += w * hash3(x + dx, y + dy, z + dz, seed);
    }
    acc
}

/// Albedo keyed to canonical coordinates.
pub fn albedo(nocs: &Vec3, seed: u64) -> [f64; 3] {
    let q = nocs * NOISE_FREQUENCY;
    [0, 1, 2].map(|c| 0.15 + 0.75 * value_noise(&q, seed.wrapping_add(c as u64 * 7919)))
}

/// Lambert factor of a world-frame normal under the fixed light.
pub fn shading(normal: &Vec3) -> f64 {
    let l = Vec3::from(LIGHT_DIR).normalize();
    AMBIENT + DIFFUSE * normal.dot(&l).max(0.0)
}

fn checker(i: usize, j: usize) -> f64 {
    if (i / 8 + j / 8) % 2 == 0 {
        0.25
    } else {
        0.55
    }
}

/// Renders an instance. Keypoints are visible when they project inside the
/// image and no surface lies more than [`VISIBILITY_SLACK`] in front of them.
pub fn rasterize(
    inst: &SynthInstance,
    camera: &Camera,
    width: usize,
    height: usize,
) -> Result<RenderedView> {
    let raster = rasterize_mesh(&inst.mesh, camera, width, height)?;
    let normals: Vec<Vec3> = (0..inst.mesh.triangles.len())
        .map(|t| inst.mesh.normal(t))
        .collect();
    let mut rgb = FloatGrid::zeros(height, width, 3);
    for i in 0..height {
        for j in 0..width {
            let px = rgb.pixel_mut(i, j);
            match raster.triangle_ids[i * width + j] {
                Some(t) => {
                    let n = Vec3::from_column_slice(raster.nocs.pixel(i, j));
                    let a = albedo(&n, inst.spec.albedo_seed);
                    let s = shading(&normals[t as usize]);
                    for c in 0..3 {
                        px[c] = (a[c] * s).clamp(0.0, 1.0);
                    }
                }
                None => px.fill(checker(i, j)),
            }
        }
    }

    let tris = project_mesh(&inst.mesh, camera)?;
    let k = &camera.intrinsics;
    let kp2d = inst
        .keypoints_world
        .iter()
        .map(|p| {
            let x = camera.extrinsics.apply(p);
            if x.z <= NEAR_PLANE {
                return Keypoint2d {
                    u: -1.0,
                    v: -1.0,
                    visible: false,
                };
            }
            let (u, v) = (k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy);
            let inside =
                u >= 0.0 && u <= (width - 1) as f64 && v >= 0.0 && v <= (height - 1) as f64;
            let occluded = surface_depth(&tris, u, v).is_some_and(|z| z < x.z - VISIBILITY_SLACK);
            Keypoint2d {
                u,
                v,
                visible: inside && !occluded,
            }
        })
        .collect();

    let t_cano = inst.to_canonical.compose(&SimilarityTransform::from_rigid(
        &camera.extrinsics.inverse(),
    ));
    Ok(RenderedView {
        rgb,
        depth: raster.depth,
        nocs: raster.nocs,
        mask: raster.mask,
        camera: *camera,
        keypoints: KeypointSet::new(kp2d, inst.keypoints_canonical.clone())?,
        t_cano,
        triangle_ids: raster.triangle_ids,
    })
}

/// Renders views `0..n_views` of the default helix for an instance.
pub fn render_helix(
    inst: &SynthInstance,
    params: &HelixParams,
    n_views: usize,
    width: usize,
    height: usize,
) -> Result<Vec<RenderedView>> {
    let k = Camera::default_intrinsics(width, height);
    helix(n_views, params)?
        .into_par_iter()
        .map(|extrinsics| {
            rasterize(
                inst,
                &Camera {
                    intrinsics: k,
                    extrinsics,
                },
                width,
                height,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn instances_are_deterministic() {
        for cat in [Category::CarLike, Category::PlaneLike] {
            assert_eq!(make_instance(3, cat), make_instance(3, cat));
            assert_ne!(make_instance(3, cat).mesh, make_instance(4, cat).mesh);
        }
    }

    #[test]
    fn canonical_attributes_fill_unit_cube() {
        for cat in [Category::CarLike, Category::PlaneLike] {
            for seed in 0..5 {
                let inst = make_instance(seed, cat);
                let n = &inst.mesh.nocs;
                assert!(n.iter().all(|p| p.iter().all(|c| (0.0..=1.0).contains(c))));
                let min = n
                    .iter()
                    .flat_map(|p| p.iter())
                    .fold(1.0f64, |a, &b| a.min(b));
                let max = n
                    .iter()
                    .flat_map(|p| p.iter())
                    .fold(0.0f64, |a, &b| a.max(b));
                assert!(min.abs() < 1e-12 && (max - 1.0).abs() < 1e-12);
                assert!(inst.keypoints_canonical.len() >= 10);
            }
        }
    }

    #[test]
    fn parts_are_watertight_and_outward() {
        let inst = make_instance(1, Category::PlaneLike);
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for tri in &inst.mesh.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *edges.entry((a, b)).or_default() += 1;
                *edges.entry((b, a)).or_default() -= 1;
            }
        }
        assert!(edges.values().all(|&c| c == 0));
        for (t, tri) in inst.mesh.triangles.iter().enumerate() {
            let part = &inst.spec.parts[inst.mesh.part_of[t]];
            let centroid = tri
                .iter()
                .map(|&i| inst.mesh.positions[i as usize])
                .sum::<Vec3>()
                / 3.0;
            assert!(
                inst.mesh
                    .normal(t)
                    .dot(&(centroid - Vec3::from(part.center)))
                    > 0.0
            );
        }
    }

    #[test]
    fn keypoints_correspond_across_instances() {
        for cat in [Category::CarLike, Category::PlaneLike] {
            let a = make_instance(0, cat);
            for seed in 1..20 {
                let b = make_instance(seed, cat);
                assert_eq!(a.spec.keypoint_names, b.spec.keypoint_names);
                for (p, q) in a.keypoints_canonical.iter().zip(&b.keypoints_canonical) {
                    assert!((p - q).norm() < 0.25);
                }
            }
        }
    }

    #[test]
    fn helix_spacing() {
        let poses = helical_trajectory(50, 5.0, 1.5, Vec3::zeros()).unwrap();
        assert_eq!(poses.len(), 50);
        for w in poses.windows(2) {
            assert!((w[0].center() - w[1].center()).norm() < 0.15 * 5.0);
        }
        let two = helical_trajectory(2, 5.0, 1.5, Vec3::zeros()).unwrap();
        let (a, b) = (two[0].center(), two[1].center());
        let az = b.y.atan2(b.x) - a.y.atan2(a.x);
        assert!((az - 2.0 * PI / 50.0).abs() < 1e-12);
        assert!(helical_trajectory(1, 5.0, 1.5, Vec3::zeros()).is_err());
    }

    fn quad_mesh(z: f64) -> Mesh {
        let positions = vec![
            Vec3::new(-0.5, -0.5, z),
            Vec3::new(0.5, -0.5, z),
            Vec3::new(0.5, 0.5, z),
            Vec3::new(-0.5, 0.5, z),
        ];
        Mesh {
            nocs: positions.iter().map(|p| p.add_scalar(0.5)).collect(),
            positions,
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            part_of: vec![0, 0],
        }
    }

    #[test]
    fn fronto_parallel_quad_has_constant_depth() {
        let cam = Camera {
            intrinsics: Intrinsics::centered(32, 32, 20.0),
            extrinsics: RigidTransform::identity(),
        };
        let r = rasterize_mesh(&quad_mesh(2.0), &cam, 32, 32).unwrap();
        assert!(r.mask.count_nonzero() > 0);
        for i in 0..32 {
            for j in 0..32 {
                if r.mask.at(i, j) == 1.0 {
                    assert!((r.depth.at(i, j) - 2.0).abs() < 1e-12);
                } else {
                    assert_eq!(r.depth.at(i, j), 0.0);
                    assert_eq!(r.nocs.pixel(i, j), &[1.0, 1.0, 1.0]);
                }
            }
        }
        assert!(matches!(
            rasterize_mesh(&quad_mesh(-2.0), &cam, 32, 32),
            Err(Error::DegenerateCamera)
        ));
        assert!(rasterize_mesh(&quad_mesh(2.0), &cam, 8, 32).is_err());
    }

    #[test]
    fn rendered_view_invariants() {
        let inst = make_instance(2, Category::CarLike);
        let views = render_helix(&inst, &HelixParams::for_extent(inst.extent), 3, 64, 48).unwrap();
        for v in &views {
            assert!(v.mask.count_nonzero() > 100);
            for i in 0..48 {
                for j in 0..64 {
                    let m = v.mask.at(i, j);
                    assert_eq!(v.depth.at(i, j) > 0.0, m == 1.0);
                    let n = v.nocs.pixel(i, j);
                    if m == 0.0 {
                        assert_eq!(n, &[1.0, 1.0, 1.0]);
                        continue;
                    }
                    // Barycentric property: inside the triangle's attribute hull box.
                    let t = inst.mesh.triangles[v.triangle_ids[i * 64 + j].unwrap() as usize];
                    for c in 0..3 {
                        let vals = t.map(|k| inst.mesh.nocs[k as usize][c]);
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        assert!(n[c] >= lo - 1e-12 && n[c] <= hi + 1e-12);
                    }
                }
            }
            assert!(v.keypoints.visible_count() >= 4);
        }
        let again = render_helix(&inst, &HelixParams::for_extent(inst.extent), 3, 64, 48).unwrap();
        assert_eq!(views, again);
    }

    #[test]
    fn noise_is_smooth_and_bounded() {
        let seed = 5;
        for i in 0..200 {
            let p = Vec3::new(i as f64 * 0.037, 1.3 - i as f64 * 0.011, 0.5);
            let a = value_noise(&p, seed);
            assert!((0.0..1.0).contains(&a));
            let b = value_noise(&(p + Vec3::repeat(1e-6)), seed);
            assert!((a - b).abs() < 1e-4);
        }
    }
}
