//! Pinhole cameras, rigid and similarity transforms.
//!
//! Extrinsics are world-to-camera. The camera looks down +z with +x to the
//! right and +y down, so image `u` grows with x and `v` with y.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridPoint;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Points closer to the image plane than this are treated as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Symmetric pinhole with the principal point at the image centre.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Viewing ray `K⁻¹ (u, v, 1)ᵀ` with unit z.
    #[inline]
    pub fn ray(&self, p: GridPoint) -> Vec3 {
        Vec3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }
}

impl Serialize for Intrinsics {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Intrinsics {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [fx, fy, cx, cy] = <[f64; 4]>::deserialize(d)?;
        Intrinsics::new(fx, fy, cx, cy).map_err(serde::de::Error::custom)
    }
}

/// `depth · K⁻¹ · (u, v, 1)ᵀ`.
pub fn backproject(p: GridPoint, depth: f64, k: &Intrinsics) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(k.ray(p) * depth)
}

/// Pinhole projection; returns the pixel and the camera-space depth.
pub fn project(x: &Vec3, k: &Intrinsics) -> Result<(GridPoint, f64)> {
    if x.z <= BEHIND_CAMERA_EPS {
        return Err(Error::BehindCamera(x.z));
    }
    Ok((
        GridPoint::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy),
        x.z,
    ))
}

/// Rotation plus translation, `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera centre in world coordinates (for world-to-camera extrinsics).
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-to-camera pose of a camera at `eye` looking at `target`, with
    /// `up` mapped to image-up.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::Degenerate("eye coincides with target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(up);
        if x.norm() < 1e-12 {
            return Err(Error::Degenerate("view direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// 16 row-major values of the homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::Format(format!(
                "expected 16 values, got {}",
                v.len()
            )));
        }
        let rotation = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vec3::new(v[3], v[7], v[11]);
        Self::new(rotation, translation)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().to_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        RigidTransform::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

/// Checks `RᵀR = I` and `det R = +1` to 1e-9.
pub fn check_rotation(r: &Mat3) -> Result<()> {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = r.determinant();
    if err > 1e-9 || (det - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "not a rotation (orthogonality error {err:.3e}, det {det})"
        )));
    }
    Ok(())
}

/// Rotation of `angle` radians about `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
}

/// Geodesic angle in degrees between two rotations.
pub fn rotation_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
    let cos = (((a * b.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// Target-camera to source-camera map `T_source ∘ T_target⁻¹`.
pub fn relative_pose(target: &RigidTransform, source: &RigidTransform) -> RigidTransform {
    source.compose(&target.inverse())
}

/// `x ↦ s R x + t`, stored factored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "SimilarityJson", try_from = "SimilarityJson")]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {scale}"
            )));
        }
        check_rotation(&rotation)?;
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x * self.scale + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Self {
            scale: inv_s,
            rotation: rt,
            translation: -(rt * self.translation) * inv_s,
        }
    }

    pub fn from_rigid(t: &RigidTransform) -> Self {
        Self {
            scale: 1.0,
            rotation: t.rotation,
            translation: t.translation,
        }
    }
}

/// JSON layout: rotation as three rows.
#[derive(Serialize, Deserialize)]
struct SimilarityJson {
    scale: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<SimilarityTransform> for SimilarityJson {
    fn from(t: SimilarityTransform) -> Self {
        let r = &t.rotation;
        Self {
            scale: t.scale,
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<SimilarityJson> for SimilarityTransform {
    type Error = Error;

    fn try_from(j: SimilarityJson) -> Result<Self> {
        let r = j.rotation;
        SimilarityTransform::new(
            j.scale,
            Mat3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vec3::from(j.translation),
        )
    }
}

/// Frame a point cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CloudUnits {
    #[default]
    Metric,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub units: CloudUnits,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, units: CloudUnits) -> Self {
        Self { points, units }
    }

    pub fn metric(points: Vec<Vec3>) -> Self {
        Self::new(points, CloudUnits::Metric)
    }

    pub fn normalized(points: Vec<Vec3>) -> Self {
        Self::new(points, CloudUnits::Normalized)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        Some(self.points.iter().sum::<Vec3>() / self.points.len() as f64)
    }

    /// Keeps every `step`-th point so that at most `max` remain.
    pub fn subsampled(&self, max: usize) -> PointCloud {
        if self.points.len() <= max || max == 0 {
            return self.clone();
        }
        let step = self.points.len().div_ceil(max);
        PointCloud::new(
            self.points.iter().step_by(step).copied().collect(),
            self.units,
        )
    }
}

/// Applies `x ↦ s R x + t` to every point.
pub fn apply_similarity(t: &SimilarityTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud::new(
        cloud.points.iter().map(|p| t.apply(p)).collect(),
        cloud.units,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        axis_angle(
            &(axis + Vec3::new(0.0, 0.0, 1e-3)),
            rng.random_range(-3.0..3.0),
        )
    }

    fn k() -> Intrinsics {
        Intrinsics::new(120.0, 110.0, 31.5, 23.5).unwrap()
    }

    #[test]
    fn principal_ray_backprojects_on_axis() {
        let k = k();
        let x = backproject(GridPoint::new(k.cx, k.cy), 2.0, &k).unwrap();
        assert_eq!(x, Vec3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn backproject_direct_formula() {
        let k = Intrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        let x = backproject(GridPoint::new(50.0, 0.0), 1.0, &k).unwrap();
        assert_eq!(x, Vec3::new(0.5, 0.0, 1.0));
        assert!(matches!(
            backproject(GridPoint::new(1.0, 1.0), 0.0, &k),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn project_cases() {
        let k = Intrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        let (p, d) = project(&Vec3::new(1.0, 0.0, 2.0), &k).unwrap();
        assert_eq!(p.u, 50.0);
        assert_eq!(d, 2.0);
        let k2 = self::k();
        let (p, d) = project(&Vec3::new(0.0, 0.0, 1.0), &k2).unwrap();
        assert_eq!((p.u, p.v, d), (k2.cx, k2.cy, 1.0));
        assert!(matches!(
            project(&Vec3::new(1.0, 1.0, 0.0), &k),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn relative_pose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = RigidTransform::new(random_rotation(&mut rng), Vec3::new(0.3, -1.0, 2.0)).unwrap();
        let id = relative_pose(&a, &a);
        assert!((id.rotation - Mat3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);

        let b = RigidTransform::new(random_rotation(&mut rng), Vec3::new(1.0, 0.5, -0.2)).unwrap();
        let rel = relative_pose(&RigidTransform::identity(), &b);
        assert!((rel.rotation - b.rotation).abs().max() < 1e-15);
        assert!((rel.translation - b.translation).norm() < 1e-15);

        // Point transport: a world point seen in the target camera must land
        // where the source camera sees it.
        let rel = relative_pose(&a, &b);
        for _ in 0..10 {
            let w = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let in_target = a.apply(&w);
            let in_source = b.apply(&w);
            assert!((rel.apply(&in_target) - in_source).norm() < 1e-12);
        }
    }

    #[test]
    fn similarity_cases() {
        let cloud = PointCloud::metric(vec![Vec3::new(1.0, 1.0, 1.0)]);
        assert_eq!(
            apply_similarity(&SimilarityTransform::identity(), &cloud),
            cloud
        );
        let s2 = SimilarityTransform::new(2.0, Mat3::identity(), Vec3::zeros()).unwrap();
        assert_eq!(
            apply_similarity(&s2, &cloud).points[0],
            Vec3::new(2.0, 2.0, 2.0)
        );

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t1 = SimilarityTransform::new(1.7, random_rotation(&mut rng), Vec3::new(1.0, 2.0, 3.0))
            .unwrap();
        let t2 =
            SimilarityTransform::new(0.4, random_rotation(&mut rng), Vec3::new(-1.0, 0.0, 0.5))
                .unwrap();
        let x = Vec3::new(0.2, -0.7, 1.1);
        let seq = t2.apply(&t1.apply(&x));
        let comp = t2.compose(&t1).apply(&x);
        assert!((seq - comp).norm() < 1e-12);
        assert!((t1.inverse().apply(&t1.apply(&x)) - x).norm() < 1e-12);
    }

    #[test]
    fn look_at_faces_target() {
        let eye = Vec3::new(3.0, 0.0, 1.0);
        let t = RigidTransform::look_at(&eye, &Vec3::zeros(), &Vec3::z()).unwrap();
        check_rotation(&t.rotation).unwrap();
        let c = t.apply(&Vec3::zeros());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        // World up projects upward in the image (negative v).
        let up = t.apply(&Vec3::new(0.0, 0.0, 0.1));
        assert!(up.y < c.y);
        assert!((t.center() - eye).norm() < 1e-12);
    }

    #[test]
    fn row_major_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = RigidTransform::new(random_rotation(&mut rng), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(back, t);
        let json = serde_json::to_string(&t).unwrap();
        let parsed: RigidTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, t);
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(u in -50.0f64..150.0, v in -50.0f64..150.0, d in 0.01f64..100.0) {
            let k = k();
            let x = backproject(GridPoint::new(u, v), d, &k).unwrap();
            let (p, depth) = project(&x, &k).unwrap();
            prop_assert!((p.u - u).abs() < 1e-9 && (p.v - v).abs() < 1e-9);
            prop_assert!((depth - d).abs() < 1e-9 * d.max(1.0));
            let back = backproject(p, depth, &k).unwrap();
            prop_assert!((back - x).norm() < 1e-9 * d.max(1.0));
        }

        #[test]
        fn similarity_scales_distances(seed in 0u64..1000, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SimilarityTransform::new(s, random_rotation(&mut rng), Vec3::new(1.0, -2.0, 0.5)).unwrap();
            let a = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let lhs = (t.apply(&a) - t.apply(&b)).norm();
            prop_assert!((lhs - s * (a - b).norm()).abs() < 1e-10 * s.max(1.0));
        }
    }
}
