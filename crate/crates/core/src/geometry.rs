//! Rotations, poses, the pinhole camera, back-projection and the decoupled
//! (image-plane offset, depth) translation parameterization.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, DepthImage, RgbImage};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Default number of points drawn by [`backproject`].
pub const DEFAULT_SAMPLE_COUNT: usize = 1024;

/// Unit quaternion, scalar first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    q: [f64; 4],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { q: [1.0, 0.0, 0.0, 0.0] };

    /// Normalizes `q = [w, x, y, z]`.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        if q.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("quaternion has non-finite components"));
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(Error::invalid("quaternion has zero norm"));
        }
        Ok(Self { q: [q[0] / n, q[1] / n, q[2] / n, q[3] / n] })
    }

    /// Keeps `q` exactly as given; the caller guarantees it is unit length
    /// to within round-off.
    pub(crate) fn from_unit_quaternion(q: [f64; 4]) -> Self {
        Self { q }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self { q: [c, a.x * s, a.y * s, a.z * s] }
    }

    pub fn about_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    /// Nearest rotation to a (near-)orthonormal matrix.
    pub fn from_matrix(m: &Mat3) -> Self {
        let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        Self { q: [uq.w, uq.i, uq.j, uq.k] }.renormalized()
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.q
    }

    pub fn to_matrix(&self) -> Mat3 {
        matrix_of(&self.q)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_matrix() * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let [aw, ax, ay, az] = self.q;
        let [bw, bx, by, bz] = other.q;
        Rotation {
            q: [
                aw * bw - ax * bx - ay * by - az * bz,
                aw * bx + ax * bw + ay * bz - az * by,
                aw * by - ax * bz + ay * bw + az * bx,
                aw * bz + ax * by - ay * bx + az * bw,
            ],
        }
        .renormalized()
    }

    pub fn inverse(&self) -> Rotation {
        let [w, x, y, z] = self.q;
        Rotation { q: [w, -x, -y, -z] }
    }

    /// Geodesic angle in radians between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        geodesic_angle(&self.to_matrix(), &other.to_matrix())
    }

    pub(crate) fn renormalized(self) -> Self {
        let n = self.q.iter().map(|c| c * c).sum::<f64>().sqrt();
        Self { q: self.q.map(|c| c / n) }
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Rotation angle of `a·bᵀ` in radians.
pub fn geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a * b.transpose()).trace() - 1.0) * 0.5;
    c.clamp(-1.0, 1.0).acos()
}

/// Converts a quaternion `[w, x, y, z]` to its rotation matrix (normalizing first).
pub fn quat_to_matrix(q: [f64; 4]) -> Result<Mat3> {
    Ok(Rotation::from_quaternion(q)?.to_matrix())
}

fn matrix_of(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of the rotation matrix formula w.r.t. `w, x, y, z`.
pub(crate) fn matrix_partials(q: &[f64; 4]) -> [Mat3; 4] {
    let [w, x, y, z] = *q;
    let t = 2.0;
    [
        Mat3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Mat3::new(0.0, t * y, t * z, t * y, -2.0 * t * x, -t * w, t * z, t * w, -2.0 * t * x),
        Mat3::new(-2.0 * t * y, t * x, t * w, t * x, 0.0, t * z, -t * w, t * z, -2.0 * t * y),
        Mat3::new(-2.0 * t * z, -t * w, t * x, t * w, -2.0 * t * z, t * y, t * x, t * y, 0.0),
    ]
}

/// Object pose: rotation, translation (m) and per-axis object size (m).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub scale: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3, scale: Vec3) -> Result<Self> {
        let pose = Self { rotation, translation, scale };
        pose.validate()?;
        Ok(pose)
    }

    /// Identity rotation, zero translation, and a size whose diagonal is 1.
    pub fn identity() -> Self {
        Self { rotation: Rotation::IDENTITY, translation: Vec3::zeros(), scale: Vec3::repeat(1.0 / 3f64.sqrt()) }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("pose translation is not finite"));
        }
        if !self.scale.iter().all(|c| c.is_finite() && *c > 0.0) {
            return Err(Error::invalid("pose scale components must be finite and > 0"));
        }
        Ok(())
    }

    /// Scalar similarity scale `s = ‖S‖₂` mapping the unit-diagonal canonical box to the object.
    pub fn scale_factor(&self) -> f64 {
        self.scale.norm()
    }

    /// Camera-frame position of a canonical point.
    pub fn apply(&self, p: &Vec3, apply_scale: bool) -> Vec3 {
        let s = if apply_scale { self.scale_factor() } else { 1.0 };
        self.rotation.to_matrix() * p * s + self.translation
    }
}

/// Applies `x ↦ s·R·x + T` row-wise (`s = 1` unless `apply_scale`).
pub fn transform_points(pose: &Pose, points: &[Vec3], apply_scale: bool) -> Vec<Vec3> {
    let r = pose.rotation.to_matrix();
    let s = if apply_scale { pose.scale_factor() } else { 1.0 };
    points.iter().map(|p| r * p * s + pose.translation).collect()
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|c| c.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be finite and positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid("principal point cx must lie inside the image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("principal point cy must lie inside the image"));
        }
        Ok(())
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Point at depth `z` on the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Per-point RGB in `[0, 1]`.
    pub colors: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let cloud = Self { points, colors: None };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_colors(points: Vec<Vec3>, colors: Vec<Vec3>) -> Result<Self> {
        if colors.len() != points.len() {
            return Err(Error::invalid("color count differs from point count"));
        }
        let cloud = Self { points, colors: Some(colors) };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if !self.points.iter().all(|p| p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Canonical-space coordinates index-aligned with an observed point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct NocsMap {
    pub coords: Vec<Vec3>,
}

impl NocsMap {
    /// Clamps every coordinate into `[-1, 1]`; rejects non-finite input.
    pub fn new(coords: Vec<Vec3>) -> Result<Self> {
        if !coords.iter().all(|p| p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("nocs map contains non-finite coordinates"));
        }
        Ok(Self { coords: coords.into_iter().map(|p| p.map(|c| c.clamp(-1.0, 1.0))).collect() })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Back-projected foreground samples and the pixels they came from.
#[derive(Clone, Debug)]
pub struct Backprojection {
    pub cloud: PointCloud,
    pub pixels: Vec<(usize, usize)>,
}

/// Back-projects masked depth pixels into the camera frame, drawing at most
/// `sample_count` of them uniformly without replacement.
pub fn backproject(
    depth: &DepthImage,
    k: &Intrinsics,
    mask: &BinaryMask,
    sample_count: usize,
    seed: u64,
) -> Result<PointCloud> {
    Ok(backproject_with_pixels(depth, None, k, mask, sample_count, seed)?.cloud)
}

/// Like [`backproject`], also attaching colors and the source pixel of every point.
pub fn backproject_with_pixels(
    depth: &DepthImage,
    rgb: Option<&RgbImage>,
    k: &Intrinsics,
    mask: &BinaryMask,
    sample_count: usize,
    seed: u64,
) -> Result<Backprojection> {
    if !depth.same_size(mask) || rgb.is_some_and(|c| !c.same_size(depth)) {
        return Err(Error::invalid("depth, mask and color must share a resolution"));
    }
    if sample_count == 0 {
        return Err(Error::invalid("sample_count must be at least 1"));
    }
    let mut valid: Vec<(usize, usize)> =
        depth.pixels().filter(|&(u, v, &d)| d > 0 && *mask.get(u, v)).map(|(u, v, _)| (u, v)).collect();
    if valid.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if valid.len() > sample_count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, valid.len(), sample_count).into_vec();
        picked.sort_unstable();
        valid = picked.into_iter().map(|i| valid[i]).collect();
    }
    let points = valid
        .iter()
        .map(|&(u, v)| {
            let z = *depth.get(u, v) as f64 / 1000.0;
            k.unproject(u as f64, v as f64, z)
        })
        .collect();
    let cloud = match rgb {
        Some(rgb) => {
            let colors = valid
                .iter()
                .map(|&(u, v)| {
                    let c = rgb.get(u, v);
                    Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0
                })
                .collect();
            PointCloud::with_colors(points, colors)?
        }
        None => PointCloud::new(points)?,
    };
    Ok(Backprojection { cloud, pixels: valid })
}

/// Translation from the projected object center `(o_x, o_y)` and depth `t_z`:
/// `T = t_z · K⁻¹ · (o_x, o_y, 1)ᵀ`.
pub fn decouple_translation(o_x: f64, o_y: f64, t_z: f64, k: &Intrinsics) -> Result<Vec3> {
    if !(t_z > 0.0) || !t_z.is_finite() {
        return Err(Error::InvalidDepth(t_z));
    }
    Ok(k.unproject(o_x, o_y, t_z))
}

/// Inverse of [`decouple_translation`]: `(o_x, o_y, t_z)`.
pub fn project_translation(t: &Vec3, k: &Intrinsics) -> Result<(f64, f64, f64)> {
    if !(t.z > 0.0) || !t.z.is_finite() {
        return Err(Error::InvalidDepth(t.z));
    }
    let (u, v) = k.project(t);
    Ok((u, v, t.z))
}

/// Center of the inclusive foreground bounding box, the detector-style
/// approximation of the projected object center.
pub fn mask_box_center(mask: &BinaryMask) -> Option<(f64, f64)> {
    mask.bounding_box().map(|(u0, v0, u1, v1)| ((u0 + u1) as f64 * 0.5, (v0 + v1) as f64 * 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn k640() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Rotation {
        let q = [
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        ];
        Rotation::from_quaternion(q).unwrap()
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        assert_eq!(quat_to_matrix([1.0, 0.0, 0.0, 0.0]).unwrap(), Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let h = 0.5f64.sqrt();
        let m = quat_to_matrix([h, 0.0, 0.0, h]).unwrap();
        assert_abs_diff_eq!(m * Vec3::x(), Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn double_cover() {
        let q = [0.3, -0.2, 0.9, 0.1];
        let a = quat_to_matrix(q).unwrap();
        let b = quat_to_matrix(q.map(|c| -c)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_quaternion_rejected() {
        assert!(matches!(quat_to_matrix([f64::NAN, 0.0, 0.0, 1.0]), Err(Error::InvalidInput(_))));
        assert!(quat_to_matrix([0.0; 4]).is_err());
    }

    #[test]
    fn random_quaternions_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let q = r.quaternion();
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            let m = r.to_matrix();
            assert!((m.transpose() * m - Mat3::identity()).abs().max() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matrix_round_trip_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let back = Rotation::from_matrix(&a.to_matrix());
            assert!(back.angle_to(&a) < 1e-7);
            let ab = a.compose(&b).to_matrix();
            assert!((ab - a.to_matrix() * b.to_matrix()).abs().max() < 1e-12);
            assert!(a.compose(&a.inverse()).angle_to(&Rotation::IDENTITY) < 1e-7);
        }
    }

    #[test]
    fn matrix_partials_match_finite_differences() {
        let q = [0.5, -0.3, 0.7, 0.2];
        let parts = matrix_partials(&q);
        for (i, part) in parts.iter().enumerate() {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (matrix_of(&qp) - matrix_of(&qm)) / (2.0 * h);
            assert!((fd - part).abs().max() < 1e-8, "partial {i}");
        }
    }

    #[test]
    fn backproject_principal_ray() {
        let k = k640();
        let mut depth = DepthImage::filled(640, 480, 0);
        let mut mask = BinaryMask::filled(640, 480, false);
        *depth.get_mut(320, 240) = 1000;
        *mask.get_mut(320, 240) = true;
        let cloud = backproject(&depth, &k, &mask, 1024, 0).unwrap();
        assert_eq!(cloud.points, vec![Vec3::new(0.0, 0.0, 1.0)]);
    }

    #[test]
    fn backproject_off_axis_pixel() {
        let k = k640();
        let mut depth = DepthImage::filled(640, 480, 0);
        let mut mask = BinaryMask::filled(640, 480, false);
        *depth.get_mut(420, 240) = 2000;
        *mask.get_mut(420, 240) = true;
        let cloud = backproject(&depth, &k, &mask, 1024, 0).unwrap();
        assert_abs_diff_eq!(cloud.points[0], Vec3::new(0.4, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_depth_under_mask_is_empty_foreground() {
        let depth = DepthImage::filled(8, 8, 0);
        let mask = BinaryMask::filled(8, 8, true);
        assert!(matches!(backproject(&depth, &k640_small(), &mask, 10, 0), Err(Error::EmptyForeground)));
    }

    fn k640_small() -> Intrinsics {
        Intrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap()
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let k = k640_small();
        let depth = DepthImage::filled(8, 8, 1500);
        let mask = BinaryMask::filled(8, 8, true);
        let a = backproject(&depth, &k, &mask, 20, 3).unwrap();
        let b = backproject(&depth, &k, &mask, 20, 3).unwrap();
        let c = backproject(&depth, &k, &mask, 20, 4).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut pts: Vec<_> = a.points.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        pts.sort();
        pts.dedup();
        assert_eq!(pts.len(), 20, "sampling must be without replacement");
    }

    #[test]
    fn decouple_translation_examples() {
        let k = k640();
        assert_eq!(decouple_translation(320.0, 240.0, 1.5, &k).unwrap(), Vec3::new(0.0, 0.0, 1.5));
        assert_abs_diff_eq!(
            decouple_translation(420.0, 240.0, 2.0, &k).unwrap(),
            Vec3::new(0.4, 0.0, 2.0),
            epsilon = 1e-12
        );
        assert!(matches!(decouple_translation(1.0, 1.0, 0.0, &k), Err(Error::InvalidDepth(_))));
        assert!(decouple_translation(1.0, 1.0, -2.0, &k).is_err());
    }

    #[test]
    fn transform_points_examples() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-0.5, 2.0, 3.0)];
        let mut pose =
            Pose { rotation: Rotation::IDENTITY, translation: Vec3::zeros(), scale: Vec3::new(1.0, 0.0, 0.0) };
        assert_eq!(transform_points(&pose, &pts, false), pts);
        assert_eq!(transform_points(&pose, &pts, true), pts);
        pose.translation = Vec3::new(0.0, 0.0, 1.0);
        let moved = transform_points(&pose, &pts, false);
        assert_eq!(moved[1], Vec3::new(-0.5, 2.0, 4.0));
        pose.translation = Vec3::zeros();
        pose.scale = Vec3::new(2.0, 0.0, 0.0);
        assert_eq!(transform_points(&pose, &pts[..1], true)[0], Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 2.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 2.0, 2.0, 4, 4).is_ok());
    }

    #[test]
    fn pose_validation() {
        let bad = Pose::new(Rotation::IDENTITY, Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0));
        assert!(bad.is_err());
        assert!(Pose::identity().validate().is_ok());
        assert!((Pose::identity().scale_factor() - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn backproject_then_project_recovers_pixel(u in 0usize..640, v in 0usize..480, d in 1u16..u16::MAX) {
            let k = k640();
            let p = k.unproject(u as f64, v as f64, d as f64 / 1000.0);
            let (pu, pv) = k.project(&p);
            prop_assert!((pu - u as f64).abs() < 1e-6);
            prop_assert!((pv - v as f64).abs() < 1e-6);
        }

        #[test]
        fn decouple_project_round_trip(ox in -200.0f64..800.0, oy in -200.0f64..700.0, tz in 0.05f64..20.0) {
            let k = k640();
            let t = decouple_translation(ox, oy, tz, &k).unwrap();
            let (a, b, c) = project_translation(&t, &k).unwrap();
            prop_assert!((a - ox).abs() < 1e-9 && (b - oy).abs() < 1e-9 && (c - tz).abs() < 1e-9);
        }
    }
}
