//! Oriented 3D-box IOU and degree/centimetre pose accuracy tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{geodesic_angle, Mat3, Pose, Rotation, Vec3};
use crate::losses::SymmetrySpec;

/// Discretization of symmetry axes during evaluation.
pub const EVAL_SYMMETRY_STEPS: usize = 360;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    pub rotation: Rotation,
    /// Full side lengths.
    pub extents: Vec3,
}

impl Box3D {
    pub fn new(center: Vec3, rotation: Rotation, extents: Vec3) -> Result<Self> {
        if !extents.iter().all(|e| e.is_finite() && *e > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("box extents must be positive and finite"));
        }
        Ok(Self { center, rotation, extents })
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self { center: pose.translation, rotation: pose.rotation, extents: pose.scale }
    }

    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    /// Corners indexed by bit pattern: bit 0 → +x, bit 1 → +y, bit 2 → +z.
    pub fn corners(&self) -> [Vec3; 8] {
        let r = self.rotation.to_matrix();
        std::array::from_fn(|i| {
            let sign = |bit: usize| if i & (1 << bit) != 0 { 0.5 } else { -0.5 };
            let local = Vec3::new(sign(0) * self.extents.x, sign(1) * self.extents.y, sign(2) * self.extents.z);
            self.center + r * local
        })
    }

    /// Whether `p` lies inside (or on) the box.
    pub fn contains(&self, p: &Vec3) -> bool {
        let local = self.rotation.inverse().rotate(&(p - self.center));
        (0..3).all(|i| local[i].abs() <= 0.5 * self.extents[i])
    }

    /// The six faces as outward-wound quads.
    fn faces(&self) -> Vec<Vec<Vec3>> {
        let c = self.corners();
        [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ]
        .iter()
        .map(|f| f.iter().map(|&i| c[i]).collect())
        .collect()
    }

    /// Half-spaces `n · x ≤ d` with outward unit normals.
    fn half_spaces(&self) -> [(Vec3, f64); 6] {
        let r = self.rotation.to_matrix();
        std::array::from_fn(|i| {
            let axis = i / 2;
            let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
            let n: Vec3 = r.column(axis) * sign;
            (n, n.dot(&self.center) + 0.5 * self.extents[axis])
        })
    }
}

const PLANE_EPS: f64 = 1e-12;

/// Clips a closed convex polyhedron (list of face polygons) to `n · x ≤ d`.
fn clip_polyhedron(faces: Vec<Vec<Vec3>>, n: &Vec3, d: f64) -> Vec<Vec<Vec3>> {
    let scale = faces.iter().flatten().map(|p| p.norm()).fold(d.abs(), f64::max).max(1.0);
    let eps = PLANE_EPS * scale;
    if faces.iter().flatten().all(|p| n.dot(p) - d <= eps) {
        return faces;
    }
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cap = Vec::new();
    for face in faces {
        let mut clipped = Vec::with_capacity(face.len() + 1);
        for i in 0..face.len() {
            let a = face[i];
            let b = face[(i + 1) % face.len()];
            let da = n.dot(&a) - d;
            let db = n.dot(&b) - d;
            if da <= eps {
                clipped.push(a);
                if da.abs() <= eps {
                    cap.push(a);
                }
            }
            if (da < -eps && db > eps) || (da > eps && db < -eps) {
                let p = a + (b - a) * (da / (da - db));
                clipped.push(p);
                cap.push(p);
            }
        }
        if clipped.len() >= 3 {
            out.push(clipped);
        }
    }
    if cap.len() >= 3 {
        out.push(order_on_plane(cap, n));
    }
    out
}

/// Sorts coplanar points by angle around their centroid.
fn order_on_plane(points: Vec<Vec3>, n: &Vec3) -> Vec<Vec3> {
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    let mut keyed: Vec<(f64, Vec3)> = points
        .into_iter()
        .map(|p| {
            let r = p - centroid;
            (r.dot(&e2).atan2(r.dot(&e1)), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, p)| p).collect()
}

/// Volume of a closed convex polyhedron by fan tetrahedra around its vertex centroid.
fn polyhedron_volume(faces: &[Vec<Vec3>]) -> f64 {
    let count = faces.iter().map(Vec::len).sum::<usize>();
    if count == 0 {
        return 0.0;
    }
    let c = faces.iter().flatten().sum::<Vec3>() / count as f64;
    faces
        .iter()
        .map(|f| (1..f.len() - 1).map(|i| (f[0] - c).dot(&(f[i] - c).cross(&(f[i + 1] - c))).abs() / 6.0).sum::<f64>())
        .sum()
}

/// Volume of `a ∩ b`.
pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let mut poly = a.faces();
    for (n, d) in b.half_spaces() {
        poly = clip_polyhedron(poly, &n, d);
        if poly.len() < 4 {
            return 0.0;
        }
    }
    polyhedron_volume(&poly)
}

/// Intersection over union of two oriented boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    // Clipping the smaller box keeps the round-off symmetric in practice.
    let inter = if a.volume() <= b.volume() { intersection_volume(a, b) } else { intersection_volume(b, a) };
    let inter = inter.min(a.volume()).min(b.volume()).max(0.0);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IOU maximized over the predicted box's symmetry-equivalent orientations.
pub fn iou3d_symmetric(pred: &Box3D, gt: &Box3D, sym: &SymmetrySpec) -> f64 {
    sym.equivalents(&pred.rotation.to_matrix())
        .iter()
        .map(|r| {
            let b = Box3D { rotation: Rotation::from_matrix(r), ..*pred };
            iou3d(&b, gt)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_cm: f64,
}

/// Rotation error (degrees, symmetry-minimized) and translation error (cm).
pub fn pose_error(pred: &Pose, gt: &Pose, sym: &SymmetrySpec) -> PoseError {
    let rp = pred.rotation.to_matrix();
    let rotation =
        sym.equivalents(&gt.rotation.to_matrix()).iter().map(|r| geodesic_angle(&rp, r)).fold(f64::INFINITY, f64::min);
    PoseError {
        rotation_deg: rotation.to_degrees(),
        translation_cm: (pred.translation - gt.translation).norm() * 100.0,
    }
}

/// Smallest angle between `pred` and any `gt · g` for `g` in a finite symmetry group.
pub fn rotation_error_under_group(pred: &Rotation, gt: &Rotation, group: &[Mat3]) -> f64 {
    let rp = pred.to_matrix();
    let rg = gt.to_matrix();
    group.iter().map(|g| geodesic_angle(&rp, &(rg * g))).fold(f64::INFINITY, f64::min)
}

/// The 24 proper rotations mapping an axis-aligned cube onto itself.
pub fn cube_symmetry_group() -> Vec<Mat3> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in PERMS {
        for signs in 0..8 {
            let mut m = Mat3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub category: String,
    pub pred: Pose,
    pub gt: Pose,
    pub symmetry: SymmetrySpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds {
    pub iou: Vec<f64>,
    /// `(degrees, centimetres)` pairs.
    pub deg_cm: Vec<(f64, f64)>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { iou: vec![0.25, 0.5, 0.75], deg_cm: vec![(5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0)] }
    }
}

impl Thresholds {
    pub fn metric_names(&self) -> Vec<String> {
        self.iou
            .iter()
            .map(|t| format!("iou_{t}"))
            .chain(self.deg_cm.iter().map(|(d, c)| format!("{d}deg_{c}cm")))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub records: usize,
    /// Symmetry minimization was applied to this category's scores.
    pub symmetric: bool,
    /// Accuracy in `[0, 1]`, aligned with [`Thresholds::metric_names`].
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub metric_names: Vec<String>,
    /// Sorted by category name.
    pub categories: Vec<CategoryMetrics>,
    /// Unweighted mean over categories.
    pub mean: Vec<f64>,
}

impl MetricTable {
    pub fn value(&self, category: &str, metric: &str) -> Option<f64> {
        let col = self.metric_names.iter().position(|m| m == metric)?;
        let values = if category == "mean" {
            &self.mean
        } else {
            &self.categories.iter().find(|c| c.category == category)?.values
        };
        values.get(col).copied()
    }

    /// `category,metric,value` lines with a header; values are fractions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,metric,value\n");
        let rows = self
            .categories
            .iter()
            .map(|c| (c.category.as_str(), &c.values))
            .chain(std::iter::once(("mean", &self.mean)));
        for (name, values) in rows {
            for (m, v) in self.metric_names.iter().zip(values) {
                let _ = writeln!(out, "{name},{m},{v}");
            }
        }
        out
    }

    /// Human-readable grid, percentages; symmetric categories are marked with `*`.
    pub fn render(&self) -> String {
        let mut out = format!("{:<12}", "category");
        for m in &self.metric_names {
            let _ = write!(out, "{m:>12}");
        }
        out.push('\n');
        let mut row = |name: String, values: &[f64]| {
            let _ = write!(out, "{name:<12}");
            for v in values {
                let _ = write!(out, "{:>12.1}", v * 100.0);
            }
            out.push('\n');
        };
        for c in &self.categories {
            let name = if c.symmetric { format!("{}*", c.category) } else { c.category.clone() };
            row(name, &c.values);
        }
        row("mean".into(), &self.mean);
        out
    }
}

struct Scored {
    iou: f64,
    err: PoseError,
}

/// Per-category accuracy at every threshold plus the category mean.
pub fn evaluate(records: &[EvalRecord], thresholds: &Thresholds) -> Result<MetricTable> {
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    for r in records {
        r.pred.validate()?;
        r.gt.validate()?;
        r.symmetry.validate()?;
    }
    let scored: Vec<Scored> = records
        .par_iter()
        .map(|r| {
            let sym = r.symmetry.with_steps(EVAL_SYMMETRY_STEPS);
            Scored {
                iou: iou3d_symmetric(&Box3D::from_pose(&r.pred), &Box3D::from_pose(&r.gt), &sym),
                err: pose_error(&r.pred, &r.gt, &sym),
            }
        })
        .collect();

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.category.as_str()).or_default().push(i);
    }
    let metric_names = thresholds.metric_names();
    let categories: Vec<CategoryMetrics> = groups
        .into_iter()
        .map(|(category, idx)| {
            let n = idx.len() as f64;
            let frac = |pass: &dyn Fn(&Scored) -> bool| idx.iter().filter(|&&i| pass(&scored[i])).count() as f64 / n;
            let values = thresholds
                .iou
                .iter()
                .map(|&t| frac(&|s| s.iou >= t))
                .chain(
                    thresholds
                        .deg_cm
                        .iter()
                        .map(|&(d, c)| frac(&|s| s.err.rotation_deg <= d && s.err.translation_cm <= c)),
                )
                .collect();
            CategoryMetrics {
                category: category.to_string(),
                records: idx.len(),
                symmetric: idx.iter().any(|&i| records[i].symmetry.is_symmetric()),
                values,
            }
        })
        .collect();
    let mean = (0..metric_names.len())
        .map(|j| categories.iter().map(|c| c.values[j]).sum::<f64>() / categories.len() as f64)
        .collect();
    Ok(MetricTable { metric_names, categories, mean })
}
