//! Categorical shape priors and per-instance vertex deformations.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};
use crate::mesh::{parse_obj, Mesh};

pub const PRIOR_VERTEX_COUNT: usize = 1024;

/// Canonical priors must fit a bounding-box diagonal of `1 + CANONICAL_SLACK`.
pub const CANONICAL_SLACK: f64 = 1e-3;

/// Per-vertex offsets, index-aligned with a prior mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    pub deltas: Vec<Vec3>,
}

impl Deformation {
    pub fn zeros(n: usize) -> Self {
        Self { deltas: vec![Vec3::zeros(); n] }
    }

    pub fn new(deltas: Vec<Vec3>) -> Result<Self> {
        if !deltas.iter().all(|d| d.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("deformation has non-finite offsets"));
        }
        Ok(Self { deltas })
    }

    /// Offsets that carry `from` onto `to` vertex-wise.
    pub fn between(from: &Mesh, to: &Mesh) -> Result<Self> {
        if from.vertices.len() != to.vertices.len() {
            return Err(Error::invalid("meshes differ in vertex count"));
        }
        Self::new(from.vertices.iter().zip(&to.vertices).map(|(a, b)| b - a).collect())
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn mean_magnitude(&self) -> f64 {
        crate::losses::deformation_reg(&self.deltas)
    }
}

/// `M_deform = M + M_delta`; faces are shared with the prior.
pub fn apply_deformation(prior: &Mesh, delta: &Deformation) -> Result<Mesh> {
    if prior.vertices.len() != delta.len() {
        return Err(Error::invalid(format!(
            "deformation has {} offsets for {} vertices",
            delta.len(),
            prior.vertices.len()
        )));
    }
    Ok(Mesh {
        vertices: prior.vertices.iter().zip(&delta.deltas).map(|(v, d)| v + d).collect(),
        faces: prior.faces.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorCheck {
    /// `None` skips the vertex-count check (test assets).
    pub expected_vertices: Option<usize>,
    pub tolerance: usize,
}

impl Default for PriorCheck {
    fn default() -> Self {
        Self { expected_vertices: Some(PRIOR_VERTEX_COUNT), tolerance: 0 }
    }
}

impl PriorCheck {
    pub fn relaxed() -> Self {
        Self { expected_vertices: None, tolerance: 0 }
    }
}

pub fn validate_prior(mesh: &Mesh, check: &PriorCheck) -> Result<()> {
    if let Some(expected) = check.expected_vertices {
        let got = mesh.vertices.len();
        if got.abs_diff(expected) > check.tolerance {
            return Err(Error::VertexCount { expected, tolerance: check.tolerance, got });
        }
    }
    let diagonal = mesh.bbox_diagonal();
    if diagonal > 1.0 + CANONICAL_SLACK {
        return Err(Error::OutOfCanonicalBounds { diagonal });
    }
    Ok(())
}

/// `<dir>/<category>.obj`
pub fn prior_path(dir: &Path, category: &str) -> PathBuf {
    dir.join(format!("{category}.obj"))
}

/// Loads and validates the prior for `category` from a priors directory.
pub fn load_prior(category: &str, dir: &Path, check: &PriorCheck) -> Result<Mesh> {
    let path = prior_path(dir, category);
    load_prior_file(&path, check)
}

pub fn load_prior_file(path: &Path, check: &PriorCheck) -> Result<Mesh> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    let mesh = parse_obj(&text)?;
    validate_prior(&mesh, check)?;
    Ok(mesh)
}

/// Procedurally generated category priors with exactly [`PRIOR_VERTEX_COUNT`]
/// vertices, canonical (centered, unit bounding-box diagonal, +y up).
pub mod procedural {
    use super::*;
    use std::f64::consts::{PI, TAU};

    pub const CATEGORIES: [&str; 5] = ["bottle", "bowl", "camera", "laptop", "mug"];

    const SEGMENTS: usize = 32;

    /// Ring-structured surface: `rings × segments` vertices from `f(ring, angle)`,
    /// wrapped around the angle and optionally across the rings.
    fn ring_surface(rings: usize, segments: usize, wrap_rings: bool, f: impl Fn(usize, f64) -> Vec3) -> Mesh {
        let mut vertices = Vec::with_capacity(rings * segments);
        for i in 0..rings {
            for j in 0..segments {
                vertices.push(f(i, TAU * j as f64 / segments as f64));
            }
        }
        let at = |i: usize, j: usize| (i % rings) * segments + j % segments;
        let bands = if wrap_rings { rings } else { rings - 1 };
        let mut faces = Vec::with_capacity(bands * segments * 2);
        for i in 0..bands {
            for j in 0..segments {
                let (a, b, c, d) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            }
        }
        Mesh { vertices, faces }
    }

    /// Surface of revolution about +y through profile points `(radius, height)`.
    fn lathe(profile: &[(f64, f64)]) -> Mesh {
        ring_surface(profile.len(), SEGMENTS, false, |i, phi| {
            let (r, y) = profile[i];
            Vec3::new(r * phi.cos(), y, -r * phi.sin())
        })
    }

    fn sgn_pow(x: f64, e: f64) -> f64 {
        x.signum() * x.abs().powf(e)
    }

    /// Rounded box (superellipsoid) with half-extents `half`.
    fn rounded_box(rings: usize, half: Vec3) -> Mesh {
        let eps = 0.15;
        ring_surface(rings, SEGMENTS, false, |i, phi| {
            let theta = PI * i as f64 / (rings - 1) as f64;
            Vec3::new(
                half.x * sgn_pow(theta.sin(), eps) * sgn_pow(phi.cos(), eps),
                half.y * sgn_pow(theta.cos(), eps),
                -half.z * sgn_pow(theta.sin(), eps) * sgn_pow(phi.sin(), eps),
            )
        })
    }

    fn merge(parts: Vec<Mesh>) -> Mesh {
        let mut out = Mesh { vertices: Vec::new(), faces: Vec::new() };
        for part in parts {
            let base = out.vertices.len();
            out.faces.extend(part.faces.iter().map(|f| f.map(|i| i + base)));
            out.vertices.extend(part.vertices);
        }
        out
    }

    fn transform(mut m: Mesh, r: &Rotation, t: Vec3) -> Mesh {
        let rm = r.to_matrix();
        for v in &mut m.vertices {
            *v = rm * *v + t;
        }
        m
    }

    /// Profile from `(radius, height)` control points, resampled to `n` points
    /// by arc length and closed to the axis at both ends.
    fn resample(ctrl: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
        let seg_len: Vec<f64> =
            ctrl.windows(2).map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt()).collect();
        let total: f64 = seg_len.iter().sum();
        (0..n)
            .map(|i| {
                let mut s = total * i as f64 / (n - 1) as f64;
                for (k, &l) in seg_len.iter().enumerate() {
                    if s <= l || k == seg_len.len() - 1 {
                        let t = if l > 0.0 { (s / l).min(1.0) } else { 0.0 };
                        let (a, b) = (ctrl[k], ctrl[k + 1]);
                        return (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
                    }
                    s -= l;
                }
                *ctrl.last().unwrap()
            })
            .collect()
    }

    fn bottle() -> Mesh {
        let ctrl = [
            (0.0, 0.0),
            (0.3, 0.0),
            (0.32, 0.05),
            (0.32, 0.55),
            (0.25, 0.7),
            (0.12, 0.8),
            (0.11, 0.95),
            (0.12, 1.0),
            (0.0, 1.0),
        ];
        lathe(&resample(&ctrl, 32))
    }

    fn bowl() -> Mesh {
        // Outer wall up to the rim, then back down the inside.
        let mut ctrl = vec![(0.0, 0.0), (0.2, 0.0)];
        for i in 0..=8 {
            let a = PI / 2.0 * i as f64 / 8.0;
            ctrl.push((0.2 + 0.3 * a.sin(), 0.35 * (1.0 - a.cos())));
        }
        ctrl.push((0.47, 0.36));
        for i in (0..=8).rev() {
            let a = PI / 2.0 * i as f64 / 8.0;
            ctrl.push((0.18 + 0.28 * a.sin(), 0.04 + 0.3 * (1.0 - a.cos())));
        }
        ctrl.push((0.0, 0.04));
        lathe(&resample(&ctrl, 32))
    }

    fn mug() -> Mesh {
        let ctrl = [(0.0, 0.0), (0.3, 0.0), (0.3, 0.8), (0.27, 0.8), (0.27, 0.05), (0.0, 0.05)];
        let body = lathe(&resample(&ctrl, 28));
        // Handle: torus arc on the +x side, 4 tube rings x 32 sweep samples.
        let handle = ring_surface(32, 4, true, |i, tube| {
            let sweep = -PI / 2.0 + PI * i as f64 / 31.0;
            let (big, small) = (0.2, 0.04);
            let center = Vec3::new(0.3 + big * sweep.cos() * 0.8, 0.4 + big * sweep.sin(), 0.0);
            let radial = Vec3::new(sweep.cos(), sweep.sin(), 0.0);
            center + radial * (small * tube.cos()) + Vec3::z() * (small * tube.sin())
        });
        merge(vec![body, handle])
    }

    fn laptop() -> Mesh {
        let base = rounded_box(16, Vec3::new(0.5, 0.02, 0.35));
        let screen = rounded_box(16, Vec3::new(0.5, 0.35, 0.015));
        let hinge = Rotation::from_axis_angle(&Vec3::x(), -0.2);
        let screen = transform(screen, &hinge, Vec3::new(0.0, 0.02, -0.35) + hinge.rotate(&Vec3::new(0.0, 0.35, 0.0)));
        merge(vec![base, screen])
    }

    fn camera() -> Mesh {
        let body = rounded_box(24, Vec3::new(0.45, 0.3, 0.2));
        let ctrl = [(0.0, 0.0), (0.18, 0.0), (0.18, 0.25), (0.15, 0.3), (0.0, 0.3)];
        let lens = lathe(&resample(&ctrl, 8));
        let lens = transform(lens, &Rotation::from_axis_angle(&Vec3::x(), PI / 2.0), Vec3::new(0.0, 0.0, 0.15));
        merge(vec![body, lens])
    }

    /// Canonical prior for a known category.
    pub fn prior(category: &str) -> Option<Mesh> {
        let mut mesh = match category {
            "bottle" => bottle(),
            "bowl" => bowl(),
            "camera" => camera(),
            "laptop" => laptop(),
            "mug" => mug(),
            _ => return None,
        };
        mesh.normalize_to_canonical();
        mesh.drop_degenerate_faces();
        Some(mesh)
    }

    /// Unit-diagonal cube (8 vertices) used as a minimal test prior.
    pub fn unit_cube() -> Mesh {
        Mesh::cube(1.0 / 3f64.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::chamfer;
    use crate::mesh::write_obj;

    #[test]
    fn zero_and_uniform_deformations() {
        let prior = Mesh::icosahedron(0.5);
        let same = apply_deformation(&prior, &Deformation::zeros(12)).unwrap();
        assert_eq!(same, prior);
        let up = Deformation::new(vec![Vec3::new(0.0, 0.0, 0.1); 12]).unwrap();
        let moved = apply_deformation(&prior, &up).unwrap();
        assert_eq!(moved.faces, prior.faces);
        for (a, b) in moved.vertices.iter().zip(&prior.vertices) {
            assert_eq!(a.z, b.z + 0.1);
            assert_eq!((a.x, a.y), (b.x, b.y));
        }
        assert!(apply_deformation(&prior, &Deformation::zeros(3)).is_err());
    }

    #[test]
    fn perfect_deformation_reaches_target() {
        let prior = Mesh::icosahedron(0.5);
        let mut cad = prior.clone();
        for (i, v) in cad.vertices.iter_mut().enumerate() {
            *v *= 1.0 + 0.05 * (i % 3) as f64;
        }
        let delta = Deformation::between(&prior, &cad).unwrap();
        let deformed = apply_deformation(&prior, &delta).unwrap();
        assert!(chamfer(&deformed.vertices, &cad.vertices).unwrap() < 1e-28);
    }

    #[test]
    fn deformation_is_linear() {
        // Dyadic coordinates and offsets keep every sum exact.
        let prior = Mesh::cube(1.0);
        let d1 = Deformation::new((0..8).map(|i| Vec3::new(0.25 * i as f64, 0.5, -1.0)).collect()).unwrap();
        let d2 = Deformation::new((0..8).map(|i| Vec3::new(0.5, -0.125 * i as f64, 2.0)).collect()).unwrap();
        let sum = Deformation::new(d1.deltas.iter().zip(&d2.deltas).map(|(a, b)| a + b).collect()).unwrap();
        let seq = apply_deformation(&apply_deformation(&prior, &d1).unwrap(), &d2).unwrap();
        assert_eq!(seq, apply_deformation(&prior, &sum).unwrap());
    }

    #[test]
    fn cube_prior_loads_relaxed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(prior_path(dir.path(), "cube"), write_obj(&procedural::unit_cube())).unwrap();
        let mesh = load_prior("cube", dir.path(), &PriorCheck::relaxed()).unwrap();
        assert_eq!(mesh.vertices.len(), 8);
        assert!((mesh.bbox_diagonal() - 1.0).abs() < 1e-12);
        assert!(matches!(
            load_prior("cube", dir.path(), &PriorCheck::default()),
            Err(Error::VertexCount { got: 8, .. })
        ));
    }

    #[test]
    fn prior_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(prior_path(dir.path(), "nan"), "v 0 0 0\nv NaN 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert!(matches!(load_prior("nan", dir.path(), &PriorCheck::relaxed()), Err(Error::Parse { .. })));
        std::fs::write(prior_path(dir.path(), "big"), write_obj(&Mesh::cube(2.0 / 3f64.sqrt()))).unwrap();
        assert!(matches!(
            load_prior("big", dir.path(), &PriorCheck::relaxed()),
            Err(Error::OutOfCanonicalBounds { .. })
        ));
        assert!(matches!(load_prior("missing", dir.path(), &PriorCheck::relaxed()), Err(Error::Load { .. })));
    }

    #[test]
    fn procedural_priors_are_canonical() {
        for cat in procedural::CATEGORIES {
            let mesh = procedural::prior(cat).unwrap();
            assert_eq!(mesh.vertices.len(), PRIOR_VERTEX_COUNT, "{cat}");
            validate_prior(&mesh, &PriorCheck::default()).unwrap();
            assert!((mesh.bbox_diagonal() - 1.0).abs() < 1e-9);
            let (lo, hi) = mesh.bounds();
            assert!(((lo + hi) * 0.5).norm() < 1e-9);
        }
        assert!(procedural::prior("teapot").is_none());
    }
}
