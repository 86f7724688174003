//! Central finite-difference verification of the renderer's analytic gradients.
//!
//! Only [`render_silhouette`] is used to build the numerical side, so the
//! check is independent of the backward pass it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Intrinsics, Pose, Rotation, Vec3};
use crate::mesh::Mesh;
use crate::raster::Grid;
use crate::softrender::{render_silhouette, render_with_gradients, RenderConfig};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const RELATIVE_TOLERANCE: f64 = 1e-3;
pub const ABSOLUTE_FLOOR: f64 = 1e-6;
/// Suite poses with a face closer than this to edge-on (doubled projected area,
/// in squared pixels) are redrawn. The silhouette is not differentiable where a
/// face flips orientation, so a central difference straddling that flip
/// measures the kink rather than the gradient.
pub const MIN_FACE_AREA2: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl EntryCheck {
    /// `|a − n| / max(|a|, |n|, floor / rel_tol)`: passes at `≤ rel_tol` exactly when
    /// `|a − n| ≤ max(rel_tol · max(|a|, |n|), floor)`.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(ABSOLUTE_FLOOR / RELATIVE_TOLERANCE);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(EntryCheck::relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries.iter().max_by(|a, b| a.relative_error().total_cmp(&b.relative_error()))
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() <= RELATIVE_TOLERANCE
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

fn weighted_sum(mesh: &Mesh, pose: &Pose, k: &Intrinsics, cfg: &RenderConfig, upstream: &Grid<f64>) -> Result<f64> {
    let r = render_silhouette(mesh, pose, k, cfg)?;
    Ok(r.mask.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

/// Compares every analytic gradient entry (vertices, quaternion, translation,
/// scale) against central differences with step `h`.
pub fn check_gradients(
    mesh: &Mesh,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &RenderConfig,
    upstream: &Grid<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = render_with_gradients(mesh, pose, k, cfg, upstream)?;
    let mut report = GradCheckReport::default();
    let mut push = |name: String, analytic: f64, plus: f64, minus: f64| {
        report.entries.push(EntryCheck { name, analytic, numeric: (plus - minus) / (2.0 * h) });
    };

    for i in 0..mesh.vertices.len() {
        for axis in 0..3 {
            let mut m = mesh.clone();
            m.vertices[i][axis] += h;
            let plus = weighted_sum(&m, pose, k, cfg, upstream)?;
            m.vertices[i][axis] -= 2.0 * h;
            let minus = weighted_sum(&m, pose, k, cfg, upstream)?;
            push(format!("vertex[{i}].{axis}"), grads.vertices[i][axis], plus, minus);
        }
    }
    let q = pose.rotation.quaternion();
    for c in 0..4 {
        let eval = |delta: f64| -> Result<f64> {
            let mut qq = q;
            qq[c] += delta;
            let p = Pose { rotation: Rotation::from_quaternion(qq)?, ..*pose };
            weighted_sum(mesh, &p, k, cfg, upstream)
        };
        push(format!("quaternion[{c}]"), grads.quaternion[c], eval(h)?, eval(-h)?);
    }
    for axis in 0..3 {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = *pose;
            p.translation[axis] += delta;
            weighted_sum(mesh, &p, k, cfg, upstream)
        };
        push(format!("translation[{axis}]"), grads.translation[axis], eval(h)?, eval(-h)?);
    }
    for axis in 0..3 {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = *pose;
            p.scale[axis] += delta;
            weighted_sum(mesh, &p, k, cfg, upstream)
        };
        push(format!("scale[{axis}]"), grads.scale[axis], eval(h)?, eval(-h)?);
    }
    Ok(report)
}

fn min_projected_area2(mesh: &Mesh, pose: &Pose, k: &Intrinsics) -> f64 {
    let r = pose.rotation.to_matrix();
    let s = pose.scale_factor();
    let proj: Vec<(f64, f64)> = mesh.vertices.iter().map(|v| k.project(&(r * v * s + pose.translation))).collect();
    mesh.faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| proj[i]);
            ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// The standard suite: a 20-face icosahedron at 64×64 under `poses` random
/// generic poses (see [`MIN_FACE_AREA2`]) with a smooth random upstream adjoint.
pub fn run_suite(poses: usize, seed: u64) -> Result<GradCheckReport> {
    let k = Intrinsics::new(70.0, 70.0, 31.5, 31.5, 64, 64)?;
    let cfg = RenderConfig::for_intrinsics(&k, 1.0);
    let mesh = Mesh::icosahedron(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut accepted = 0;
    while accepted < poses {
        let axis = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let pose = Pose::new(
            Rotation::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI)),
            Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(2.2..3.0)),
            Vec3::new(rng.random_range(0.4..0.8), rng.random_range(0.4..0.8), rng.random_range(0.4..0.8)),
        )?;
        if min_projected_area2(&mesh, &pose, &k) < MIN_FACE_AREA2 {
            continue;
        }
        accepted += 1;
        let (a, b, c) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5));
        let upstream = Grid::from_fn(64, 64, |u, v| {
            let x = u as f64 / 63.0 - 0.5;
            let y = v as f64 / 63.0 - 0.5;
            c + a * x + b * y + (a * 7.0 * x + b * 5.0 * y).sin()
        });
        report.merge(check_gradients(&mesh, &pose, &k, &cfg, &upstream, DEFAULT_STEP)?);
    }
    Ok(report)
}
