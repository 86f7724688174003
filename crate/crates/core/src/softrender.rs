//! Soft silhouette rasterization with analytic reverse-mode gradients.
//!
//! Every face contributes a per-pixel probability
//! `D_f = sigmoid(sign · d² / σ)` with `sign = +1` inside the projected
//! triangle and `-1` outside. Outside, `d` is the pixel-space distance to the
//! triangle. Inside, `d⁻² = Σ_e d_e⁻²` over the distances to the three edge
//! lines: this agrees with the nearest-edge distance close to the boundary but
//! has no ridge along the medial axis, so `D_f` is continuously differentiable
//! everywhere and finite differences never straddle a kink. Faces aggregate as
//! `I = 1 − Π_f (1 − D_f)`. There is no depth ordering: the silhouette does not
//! depend on it.
//!
//! Gradients are propagated from an upstream per-pixel adjoint through the
//! aggregation, the sigmoid, the closest-point distance (an envelope over the
//! edge parameter, so the clamped segment projection needs no special case),
//! the pinhole projection and finally the pose transform `x ↦ s·R(q)·x + T`
//! with `s = ‖S‖`.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{matrix_partials, Intrinsics, Pose, Vec3};
use crate::mesh::Mesh;
use crate::raster::{BinaryMask, Grid, SoftMask};

type V2 = Vector2<f64>;

/// Faces are skipped for pixels outside the triangle with `d²/σ` above this.
/// `sigmoid(-32) ≈ 1.3e-14`, far below anything the gradient check can see.
pub const CULL_EXPONENT: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    /// Sigmoid sharpness in squared pixels.
    pub sigma: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl RenderConfig {
    pub fn new(width: usize, height: usize, sigma: f64) -> Self {
        Self { sigma, width, height, near: 0.01, far: 100.0 }
    }

    pub fn for_intrinsics(k: &Intrinsics, sigma: f64) -> Self {
        Self::new(k.width as usize, k.height as usize, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("render sigma must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("render clip planes need 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("render size must be non-zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub mask: SoftMask,
    /// Set when the mesh lies entirely behind the near plane (or beyond the far plane).
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    /// Gradient w.r.t. each canonical-frame mesh vertex.
    pub vertices: Vec<Vec3>,
    /// Gradient w.r.t. the quaternion `[w, x, y, z]`, projected onto the tangent of the unit sphere.
    pub quaternion: [f64; 4],
    pub translation: Vec3,
    pub scale: Vec3,
}

impl RenderGradients {
    fn zeros(n_vertices: usize) -> Self {
        Self {
            vertices: vec![Vec3::zeros(); n_vertices],
            quaternion: [0.0; 4],
            translation: Vec3::zeros(),
            scale: Vec3::zeros(),
        }
    }
}

struct Face2 {
    idx: [usize; 3],
    p: [V2; 3],
    area2: f64,
    u_range: (usize, usize),
}

struct Hit {
    face: usize,
    d: f64,
    sign: f64,
    /// Closest-point data for the outside case: edge index, segment parameter, residual.
    edge: usize,
    t: f64,
    r: V2,
}

struct Prepared {
    faces: Vec<Face2>,
    rows: Vec<Vec<u32>>,
    cam: Vec<Vec3>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cross2(a: &V2, b: &V2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn prepare(mesh: &Mesh, pose: &Pose, k: &Intrinsics, cfg: &RenderConfig) -> Result<Option<Prepared>> {
    cfg.validate()?;
    mesh.validate()?;
    pose.validate()?;
    let r = pose.rotation.to_matrix();
    let s = pose.scale_factor();
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|v| r * v * s + pose.translation).collect();
    let behind = cam.iter().filter(|p| p.z <= cfg.near).count();
    if behind == cam.len() || cam.iter().all(|p| p.z >= cfg.far) {
        return Ok(None);
    }
    if behind > 0 {
        return Err(Error::BehindNearPlane { near: cfg.near });
    }
    let proj: Vec<V2> = cam
        .iter()
        .map(|p| {
            let (u, v) = k.project(p);
            V2::new(u, v)
        })
        .collect();

    let margin = (CULL_EXPONENT * cfg.sigma).sqrt();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut faces = Vec::with_capacity(mesh.faces.len());
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); cfg.height];
    for f in &mesh.faces {
        let p = f.map(|i| proj[i]);
        let lo = p[0].inf(&p[1]).inf(&p[2]).add_scalar(-margin);
        let hi = p[0].sup(&p[1]).sup(&p[2]).add_scalar(margin);
        if hi.x < 0.0 || hi.y < 0.0 || lo.x > w - 1.0 || lo.y > h - 1.0 {
            continue;
        }
        let u0 = lo.x.max(0.0).ceil() as usize;
        let u1 = hi.x.min(w - 1.0).floor() as usize;
        let v0 = lo.y.max(0.0).ceil() as usize;
        let v1 = hi.y.min(h - 1.0).floor() as usize;
        if u0 > u1 || v0 > v1 {
            continue;
        }
        let id = faces.len() as u32;
        for row in &mut rows[v0..=v1] {
            row.push(id);
        }
        faces.push(Face2 { idx: *f, p, area2: cross2(&(p[1] - p[0]), &(p[2] - p[0])), u_range: (u0, u1) });
    }
    Ok(Some(Prepared { faces, rows, cam }))
}

fn evaluate(face: &Face2, face_id: usize, q: V2, sigma: f64) -> Option<Hit> {
    let mut best = (f64::INFINITY, 0usize, 0.0, V2::zeros());
    let mut inside = face.area2 != 0.0;
    let mut inv_sum = 0.0;
    for e in 0..3 {
        let a = face.p[e];
        let ab = face.p[(e + 1) % 3] - a;
        let aq = q - a;
        let c = cross2(&ab, &aq);
        if inside && c * face.area2 < 0.0 {
            inside = false;
        }
        let len2 = ab.norm_squared();
        if inside {
            inv_sum += len2 / (c * c);
        }
        let t = if len2 > 0.0 { (aq.dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let r = aq - ab * t;
        let d2 = r.norm_squared();
        if d2 < best.0 {
            best = (d2, e, t, r);
        }
    }
    let (d2, edge, t, r) = best;
    if inside {
        // An infinite sum means the pixel lies on an edge line: d = 0.
        let d2 = if inv_sum.is_finite() { 1.0 / inv_sum } else { 0.0 };
        return Some(Hit { face: face_id, d: sigmoid(d2 / sigma), sign: 1.0, edge, t, r });
    }
    if d2 > CULL_EXPONENT * sigma {
        return None;
    }
    Some(Hit { face: face_id, d: sigmoid(-d2 / sigma), sign: -1.0, edge, t, r })
}

/// `∂d²/∂p_i` of the inside distance `d⁻² = Σ_e d_e⁻²`, `d_e² = c_e² / L_e`
/// with `c_e = (b − a) × (q − a)` and `L_e = |b − a|²`.
fn inside_gradient(face: &Face2, q: V2) -> [V2; 3] {
    let mut out = [V2::zeros(); 3];
    let mut parts = [(0.0, 0.0, 0.0); 3];
    let mut inv_sum = 0.0;
    for (e, part) in parts.iter_mut().enumerate() {
        let a = face.p[e];
        let ab = face.p[(e + 1) % 3] - a;
        let c = cross2(&ab, &(q - a));
        let len2 = ab.norm_squared();
        if c == 0.0 {
            // On an edge line d² = 0 to second order: the gradient vanishes.
            return out;
        }
        *part = (c, len2, c * c / len2);
        inv_sum += 1.0 / part.2;
    }
    let h = 1.0 / inv_sum;
    for (e, &(c, len2, de2)) in parts.iter().enumerate() {
        let ia = e;
        let ib = (e + 1) % 3;
        let (a, b) = (face.p[ia], face.p[ib]);
        let ab = b - a;
        let w = (h / de2).powi(2);
        let dc_da = V2::new(b.y - q.y, q.x - b.x);
        let dc_db = V2::new(q.y - a.y, a.x - q.x);
        let k_c = 2.0 * c / len2;
        let k_l = de2 / len2 * 2.0;
        out[ia] += (dc_da * k_c + ab * k_l) * w;
        out[ib] += (dc_db * k_c - ab * k_l) * w;
    }
    out
}

fn row_hits(prep: &Prepared, v: usize, sigma: f64, hits: &mut Vec<(usize, Hit)>) {
    hits.clear();
    let qy = v as f64;
    for &fid in &prep.rows[v] {
        let face = &prep.faces[fid as usize];
        for u in face.u_range.0..=face.u_range.1 {
            if let Some(hit) = evaluate(face, fid as usize, V2::new(u as f64, qy), sigma) {
                hits.push((u, hit));
            }
        }
    }
    // Stable: preserves face order within a pixel, so reductions are deterministic.
    hits.sort_by_key(|(u, _)| *u);
}

/// Soft silhouette of the posed mesh.
pub fn render_silhouette(mesh: &Mesh, pose: &Pose, k: &Intrinsics, cfg: &RenderConfig) -> Result<Render> {
    let Some(prep) = prepare(mesh, pose, k, cfg)? else {
        return Ok(Render { mask: SoftMask::filled(cfg.width, cfg.height, 0.0), empty: true });
    };
    let rows: Vec<Vec<f64>> = (0..cfg.height)
        .into_par_iter()
        .map_init(Vec::new, |hits, v| {
            let mut keep = vec![1.0f64; cfg.width];
            row_hits(&prep, v, cfg.sigma, hits);
            for (u, hit) in hits.iter() {
                keep[*u] *= 1.0 - hit.d;
            }
            keep.into_iter().map(|c| 1.0 - c).collect()
        })
        .collect();
    let mask = Grid::from_vec(cfg.width, cfg.height, rows.concat())?;
    Ok(Render { mask, empty: false })
}

/// Renders and back-propagates `Σ upstream(u,v) · I(u,v)`.
pub fn render_with_gradients(
    mesh: &Mesh,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &RenderConfig,
    upstream: &Grid<f64>,
) -> Result<(Render, RenderGradients)> {
    if upstream.width() != cfg.width || upstream.height() != cfg.height {
        return Err(Error::invalid("upstream adjoint size differs from the render size"));
    }
    let n_v = mesh.vertices.len();
    let Some(prep) = prepare(mesh, pose, k, cfg)? else {
        return Ok((
            Render { mask: SoftMask::filled(cfg.width, cfg.height, 0.0), empty: true },
            RenderGradients::zeros(n_v),
        ));
    };
    let sigma = cfg.sigma;

    struct RowOut {
        occupancy: Vec<f64>,
        grads: Vec<(usize, V2)>,
    }

    let rows: Vec<RowOut> = (0..cfg.height)
        .into_par_iter()
        .map_init(Vec::new, |hits, v| {
            row_hits(&prep, v, sigma, hits);
            let mut occupancy = vec![0.0; cfg.width];
            let mut grads = Vec::new();
            let mut start = 0;
            let mut prefix = Vec::new();
            while start < hits.len() {
                let u = hits[start].0;
                let mut end = start;
                while end < hits.len() && hits[end].0 == u {
                    end += 1;
                }
                let group = &hits[start..end];
                // prefix[i] = Π_{j<i} (1 − D_j)
                prefix.clear();
                prefix.push(1.0);
                for (_, h) in group {
                    let last = *prefix.last().unwrap();
                    prefix.push(last * (1.0 - h.d));
                }
                occupancy[u] = 1.0 - prefix[group.len()];
                let up = *upstream.get(u, v);
                if up != 0.0 {
                    let mut suffix = 1.0;
                    for (i, (_, h)) in group.iter().enumerate().rev() {
                        let d_i_d_d = prefix[i] * suffix;
                        suffix *= 1.0 - h.d;
                        let g_d2 = up * d_i_d_d * h.sign / sigma * h.d * (1.0 - h.d);
                        if g_d2 == 0.0 {
                            continue;
                        }
                        let face = &prep.faces[h.face];
                        if h.sign > 0.0 {
                            let g = inside_gradient(face, V2::new(u as f64, v as f64));
                            for (i, gi) in face.idx.iter().zip(g) {
                                grads.push((*i, gi * g_d2));
                            }
                            continue;
                        }
                        let a = face.idx[h.edge];
                        let b = face.idx[(h.edge + 1) % 3];
                        // d² = min_t |q − a − t(b − a)|²  ⇒  ∂/∂a = −2r(1−t), ∂/∂b = −2rt.
                        grads.push((a, h.r * (-2.0 * (1.0 - h.t) * g_d2)));
                        grads.push((b, h.r * (-2.0 * h.t * g_d2)));
                    }
                }
                start = end;
            }
            RowOut { occupancy, grads }
        })
        .collect();

    let mut grad_uv = vec![V2::zeros(); n_v];
    let mut occ = Vec::with_capacity(cfg.width * cfg.height);
    for row in rows {
        occ.extend_from_slice(&row.occupancy);
        for (i, g) in row.grads {
            grad_uv[i] += g;
        }
    }
    let render = Render { mask: Grid::from_vec(cfg.width, cfg.height, occ)?, empty: false };

    let r = pose.rotation.to_matrix();
    let s = pose.scale_factor();
    let q = pose.rotation.quaternion();
    let partials = matrix_partials(&q);
    let mut out = RenderGradients::zeros(n_v);
    let mut grad_s = 0.0;
    let mut grad_q = [0.0; 4];
    for (i, g) in grad_uv.iter().enumerate() {
        if g.x == 0.0 && g.y == 0.0 {
            continue;
        }
        let p = prep.cam[i];
        let iz = 1.0 / p.z;
        let g_cam = Vec3::new(g.x * k.fx * iz, g.y * k.fy * iz, -(g.x * k.fx * p.x + g.y * k.fy * p.y) * iz * iz);
        let v = mesh.vertices[i];
        out.translation += g_cam;
        out.vertices[i] = r.transpose() * g_cam * s;
        grad_s += g_cam.dot(&(r * v));
        for (gq, part) in grad_q.iter_mut().zip(&partials) {
            *gq += s * g_cam.dot(&(part * v));
        }
    }
    let s_norm = pose.scale.norm();
    out.scale = pose.scale * (grad_s / s_norm);
    let radial: f64 = grad_q.iter().zip(&q).map(|(g, c)| g * c).sum();
    for (gq, c) in grad_q.iter_mut().zip(&q) {
        *gq -= radial * c;
    }
    out.quaternion = grad_q;
    Ok((render, out))
}

/// Pixels strictly above `threshold`.
pub fn hard_mask(soft: &SoftMask, threshold: f64) -> BinaryMask {
    soft.map(|&x| x > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;

    fn k64() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 31.5, 31.5, 64, 64).unwrap()
    }

    fn unit_scale() -> Vec3 {
        // ‖S‖ = 1 so canonical vertices keep their size.
        Vec3::repeat(1.0 / 3f64.sqrt())
    }

    fn pose_at(t: Vec3) -> Pose {
        Pose { rotation: Rotation::IDENTITY, translation: t, scale: unit_scale() }
    }

    fn big_triangle() -> Mesh {
        Mesh::new(
            vec![Vec3::new(-100.0, -100.0, 0.0), Vec3::new(100.0, -100.0, 0.0), Vec3::new(0.0, 100.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn small_triangle() -> Mesh {
        Mesh::new(
            vec![Vec3::new(-0.3, -0.2, 0.0), Vec3::new(0.3, -0.2, 0.0), Vec3::new(0.0, 0.3, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn sharp_limit_on_covering_triangle() {
        let k = k64();
        let cfg = RenderConfig::for_intrinsics(&k, 1e-6);
        let r = render_silhouette(&big_triangle(), &pose_at(Vec3::new(0.0, 0.0, 2.0)), &k, &cfg).unwrap();
        assert!(!r.empty);
        assert!(r.mask.data().iter().all(|&x| x >= 0.999));
    }

    #[test]
    fn far_pixels_are_empty() {
        let k = k64();
        let cfg = RenderConfig::for_intrinsics(&k, 1.0);
        let r = render_silhouette(&small_triangle(), &pose_at(Vec3::new(0.0, 0.0, 2.0)), &k, &cfg).unwrap();
        assert!(*r.mask.get(0, 0) < 1e-3);
        assert!(*r.mask.get(63, 63) < 1e-3);
        assert!(*r.mask.get(32, 32) > 0.99);
        let sharp = RenderConfig::for_intrinsics(&k, 1e-6);
        let r = render_silhouette(&small_triangle(), &pose_at(Vec3::new(0.0, 0.0, 2.0)), &k, &sharp).unwrap();
        assert!(*r.mask.get(2, 2) <= 1e-3);
    }

    #[test]
    fn behind_camera_is_flagged_empty() {
        let k = k64();
        let cfg = RenderConfig::for_intrinsics(&k, 1.0);
        let r = render_silhouette(&small_triangle(), &pose_at(Vec3::new(0.0, 0.0, -2.0)), &k, &cfg).unwrap();
        assert!(r.empty);
        assert!(r.mask.data().iter().all(|&x| x == 0.0));
        let straddling = pose_at(Vec3::new(0.0, 0.0, 0.0));
        let tall = Mesh::new(
            vec![Vec3::new(0.0, 0.0, -1.0), Vec3::new(1.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(render_silhouette(&tall, &straddling, &k, &cfg), Err(Error::BehindNearPlane { .. })));
    }

    #[test]
    fn cube_footprint_matches_projected_square() {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let cfg = RenderConfig::for_intrinsics(&k, 1e-3);
        let r = render_silhouette(&Mesh::cube(1.0), &pose_at(Vec3::new(0.0, 0.0, 2.0)), &k, &cfg).unwrap();
        let area = hard_mask(&r.mask, 0.5).count() as f64;
        // Front face at z = 1.5 projects to a square of side 500 / 1.5 px.
        let side: f64 = 500.0 / 1.5;
        let expected = side * side;
        assert!((area - expected).abs() / expected < 0.02, "{area} vs {expected}");
    }

    #[test]
    fn sharpening_is_monotone() {
        let k = k64();
        let pose = pose_at(Vec3::new(0.0, 0.0, 2.0));
        let mut prev: Option<SoftMask> = None;
        let mut prev_sharp: Option<BinaryMask> = None;
        for sigma in [10.0, 1.0, 0.1, 0.01] {
            let cfg = RenderConfig::for_intrinsics(&k, sigma);
            let r = render_silhouette(&small_triangle(), &pose, &k, &cfg).unwrap();
            let inside = hard_mask(&r.mask, 0.5);
            if let (Some(p), Some(ins)) = (&prev, &prev_sharp) {
                for ((a, b), &is_in) in p.data().iter().zip(r.mask.data()).zip(ins.data()) {
                    if is_in {
                        assert!(b >= a);
                    } else {
                        assert!(b <= a);
                    }
                }
            }
            prev = Some(r.mask);
            prev_sharp = Some(inside);
        }
    }

    #[test]
    fn face_order_does_not_matter() {
        let k = k64();
        let cfg = RenderConfig::for_intrinsics(&k, 0.7);
        let mesh = Mesh::icosahedron(0.5);
        let mut shuffled = mesh.clone();
        shuffled.faces.reverse();
        shuffled.faces.swap(0, 7);
        let pose = Pose {
            rotation: Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.4),
            translation: Vec3::new(0.1, -0.05, 2.5),
            scale: unit_scale(),
        };
        let a = render_silhouette(&mesh, &pose, &k, &cfg).unwrap();
        let b = render_silhouette(&shuffled, &pose, &k, &cfg).unwrap();
        for (x, y) in a.mask.data().iter().zip(b.mask.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let k = k64();
        let cfg = RenderConfig::for_intrinsics(&k, 1.0);
        let up = Grid::filled(64, 64, 0.0);
        let (_, g) =
            render_with_gradients(&Mesh::icosahedron(0.5), &pose_at(Vec3::new(0.0, 0.0, 2.5)), &k, &cfg, &up).unwrap();
        assert_eq!(g, RenderGradients::zeros(12));
    }

    #[test]
    fn gradient_render_matches_forward_render() {
        let k = k64();
        let cfg = RenderConfig::for_intrinsics(&k, 0.5);
        let pose = pose_at(Vec3::new(0.05, 0.0, 2.5));
        let up = Grid::filled(64, 64, 1.0);
        let (r, _) = render_with_gradients(&Mesh::icosahedron(0.5), &pose, &k, &cfg, &up).unwrap();
        let f = render_silhouette(&Mesh::icosahedron(0.5), &pose, &k, &cfg).unwrap();
        assert_eq!(r, f);
    }

    #[test]
    fn x_translation_with_symmetric_weights_has_no_y_gradient() {
        // Object symmetric about the horizontal image midline, shifted along +x.
        let k = Intrinsics::new(60.0, 60.0, 32.0, 31.5, 64, 64).unwrap();
        let cfg = RenderConfig::for_intrinsics(&k, 1.0);
        let up = Grid::from_fn(64, 64, |u, v| {
            let du = u as f64 - 32.0;
            let dv = v as f64 - 31.5;
            (-(du * du + dv * dv) / 300.0).exp()
        });
        let pose = pose_at(Vec3::new(0.1, 0.0, 2.5));
        // Vertex set maps onto itself under y -> -y.
        let mirror = Mesh::new(
            vec![Vec3::new(-0.3, 0.0, 0.0), Vec3::new(0.3, 0.3, 0.0), Vec3::new(0.3, -0.3, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let (_, g) = render_with_gradients(&mirror, &pose, &k, &cfg, &up).unwrap();
        assert!(g.translation.y.abs() < 1e-6, "{}", g.translation.y);
        assert!(g.translation.x.abs() > 1e-3);
    }

    #[test]
    fn hard_mask_threshold_is_strict() {
        let soft = SoftMask::from_vec(3, 1, vec![0.9, 0.1, 0.5]).unwrap();
        assert_eq!(hard_mask(&soft, 0.5).data(), &[true, false, false]);
        assert!(hard_mask(&SoftMask::filled(4, 4, 0.9), 0.5).data().iter().all(|&b| b));
        assert!(hard_mask(&SoftMask::filled(4, 4, 0.1), 0.5).data().iter().all(|&b| !b));
    }
}
