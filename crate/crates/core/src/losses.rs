//! Training objectives: disentangled pose loss, NOCS regression, Chamfer
//! reconstruction, soft-IOU silhouette matching, the deformation regularizer,
//! and the supervised / semi-supervised totals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_translation, Intrinsics, Mat3, NocsMap, Pose, Rotation, Vec3};
use crate::raster::{BinaryMask, Grid, SoftMask};

/// Balance parameters of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pose: f64,
    pub nocs: f64,
    pub recon: f64,
    pub mask: f64,
    pub reg: f64,
    /// Smooth-L1 transition point, NOCS units.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pose: 0.2, nocs: 2.0, recon: 5.0, mask: 0.2, reg: 0.01, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pose, self.nocs, self.recon, self.mask, self.reg, self.beta];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("loss weights must be finite and non-negative"))
        }
    }
}

/// Relative weights of the four pose terms; all 1 reproduces the plain sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTermWeights {
    pub rotation: f64,
    pub center: f64,
    pub depth: f64,
    pub size: f64,
}

impl Default for PoseTermWeights {
    fn default() -> Self {
        Self { rotation: 1.0, center: 1.0, depth: 1.0, size: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum SymmetrySpec {
    #[default]
    None,
    /// Continuous rotational symmetry about a canonical-frame axis, discretized into `steps` rotations.
    Axis { axis: Vec3, steps: usize },
}

impl SymmetrySpec {
    pub const DEFAULT_STEPS: usize = 64;

    pub fn axis(axis: Vec3, steps: usize) -> Result<Self> {
        let spec = SymmetrySpec::Axis { axis: axis.normalize(), steps };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SymmetrySpec::None => Ok(()),
            SymmetrySpec::Axis { axis, steps } => {
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("symmetry axis must be unit length"));
                }
                if *steps < 2 {
                    return Err(Error::invalid("symmetry discretization needs at least 2 steps"));
                }
                Ok(())
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        matches!(self, SymmetrySpec::Axis { .. })
    }

    /// Same symmetry with a different discretization.
    pub fn with_steps(&self, steps: usize) -> Self {
        match *self {
            SymmetrySpec::None => SymmetrySpec::None,
            SymmetrySpec::Axis { axis, .. } => SymmetrySpec::Axis { axis, steps },
        }
    }

    /// Rotations `R · R_axis(2πk/D)` equivalent to `r` under this symmetry.
    pub fn equivalents(&self, r: &Mat3) -> Vec<Mat3> {
        match self {
            SymmetrySpec::None => vec![*r],
            SymmetrySpec::Axis { axis, steps } => (0..*steps)
                .map(|k| {
                    let angle = std::f64::consts::TAU * k as f64 / *steps as f64;
                    r * Rotation::from_axis_angle(axis, angle).to_matrix()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleDomain {
    Synthetic,
    Real,
}

/// Point-matching rotation loss `avg_x ‖R_pred·x − R_gt·x‖₂`, minimized over
/// the symmetry-equivalents of `R_gt`.
pub fn rotation_pm_loss(r_pred: &Mat3, r_gt: &Mat3, model_points: &[Vec3], sym: &SymmetrySpec) -> Result<f64> {
    if model_points.is_empty() {
        return Err(Error::invalid("rotation loss needs at least one model point"));
    }
    sym.validate()?;
    let n = model_points.len() as f64;
    let best = sym
        .equivalents(r_gt)
        .iter()
        .map(|r| model_points.iter().map(|x| (r_pred * x - r * x).norm()).sum::<f64>() / n)
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

/// Pose in the decoupled parameterization: projected center, depth, size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoupledPose {
    pub o_x: f64,
    pub o_y: f64,
    pub t_z: f64,
    pub size: Vec3,
}

impl DecoupledPose {
    /// Center supervision from the projected 3D centroid.
    pub fn from_pose(pose: &Pose, k: &Intrinsics) -> Result<Self> {
        let (o_x, o_y, t_z) = project_translation(&pose.translation, k)?;
        Ok(Self { o_x, o_y, t_z, size: pose.scale })
    }

    /// Center supervision from a mask's bounding-box center instead of the centroid projection.
    pub fn from_pose_and_box(pose: &Pose, mask: &BinaryMask) -> Result<Self> {
        let (o_x, o_y) = crate::geometry::mask_box_center(mask).ok_or(Error::EmptyForeground)?;
        if !(pose.translation.z > 0.0) {
            return Err(Error::InvalidDepth(pose.translation.z));
        }
        Ok(Self { o_x, o_y, t_z: pose.translation.z, size: pose.scale })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslationScaleTerms {
    pub center: f64,
    pub depth: f64,
    pub size: f64,
}

/// L1 center, depth and size terms.
pub fn translation_scale_loss(pred: &DecoupledPose, gt: &DecoupledPose) -> Result<TranslationScaleTerms> {
    for t in [pred.t_z, gt.t_z] {
        if !(t > 0.0) {
            return Err(Error::InvalidDepth(t));
        }
    }
    Ok(TranslationScaleTerms {
        center: (pred.o_x - gt.o_x).abs() + (pred.o_y - gt.o_y).abs(),
        depth: (pred.t_z - gt.t_z).abs(),
        size: (pred.size - gt.size).abs().sum(),
    })
}

/// `L_pose = L_R + L_center + L_z + L_S`, each optionally reweighted.
pub fn pose_loss(rotation: f64, ts: &TranslationScaleTerms, w: &PoseTermWeights) -> f64 {
    w.rotation * rotation + w.center * ts.center + w.depth * ts.depth + w.size * ts.size
}

pub fn smooth_l1(delta: f64, beta: f64) -> f64 {
    let a = delta.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Smooth-L1 summed over all points and coordinate channels.
pub fn nocs_loss(pred: &NocsMap, gt: &NocsMap, beta: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("nocs maps differ in length ({} vs {})", pred.len(), gt.len())));
    }
    if !(beta >= 0.0) {
        return Err(Error::invalid("smooth-L1 beta must be non-negative"));
    }
    Ok(pred.coords.iter().zip(&gt.coords).flat_map(|(p, g)| (0..3).map(move |c| smooth_l1(g[c] - p[c], beta))).sum())
}

fn nearest_sq_sum(from: &[Vec3], to: &[Vec3]) -> f64 {
    from.iter().map(|x| to.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min)).sum()
}

fn check_sets(x: &[Vec3], y: &[Vec3]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        Err(Error::invalid("chamfer distance needs two non-empty sets"))
    } else {
        Ok(())
    }
}

/// Summed bidirectional squared nearest-neighbor distance.
pub fn chamfer(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    check_sets(x, y)?;
    Ok(nearest_sq_sum(x, y) + nearest_sq_sum(y, x))
}

/// Chamfer distance with each direction averaged over its set size.
pub fn chamfer_mean(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    check_sets(x, y)?;
    Ok(nearest_sq_sum(x, y) / x.len() as f64 + nearest_sq_sum(y, x) / y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SilhouetteLoss {
    pub value: f64,
    /// Both masks were empty; the loss is reported as 0.
    pub degenerate: bool,
}

fn soft_iou_sums(rendered: &SoftMask, target: &BinaryMask) -> Result<(f64, f64)> {
    if !rendered.same_size(target) {
        return Err(Error::invalid("rendered and target masks differ in size"));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&r, &t) in rendered.data().iter().zip(target.data()) {
        let t = if t { 1.0 } else { 0.0 };
        inter += r.min(t);
        union += r.max(t);
    }
    Ok((inter, union))
}

/// Negative soft IOU: `1 − Σ min(r, t) / Σ max(r, t)`.
pub fn silhouette_loss(rendered: &SoftMask, target: &BinaryMask) -> Result<SilhouetteLoss> {
    let (inter, union) = soft_iou_sums(rendered, target)?;
    Ok(if union == 0.0 {
        SilhouetteLoss { value: 0.0, degenerate: true }
    } else {
        SilhouetteLoss { value: 1.0 - inter / union, degenerate: false }
    })
}

/// Loss and its adjoint w.r.t. every rendered pixel.
pub fn silhouette_loss_with_grad(rendered: &SoftMask, target: &BinaryMask) -> Result<(SilhouetteLoss, Grid<f64>)> {
    let (inter, union) = soft_iou_sums(rendered, target)?;
    if union == 0.0 {
        return Ok((
            SilhouetteLoss { value: 0.0, degenerate: true },
            Grid::filled(rendered.width(), rendered.height(), 0.0),
        ));
    }
    // With binary targets, r ≤ t = 1 routes r into the intersection and t = 0 into the union.
    let d_inter = -1.0 / union;
    let d_union = inter / (union * union);
    let grad =
        Grid::from_fn(rendered.width(), rendered.height(), |u, v| if *target.get(u, v) { d_inter } else { d_union });
    Ok((SilhouetteLoss { value: 1.0 - inter / union, degenerate: false }, grad))
}

/// Mean per-vertex deformation magnitude.
pub fn deformation_reg(deltas: &[Vec3]) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    deltas.iter().map(|d| d.norm()).sum::<f64>() / deltas.len() as f64
}

/// Subgradient of [`deformation_reg`] (zero at zero displacement).
pub fn deformation_reg_grad(deltas: &[Vec3]) -> Vec<Vec3> {
    let n = deltas.len().max(1) as f64;
    deltas
        .iter()
        .map(|d| {
            let len = d.norm();
            if len > 0.0 {
                d / (len * n)
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossComponents {
    pub pose: f64,
    pub nocs: f64,
    pub recon: f64,
    pub mask: f64,
    pub reg: f64,
}

/// Weighted terms; supervised terms are exactly zero for real samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub pose: f64,
    pub nocs: f64,
    pub recon: f64,
    pub mask: f64,
    pub reg: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights, domain: SampleDomain) -> TotalLoss {
    let mask = w.mask * c.mask;
    let reg = w.reg * c.reg;
    match domain {
        SampleDomain::Synthetic => {
            let (pose, nocs, recon) = (w.pose * c.pose, w.nocs * c.nocs, w.recon * c.recon);
            TotalLoss { total: pose + nocs + recon + mask + reg, pose, nocs, recon, mask, reg }
        }
        // The supervised terms are never read, so arbitrary (even non-finite) values cannot leak in.
        SampleDomain::Real => TotalLoss { total: mask + reg, pose: 0.0, nocs: 0.0, recon: 0.0, mask, reg },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rotation_loss_examples() {
        let pts = [Vec3::x()];
        let rz90 = Rotation::about_z(std::f64::consts::FRAC_PI_2).to_matrix();
        let i = Mat3::identity();
        assert_eq!(rotation_pm_loss(&i, &i, &pts, &SymmetrySpec::None).unwrap(), 0.0);
        let l = rotation_pm_loss(&rz90, &i, &pts, &SymmetrySpec::None).unwrap();
        assert!((l - 2f64.sqrt()).abs() < 1e-12);
        assert!(rotation_pm_loss(&i, &i, &[], &SymmetrySpec::None).is_err());
    }

    #[test]
    fn symmetric_rotation_loss_within_discretization_bound() {
        let sym = SymmetrySpec::axis(Vec3::z(), 64).unwrap();
        let pts = [Vec3::new(0.3, 0.1, 0.2), Vec3::new(-0.1, 0.25, -0.3), Vec3::new(0.0, -0.2, 0.1)];
        let max_r = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
        for theta in [0.1, 0.77, 2.0, 3.1, 5.5] {
            let pred = Rotation::about_z(theta).to_matrix();
            let l = rotation_pm_loss(&pred, &Mat3::identity(), &pts, &sym).unwrap();
            assert!(l <= std::f64::consts::PI / 64.0 * max_r + 1e-12, "{theta}: {l}");
            let plain = rotation_pm_loss(&pred, &Mat3::identity(), &pts, &SymmetrySpec::None).unwrap();
            assert!(plain > l);
        }
    }

    #[test]
    fn symmetry_validation() {
        assert!(SymmetrySpec::axis(Vec3::z(), 1).is_err());
        let bad = SymmetrySpec::Axis { axis: Vec3::new(0.0, 0.0, 2.0), steps: 8 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn translation_scale_examples() {
        let gt = DecoupledPose { o_x: 10.0, o_y: 20.0, t_z: 1.0, size: Vec3::repeat(0.1) };
        let t = translation_scale_loss(&gt, &gt).unwrap();
        assert_eq!((t.center, t.depth, t.size), (0.0, 0.0, 0.0));
        let shifted = DecoupledPose { o_x: 13.0, o_y: 16.0, ..gt };
        assert_eq!(translation_scale_loss(&shifted, &gt).unwrap().center, 7.0);
        let sized = DecoupledPose { size: Vec3::new(0.1, 0.2, 0.3), ..gt };
        assert!((translation_scale_loss(&sized, &gt).unwrap().size - 0.3).abs() < 1e-15);
        let bad = DecoupledPose { t_z: 0.0, ..gt };
        assert!(matches!(translation_scale_loss(&bad, &gt), Err(Error::InvalidDepth(_))));
    }

    #[test]
    fn decoupled_pose_from_ground_truth_translation() {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let pose = Pose::new(Rotation::IDENTITY, Vec3::new(0.4, 0.0, 2.0), Vec3::repeat(0.2)).unwrap();
        let d = DecoupledPose::from_pose(&pose, &k).unwrap();
        assert!((d.o_x - 420.0).abs() < 1e-9 && (d.o_y - 240.0).abs() < 1e-9 && d.t_z == 2.0);
        let mask = BinaryMask::from_fn(640, 480, |u, v| (400..=440).contains(&u) && (230..=250).contains(&v));
        let b = DecoupledPose::from_pose_and_box(&pose, &mask).unwrap();
        assert_eq!((b.o_x, b.o_y), (420.0, 240.0));
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
        let a = NocsMap { coords: vec![Vec3::new(0.5, 0.0, 0.0)] };
        let b = NocsMap { coords: vec![Vec3::zeros()] };
        assert_eq!(nocs_loss(&a, &b, 1.0).unwrap(), 0.125);
        assert_eq!(nocs_loss(&a, &a, 0.1).unwrap(), 0.0);
        let c = NocsMap { coords: vec![] };
        assert!(nocs_loss(&a, &c, 1.0).is_err());
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer(&[Vec3::zeros()], &[Vec3::x()]).unwrap(), 2.0);
        let x = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert!(chamfer(&x, &[]).is_err());
        let y = [Vec3::zeros(), Vec3::new(3.0, 0.0, 0.0)];
        // x→y: 0 + 1 + 1, y→x: 0 + 4
        assert_eq!(chamfer(&x, &y).unwrap(), 6.0);
        assert_eq!(chamfer_mean(&x, &y).unwrap(), 2.0 / 3.0 + 2.0);
    }

    #[test]
    fn silhouette_examples() {
        let t = BinaryMask::from_vec(4, 1, vec![true, true, false, false]).unwrap();
        let same = t.map(|&b| if b { 1.0 } else { 0.0 });
        assert_eq!(silhouette_loss(&same, &t).unwrap().value, 0.0);
        let disjoint = SoftMask::from_vec(4, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(silhouette_loss(&disjoint, &t).unwrap().value, 1.0);
        let overlap = SoftMask::from_vec(4, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((silhouette_loss(&overlap, &t).unwrap().value - 2.0 / 3.0).abs() < 1e-15);
        let empty = BinaryMask::filled(4, 1, false);
        let l = silhouette_loss(&SoftMask::filled(4, 1, 0.0), &empty).unwrap();
        assert!(l.degenerate && l.value == 0.0);
        assert!(silhouette_loss(&SoftMask::filled(3, 1, 0.0), &empty).is_err());
    }

    #[test]
    fn silhouette_gradient_matches_finite_differences() {
        let t = BinaryMask::from_vec(3, 2, vec![true, true, false, false, true, false]).unwrap();
        let r = SoftMask::from_vec(3, 2, vec![0.9, 0.4, 0.3, 0.05, 0.7, 0.2]).unwrap();
        let (_, g) = silhouette_loss_with_grad(&r, &t).unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut rp = r.clone();
            rp.data_mut()[i] += h;
            let mut rm = r.clone();
            rm.data_mut()[i] -= h;
            let fd = (silhouette_loss(&rp, &t).unwrap().value - silhouette_loss(&rm, &t).unwrap().value) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8, "pixel {i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn deformation_reg_examples() {
        assert_eq!(deformation_reg(&[Vec3::zeros(); 5]), 0.0);
        assert!((deformation_reg(&[Vec3::new(0.3, 0.0, 0.0); 7]) - 0.3).abs() < 1e-15);
        let one = [Vec3::new(0.6, 0.8, 0.0), Vec3::zeros(), Vec3::zeros(), Vec3::zeros()];
        assert!((deformation_reg(&one) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let zero = LossComponents::default();
        assert_eq!(total_loss(&zero, &w, SampleDomain::Synthetic).total, 0.0);
        assert_eq!(total_loss(&zero, &w, SampleDomain::Real).total, 0.0);
        let c = LossComponents { pose: 7.0, nocs: 3.0, recon: 5.0, mask: 0.5, reg: 0.0 };
        assert_eq!(total_loss(&c, &w, SampleDomain::Real).total, 0.2 * 0.5);
        assert!((total_loss(&c, &w, SampleDomain::Synthetic).total - 32.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn real_total_ignores_supervised_terms(p in -1e6f64..1e6, n in -1e6f64..1e6, r in -1e6f64..1e6, m in 0.0f64..1.0, g in 0.0f64..10.0) {
            let w = LossWeights::default();
            let base = LossComponents { pose: 0.0, nocs: 0.0, recon: 0.0, mask: m, reg: g };
            let varied = LossComponents { pose: p, nocs: n, recon: r, ..base };
            prop_assert_eq!(total_loss(&base, &w, SampleDomain::Real), total_loss(&varied, &w, SampleDomain::Real));
        }

        #[test]
        fn chamfer_is_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 3..30), b in proptest::collection::vec(-1.0f64..1.0, 3..30)) {
            let x: Vec<Vec3> = a.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let y: Vec<Vec3> = b.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            prop_assert!((chamfer(&x, &y).unwrap() - chamfer(&y, &x).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn symmetric_loss_invariant_to_axis_rotation_of_gt(theta in 0.0f64..std::f64::consts::TAU, q in proptest::array::uniform4(-1.0f64..1.0)) {
            prop_assume!(q.iter().map(|c| c * c).sum::<f64>() > 0.01);
            let sym = SymmetrySpec::axis(Vec3::y(), 64).unwrap();
            let r_gt = Rotation::from_quaternion(q).unwrap().to_matrix();
            let pts = [Vec3::new(0.3, 0.1, 0.2), Vec3::new(-0.1, 0.25, -0.3)];
            let spun = r_gt * Rotation::from_axis_angle(&Vec3::y(), theta).to_matrix();
            let l = rotation_pm_loss(&spun, &r_gt, &pts, &sym).unwrap();
            let bound = std::f64::consts::PI / 64.0 * pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
            prop_assert!(l <= bound + 1e-12);
        }
    }
}
