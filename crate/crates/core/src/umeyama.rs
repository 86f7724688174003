//! Closed-form least-squares similarity transform between corresponding point
//! sets, plus a RANSAC wrapper for corrupted correspondences.

use nalgebra::SVD;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, NocsMap, PointCloud, Pose, Rotation, Vec3};

/// Relative singular-value floor below which the cross-covariance is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// `dst ≈ scale · rotation · src + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

#[derive(Clone, Debug)]
pub struct SimilarityFit {
    pub transform: Similarity,
    /// The transform as a pose whose per-axis size is the scaled, diagonal-normalized
    /// extent of the source points.
    pub pose: Pose,
    pub residual_rms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub sample_size: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 256, sample_size: 4, inlier_threshold: 0.01, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct RobustFit {
    pub fit: SimilarityFit,
    pub inliers: Vec<usize>,
}

/// Umeyama's closed form over raw slices. `with_scale = false` fixes `s = 1` (rigid).
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::invalid(format!("correspondence sets differ in size ({} vs {})", src.len(), dst.len())));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let mu_src = src.iter().sum::<Vec3>() * inv_n;
    let mu_dst = dst.iter().sum::<Vec3>() * inv_n;
    let mut cov = Mat3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s - mu_src;
        cov += (d - mu_dst) * a.transpose();
        var_src += a.norm_squared();
    }
    cov *= inv_n;
    var_src *= inv_n;
    if !(var_src > 0.0) || !var_src.is_finite() {
        return Err(Error::Degenerate("source points are coincident".into()));
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("svd did not converge".into())),
    };
    let mut sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if sv[order[1]] <= RANK_TOL * sv[order[0]].max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("cross-covariance has rank < 2 (collinear points)".into()));
    }
    // Flip the direction paired with the smallest singular value when U·Vᵀ is a reflection.
    let mut d = Vec3::repeat(1.0);
    if (u * v_t).determinant() < 0.0 {
        d[order[2]] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&d) * v_t;
    sv.component_mul_assign(&d);
    let scale = if with_scale { sv.sum() / var_src } else { 1.0 };
    let translation = mu_dst - rotation * mu_src * scale;
    Ok(Similarity { scale, rotation, translation })
}

fn residual_rms(t: &Similarity, src: &[Vec3], dst: &[Vec3]) -> f64 {
    let ss: f64 = src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum();
    (ss / src.len() as f64).sqrt()
}

fn to_pose(t: &Similarity, src: &[Vec3]) -> Pose {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in src {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let norm = extent.norm();
    // Planar sources have a zero extent; keep the size strictly positive.
    let floor = norm * 1e-12;
    let size = extent.map(|e| e.max(floor)) / norm * t.scale;
    Pose { rotation: Rotation::from_matrix(&t.rotation), translation: t.translation, scale: size }
}

fn finish(t: Similarity, src: &[Vec3], dst: &[Vec3]) -> SimilarityFit {
    SimilarityFit { pose: to_pose(&t, src), residual_rms: residual_rms(&t, src, dst), transform: t }
}

/// Similarity transform mapping NOCS coordinates onto observed camera-frame points.
pub fn solve_similarity(src: &NocsMap, dst: &PointCloud) -> Result<SimilarityFit> {
    let t = umeyama(&src.coords, &dst.points, true)?;
    Ok(finish(t, &src.coords, &dst.points))
}

/// RANSAC over minimal samples, refit on the best consensus set.
pub fn solve_similarity_robust(src: &NocsMap, dst: &PointCloud, cfg: &RansacConfig) -> Result<RobustFit> {
    let (src, dst) = (&src.coords, &dst.points);
    if src.len() != dst.len() {
        return Err(Error::invalid("correspondence sets differ in size"));
    }
    let k = cfg.sample_size.max(3);
    if src.len() < k {
        return Err(Error::InsufficientPoints { needed: k, got: src.len() });
    }
    let thr2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let inliers_of = |t: &Similarity| -> Vec<usize> {
        (0..src.len()).filter(|&i| (t.apply(&src[i]) - dst[i]).norm_squared() <= thr2).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Vec<usize> = Vec::new();
    let mut s_buf = Vec::with_capacity(k);
    let mut d_buf = Vec::with_capacity(k);
    for _ in 0..cfg.iterations {
        let sample = index::sample(&mut rng, src.len(), k);
        s_buf.clear();
        d_buf.clear();
        for i in sample.iter() {
            s_buf.push(src[i]);
            d_buf.push(dst[i]);
        }
        let Ok(t) = umeyama(&s_buf, &d_buf, true) else {
            continue;
        };
        let inl = inliers_of(&t);
        if inl.len() > best.len() {
            best = inl;
            if best.len() == src.len() {
                break;
            }
        }
    }
    if best.len() < k {
        return Err(Error::NoConsensus { needed: k });
    }

    // Refit on the consensus set, then re-collect inliers under the refined model once.
    let pick = |idx: &[usize]| -> (Vec<Vec3>, Vec<Vec3>) { idx.iter().map(|&i| (src[i], dst[i])).unzip() };
    let (s_in, d_in) = pick(&best);
    let mut t = umeyama(&s_in, &d_in, true)?;
    let refined = inliers_of(&t);
    if refined.len() >= best.len() && refined != best {
        let (s2, d2) = pick(&refined);
        if let Ok(t2) = umeyama(&s2, &d2, true) {
            t = t2;
            best = refined;
        }
    }
    let (s_in, d_in) = pick(&best);
    Ok(RobustFit { fit: finish(t, &s_in, &d_in), inliers: best })
}
