//! Synthetic RGB-D videos of a posed mesh with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::annotation::{AnnotationFile, FrameAnnotation, PoseRecord};
use super::video::{write_video, FrameImages};
use crate::error::{Error, Result};
use crate::geometry::{backproject_with_pixels, Intrinsics, NocsMap, PointCloud, Pose, Rotation, Vec3};
use crate::mesh::Mesh;
use crate::raster::{BinaryMask, DepthImage, Grid, RgbImage};

const NEAR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NoiseModel {
    /// Standard deviation of additive Gaussian depth noise, millimetres.
    pub depth_sigma_mm: f64,
    /// Fraction of foreground pixels whose depth is replaced by a uniform draw in `[0.5·z, 1.5·z]`.
    pub outlier_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub mesh: Mesh,
    pub trajectory: Vec<Pose>,
    pub intrinsics: Intrinsics,
    pub noise: NoiseModel,
    pub category: String,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        self.intrinsics.validate()?;
        if self.trajectory.is_empty() {
            return Err(Error::invalid("scene trajectory is empty"));
        }
        for p in &self.trajectory {
            p.validate()?;
        }
        let n = &self.noise;
        if !(n.depth_sigma_mm.is_finite() && n.depth_sigma_mm >= 0.0) || !(0.0..=1.0).contains(&n.outlier_fraction) {
            return Err(Error::invalid("noise parameters must be non-negative (outlier fraction at most 1)"));
        }
        Ok(())
    }
}

/// Ground-truth object coordinates per pixel (`None` off the object).
pub type NocsImage = Grid<Option<Vec3>>;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub images: FrameImages,
    /// Quantized depth before noise and outliers.
    pub clean_depth: DepthImage,
    pub nocs: NocsImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub intrinsics: Intrinsics,
    pub category: String,
    pub frames: Vec<SynthFrame>,
    pub ground_truth: AnnotationFile,
}

/// Nearest ray hit per pixel center, metres (`f64::INFINITY` where the ray misses).
pub fn render_depth(mesh: &Mesh, pose: &Pose, k: &Intrinsics) -> Grid<f64> {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut z = Grid::filled(w, h, f64::INFINITY);
    let world: Vec<Vec3> = mesh.vertices.iter().map(|v| pose.apply(v, true)).collect();
    for f in &mesh.faces {
        let p = [world[f[0]], world[f[1]], world[f[2]]];
        if p.iter().any(|q| q.z <= NEAR) {
            continue;
        }
        let uv = p.map(|q| k.project(&q));
        let area = (uv[1].0 - uv[0].0) * (uv[2].1 - uv[0].1) - (uv[2].0 - uv[0].0) * (uv[1].1 - uv[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let normal = (p[1] - p[0]).cross(&(p[2] - p[0]));
        let offset = normal.dot(&p[0]);
        let lo_u = uv.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi_u = uv.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
        let lo_v = uv.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi_v = uv.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
        if lo_u > hi_u || lo_v > hi_v {
            continue;
        }
        for v in lo_v as usize..=hi_v as usize {
            for u in lo_u as usize..=hi_u as usize {
                let (x, y) = (u as f64, v as f64);
                let edge =
                    |a: (f64, f64), b: (f64, f64)| ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)) * area.signum();
                if edge(uv[0], uv[1]) < 0.0 || edge(uv[1], uv[2]) < 0.0 || edge(uv[2], uv[0]) < 0.0 {
                    continue;
                }
                let ray = Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
                let denom = normal.dot(&ray);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let depth = offset / denom;
                let cell = z.get_mut(u, v);
                if depth > NEAR && depth < *cell {
                    *cell = depth;
                }
            }
        }
    }
    z
}

fn quantize_mm(z: f64) -> u16 {
    (z * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
}

/// NOCS colormap: `(nocs + 0.5)` scaled to 8 bits.
pub fn nocs_color(nocs: &Vec3) -> [u8; 3] {
    let q = |c: f64| ((c + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(nocs.x), q(nocs.y), q(nocs.z)]
}

/// Renders every trajectory pose: masks are the ray-hit footprint, depth is the
/// nearest hit plus seeded noise, NOCS inverts the pose on the clean
/// back-projected depth.
pub fn synth_generate(spec: &SceneSpec, seed: u64) -> Result<SynthVideo> {
    spec.validate()?;
    let k = &spec.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spec.noise.depth_sigma_mm / 1000.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.trajectory.len());
    let mut ground_truth = AnnotationFile::default();
    for (index, pose) in spec.trajectory.iter().enumerate() {
        let z = render_depth(&spec.mesh, pose, k);
        let mask: BinaryMask = z.map(|d| d.is_finite());
        if mask.count() == 0 {
            return Err(Error::Scene { frame: index, msg: "the object is not visible".into() });
        }
        let clean_depth: DepthImage = z.map(|&d| if d.is_finite() { quantize_mm(d) } else { 0 });
        let r_t = pose.rotation.to_matrix().transpose();
        let inv_s = 1.0 / pose.scale_factor();
        let nocs: NocsImage = Grid::from_fn(z.width(), z.height(), |u, v| {
            let d = *clean_depth.get(u, v);
            (d > 0).then(|| {
                let p = k.unproject(u as f64, v as f64, d as f64 / 1000.0);
                r_t * (p - pose.translation) * inv_s
            })
        });
        let rgb: RgbImage = nocs.map(|n| n.as_ref().map_or([0, 0, 0], nocs_color));
        let mut depth = clean_depth.clone();
        for (d, &zz) in depth.data_mut().iter_mut().zip(z.data()) {
            if !zz.is_finite() {
                continue;
            }
            let observed = if spec.noise.outlier_fraction > 0.0 && rng.random::<f64>() < spec.noise.outlier_fraction {
                rng.random_range(0.5 * zz..1.5 * zz)
            } else if spec.noise.depth_sigma_mm > 0.0 {
                zz + normal.sample(&mut rng)
            } else {
                continue;
            };
            *d = quantize_mm(observed);
        }
        ground_truth.frames.insert(
            index,
            FrameAnnotation { pose: PoseRecord::from_pose(pose), is_keyframe: false, drift_rms_m: None },
        );
        frames.push(SynthFrame { images: FrameImages { rgb, depth, mask }, clean_depth, nocs });
    }
    Ok(SynthVideo { intrinsics: *k, category: spec.category.clone(), frames, ground_truth })
}

impl SynthVideo {
    /// Ground-truth poses of every `stride`-th frame marked as keyframes.
    pub fn keyframe_annotations(&self, stride: usize) -> AnnotationFile {
        let mut out = AnnotationFile::default();
        for (&f, a) in &self.ground_truth.frames {
            if stride > 0 && f % stride == 0 {
                out.frames.insert(f, FrameAnnotation { is_keyframe: true, ..a.clone() });
            }
        }
        out
    }

    /// Writes the video; `keyframe_stride` seeds `annotations.json` from ground truth.
    pub fn write(&self, path: &std::path::Path, keyframe_stride: Option<usize>) -> Result<()> {
        let images: Vec<FrameImages> = self.frames.iter().map(|f| f.images.clone()).collect();
        let annotations = keyframe_stride.map(|s| self.keyframe_annotations(s));
        write_video(path, &self.intrinsics, &self.category, &images, annotations.as_ref(), Some(&self.ground_truth))
    }
}

/// Sampled (ground-truth NOCS, observed point) pairs of one frame.
pub fn nocs_correspondences(
    frame: &SynthFrame,
    k: &Intrinsics,
    sample_count: usize,
    seed: u64,
) -> Result<(NocsMap, PointCloud)> {
    let bp = backproject_with_pixels(&frame.images.depth, None, k, &frame.images.mask, sample_count, seed)?;
    let coords = bp
        .pixels
        .iter()
        .map(|&(u, v)| frame.nocs.get(u, v).ok_or_else(|| Error::invalid("sampled pixel has no NOCS value")))
        .collect::<Result<Vec<_>>>()?;
    Ok((NocsMap::new(coords)?, bp.cloud))
}

/// `frames` poses turning about the camera-frame `axis` through the object
/// center by `deg_per_frame` and drifting by `step` per frame.
pub fn spin_trajectory(start: &Pose, axis: &Vec3, deg_per_frame: f64, step: &Vec3, frames: usize) -> Vec<Pose> {
    (0..frames)
        .map(|f| Pose {
            rotation: Rotation::from_axis_angle(axis, (deg_per_frame * f as f64).to_radians()).compose(&start.rotation),
            translation: start.translation + step * f as f64,
            scale: start.scale,
        })
        .collect()
}
