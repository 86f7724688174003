//! Trimmed colored ICP and keyframe pose propagation along a video.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::dataio::annotation::{AnnotationFile, FrameAnnotation, PoseRecord};
use crate::dataio::video::VideoRecord;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose, Rotation, Vec3};
use crate::umeyama::umeyama;

pub const MIN_CLOUD_POINTS: usize = 50;
pub const MIN_CORRESPONDENCES: usize = 10;
pub const DEFAULT_KEYFRAME_STRIDE: usize = 50;
pub const DEFAULT_PROPAGATION_SAMPLES: usize = 2000;
const RMS_TOLERANCE: f64 = 1e-6;

/// `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: Self = Self { rotation: Rotation::IDENTITY, translation: Vec3::new(0.0, 0.0, 0.0) };

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.inverse();
        RigidTransform { rotation: r, translation: -r.rotate(&self.translation) }
    }

    /// Moves an object pose by this camera-frame motion; size is unchanged.
    pub fn apply_to_pose(&self, pose: &Pose) -> Pose {
        // The identity must reproduce the pose bit-for-bit (no renormalization drift).
        if *self == Self::IDENTITY {
            return *pose;
        }
        Pose {
            rotation: self.rotation.compose(&pose.rotation).renormalized(),
            translation: self.apply(&pose.translation),
            scale: pose.scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Metres; also the spatial hash cell size.
    pub correspondence_radius: f64,
    pub trim_fraction: f64,
    /// Weight `w` of the squared color difference (colors in `[0, 1]`).
    pub color_weight: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iters: 50, correspondence_radius: 0.05, trim_fraction: 0.2, color_weight: 0.1 }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.correspondence_radius.is_finite() && self.correspondence_radius > 0.0) {
            return Err(Error::invalid("correspondence radius must be positive"));
        }
        if !(0.0..1.0).contains(&self.trim_fraction) {
            return Err(Error::invalid("trim fraction must lie in [0, 1)"));
        }
        if !(self.color_weight.is_finite() && self.color_weight >= 0.0) {
            return Err(Error::invalid("color weight must be non-negative"));
        }
        Ok(())
    }
}

/// Geometric RMS over one iteration's surviving correspondences, before and
/// after that iteration's re-solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpIteration {
    pub correspondences: usize,
    pub rms_before: f64,
    pub rms_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps `src` into the frame of `dst`.
    pub transform: RigidTransform,
    pub rms: f64,
    pub iterations: usize,
    pub history: Vec<IcpIteration>,
}

type Cell = (i64, i64, i64);

/// Uniform spatial hash over a point set.
struct HashGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    buckets: HashMap<Cell, Vec<usize>>,
}

impl<'a> HashGrid<'a> {
    fn new(points: &'a [Vec3], cell: f64) -> Self {
        let mut buckets: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points, cell, buckets }
    }

    fn key(p: &Vec3, cell: f64) -> Cell {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    /// Indices of points within `cell` of `p`, ascending per bucket.
    fn neighbors(&self, p: &Vec3) -> impl Iterator<Item = usize> + '_ {
        let (cx, cy, cz) = Self::key(p, self.cell);
        let p = *p;
        let r2 = self.cell * self.cell;
        (-1..=1)
            .flat_map(move |dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| (cx + dx, cy + dy, cz + dz))))
            .filter_map(|c| self.buckets.get(&c))
            .flatten()
            .copied()
            .filter(move |&j| (self.points[j] - p).norm_squared() <= r2)
    }
}

fn color_of(cloud: &PointCloud, i: usize) -> Vec3 {
    cloud.colors.as_ref().map_or_else(Vec3::zeros, |c| c[i])
}

fn rms(pairs: &[(usize, usize)], src: &[Vec3], dst: &[Vec3], t: &RigidTransform) -> f64 {
    let sum: f64 = pairs.iter().map(|&(i, j)| (t.apply(&src[i]) - dst[j]).norm_squared()).sum();
    (sum / pairs.len() as f64).sqrt()
}

/// Point-to-point ICP with nearest neighbors under `‖Δx‖² + w·‖Δc‖²`, trimming
/// the worst correspondences before every rigid re-solve.
pub fn icp_colored(src: &PointCloud, dst: &PointCloud, init: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult> {
    cfg.validate()?;
    src.validate()?;
    dst.validate()?;
    for cloud in [src, dst] {
        if cloud.len() < MIN_CLOUD_POINTS {
            return Err(Error::InsufficientPoints { needed: MIN_CLOUD_POINTS, got: cloud.len() });
        }
    }
    let grid = HashGrid::new(&dst.points, cfg.correspondence_radius);
    let mut transform = *init;
    let mut history = Vec::new();
    let mut previous: Option<f64> = None;

    for _ in 0..cfg.max_iters {
        let mut pairs: Vec<(f64, usize, usize)> = src
            .points
            .par_iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let moved = transform.apply(p);
                let color = color_of(src, i);
                grid.neighbors(&moved)
                    .map(|j| {
                        let d2 = (dst.points[j] - moved).norm_squared()
                            + cfg.color_weight * (color_of(dst, j) - color).norm_squared();
                        (d2, i, j)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)))
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = pairs.len() - (pairs.len() as f64 * cfg.trim_fraction).floor() as usize;
        pairs.truncate(keep);
        if pairs.len() < MIN_CORRESPONDENCES {
            return Err(Error::RegistrationFailed { correspondences: pairs.len(), needed: MIN_CORRESPONDENCES });
        }
        let kept: Vec<(usize, usize)> = pairs.iter().map(|&(_, i, j)| (i, j)).collect();
        let rms_before = rms(&kept, &src.points, &dst.points, &transform);
        if rms_before == 0.0 {
            history.push(IcpIteration { correspondences: kept.len(), rms_before, rms_after: 0.0 });
            break;
        }

        // Solve the increment from the currently transformed points so the
        // least-squares optimum over these pairs is reached exactly.
        let moved: Vec<Vec3> = kept.iter().map(|&(i, _)| transform.apply(&src.points[i])).collect();
        let targets: Vec<Vec3> = kept.iter().map(|&(_, j)| dst.points[j]).collect();
        let step = umeyama(&moved, &targets, false)?;
        let delta = RigidTransform::new(Rotation::from_matrix(&step.rotation), step.translation);
        let candidate = delta.compose(&transform);
        let rms_after = rms(&kept, &src.points, &dst.points, &candidate);
        // Round-off can leave the re-solve a hair worse at a fixed point.
        let rms_after = if rms_after <= rms_before {
            transform = candidate;
            rms_after
        } else {
            rms_before
        };
        history.push(IcpIteration { correspondences: kept.len(), rms_before, rms_after });
        if previous.is_some_and(|p| (p - rms_after).abs() < RMS_TOLERANCE) {
            break;
        }
        previous = Some(rms_after);
    }
    Ok(IcpResult { transform, rms: history.last().map_or(0.0, |h| h.rms_after), iterations: history.len(), history })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagateConfig {
    pub icp: IcpConfig,
    /// Points drawn per frame when clouds are built from images.
    pub sample_count: usize,
    pub seed: u64,
    /// Expected keyframe spacing; longer unanchored runs are reported as warnings.
    pub keyframe_stride: usize,
}

impl Default for PropagateConfig {
    fn default() -> Self {
        Self {
            icp: IcpConfig::default(),
            sample_count: DEFAULT_PROPAGATION_SAMPLES,
            seed: 0,
            keyframe_stride: DEFAULT_KEYFRAME_STRIDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameStatus {
    Keyframe,
    Propagated {
        from: usize,
    },
    /// No governing keyframe precedes this frame.
    Unanchored,
    /// The registration of frame `link` failed; later frames of the segment are skipped.
    Failed {
        link: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub poses: BTreeMap<usize, Pose>,
    /// Registration residual RMS against the governing keyframe, metres (0 at keyframes).
    pub drift_rms: BTreeMap<usize, f64>,
    pub status: Vec<FrameStatus>,
    pub warnings: Vec<String>,
}

impl Propagation {
    pub fn unpropagated(&self) -> Vec<usize> {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, FrameStatus::Unanchored | FrameStatus::Failed { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Carries each keyframe's pose forward to the frames it governs (those up to
/// the next keyframe).
///
/// Frame `f` is registered directly against its keyframe cloud, starting from
/// the transform found for frame `f − 1`; the chain therefore tracks the motion
/// frame by frame without accumulating per-link error. Keyframe segments run in
/// parallel. After a failed registration the rest of the segment stays
/// unpropagated until the next keyframe re-anchors it.
///
/// `frames(f)` yields the object cloud of frame `f`; `progress` receives the
/// number of frames finished so far.
pub fn propagate_frames<F>(
    frame_count: usize,
    frames: F,
    keyframes: &BTreeMap<usize, Pose>,
    cfg: &PropagateConfig,
    progress: &(dyn Fn(usize) + Sync),
) -> Result<Propagation>
where
    F: Fn(usize) -> Result<PointCloud> + Sync,
{
    cfg.icp.validate()?;
    if keyframes.is_empty() {
        return Err(Error::invalid("propagation needs at least one keyframe"));
    }
    if let Some((&f, _)) = keyframes.iter().find(|(&f, _)| f >= frame_count) {
        return Err(Error::invalid(format!("keyframe {f} is outside a {frame_count}-frame video")));
    }
    for pose in keyframes.values() {
        pose.validate()?;
    }

    let starts: Vec<usize> = keyframes.keys().copied().collect();
    let done = AtomicUsize::new(0);
    let tick = || progress(done.fetch_add(1, Ordering::Relaxed) + 1);
    type Segment = Vec<(usize, FrameStatus, Option<(Pose, f64)>)>;
    let segments: Vec<Segment> = starts
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            let end = starts.get(i + 1).copied().unwrap_or(frame_count);
            let key_pose = keyframes[&k];
            let mut out: Segment = vec![(k, FrameStatus::Keyframe, Some((key_pose, 0.0)))];
            tick();
            let key_cloud = if end > k + 1 { Some(frames(k).map_err(|e| e.to_string())) } else { None };
            let mut state: std::result::Result<RigidTransform, (usize, String)> = Ok(RigidTransform::IDENTITY);
            for f in k + 1..end {
                if let Ok(init) = state {
                    let registered = match key_cloud.as_ref().expect("loaded for non-empty segments") {
                        Err(e) => Err(format!("keyframe {k}: {e}")),
                        Ok(src) => frames(f)
                            .map_err(|e| format!("frame {f}: {e}"))
                            .and_then(|dst| icp_colored(src, &dst, &init, &cfg.icp).map_err(|e| e.to_string())),
                    };
                    state = registered
                        .map(|r| {
                            out.push((
                                f,
                                FrameStatus::Propagated { from: k },
                                Some((r.transform.apply_to_pose(&key_pose), r.rms)),
                            ));
                            r.transform
                        })
                        .map_err(|reason| (f, reason));
                }
                if let Err((link, reason)) = &state {
                    out.push((f, FrameStatus::Failed { link: *link, reason: reason.clone() }, None));
                }
                tick();
            }
            out
        })
        .collect();

    let mut out = Propagation {
        poses: BTreeMap::new(),
        drift_rms: BTreeMap::new(),
        status: vec![FrameStatus::Unanchored; frame_count],
        warnings: Vec::new(),
    };
    for (f, status, pose) in segments.into_iter().flatten() {
        out.status[f] = status;
        if let Some((pose, rms)) = pose {
            out.poses.insert(f, pose);
            out.drift_rms.insert(f, rms);
        }
    }

    let first = starts[0];
    if first > 0 {
        out.warnings.push(format!("frames 0..{first} precede the first keyframe"));
    }
    let mut anchors = starts;
    anchors.push(frame_count);
    for w in anchors.windows(2) {
        if w[1] - w[0] > cfg.keyframe_stride {
            out.warnings.push(format!(
                "frames {}..{} span {} frames from one keyframe (stride {})",
                w[0],
                w[1],
                w[1] - w[0],
                cfg.keyframe_stride
            ));
        }
    }
    Ok(out)
}

/// [`propagate_frames`] over preloaded clouds.
pub fn propagate_clouds(
    clouds: &[PointCloud],
    keyframes: &BTreeMap<usize, Pose>,
    cfg: &PropagateConfig,
) -> Result<Propagation> {
    propagate_frames(clouds.len(), |f| Ok(clouds[f].clone()), keyframes, cfg, &|_| ())
}

/// Propagates the keyframes stored in `video.annotations` using masked,
/// colored object clouds of every frame.
pub fn propagate_video(
    video: &VideoRecord,
    cfg: &PropagateConfig,
    progress: &(dyn Fn(usize) + Sync),
) -> Result<Propagation> {
    let keyframes = video.annotations.keyframes()?;
    propagate_frames(
        video.frame_count,
        |f| video.object_cloud(f, cfg.sample_count, cfg.seed),
        &keyframes,
        cfg,
        progress,
    )
}

/// Annotation set after propagation: keyframes as stored, every propagated
/// frame with its residual, unreachable frames listed.
pub fn propagation_annotations(result: &Propagation) -> AnnotationFile {
    let mut out = AnnotationFile::default();
    for (&f, pose) in &result.poses {
        let is_keyframe = result.status[f] == FrameStatus::Keyframe;
        out.frames.insert(
            f,
            FrameAnnotation {
                pose: PoseRecord::from_pose(pose),
                is_keyframe,
                drift_rms_m: (!is_keyframe).then(|| result.drift_rms[&f]),
            },
        );
    }
    out.unpropagated = result.unpropagated();
    out
}
