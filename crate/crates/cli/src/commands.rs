use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::Args;
use posekit::dataio::annotation::{read_annotations, write_annotations, write_atomic, PoseRecord};
use posekit::dataio::config::{load_config, ToolConfig};
use posekit::dataio::image::read_mask_png;
use posekit::dataio::points::read_points;
use posekit::dataio::synth::{spin_trajectory, synth_generate, NoiseModel, SceneSpec};
use posekit::dataio::video::{list_videos, load_video, parse_intrinsics_json};
use posekit::fit::{fit_pose, fit_pose_and_shape, FitResult};
use posekit::gradcheck::{run_suite, RELATIVE_TOLERANCE};
use posekit::metrics::{evaluate, EvalRecord, Thresholds};
use posekit::registration::{
    propagate_video, propagation_annotations, PropagateConfig, DEFAULT_KEYFRAME_STRIDE, DEFAULT_PROPAGATION_SAMPLES,
};
use posekit::shape::{load_prior_file, procedural, PriorCheck};
use posekit::umeyama::{solve_similarity_robust, umeyama};
use posekit::{Intrinsics, Mesh, NocsMap, PointCloud, Pose, Rotation, Vec3};
use posekit_serve::ServeOptions;
use serde_json::json;

use crate::Failure;

type CmdResult = Result<(), Failure>;

pub struct Context {
    seed: u64,
    config: ToolConfig,
}

impl Context {
    pub fn new(seed: u64, config: Option<&Path>) -> Result<Self, Failure> {
        let config = match config {
            Some(path) => load_config(path)?,
            None => ToolConfig::default(),
        };
        Ok(Self { seed, config })
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values always serialize"));
}

fn vec_json(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Debug, Args)]
pub struct SolveUmeyamaArgs {
    /// Source points, one `x y z` per line.
    #[arg(long)]
    src: PathBuf,
    /// Destination points, corresponding line by line.
    #[arg(long)]
    dst: PathBuf,
    /// Fix the scale to 1 (rigid transform).
    #[arg(long, conflicts_with = "robust")]
    rigid: bool,
    /// RANSAC over minimal samples; the source points are NOCS coordinates.
    #[arg(long)]
    robust: bool,
}

pub fn solve_umeyama(ctx: &Context, args: SolveUmeyamaArgs) -> CmdResult {
    let src = read_points(&args.src)?;
    let dst = read_points(&args.dst)?;
    if args.robust {
        let mut ransac = ctx.config.ransac;
        ransac.seed = ctx.seed;
        let robust = solve_similarity_robust(&NocsMap::new(src)?, &PointCloud::new(dst)?, &ransac)?;
        let t = robust.fit.transform;
        print_json(&json!({
            "scale": t.scale,
            "rotation": t.rotation.row_iter().map(|r| [r[0], r[1], r[2]]).collect::<Vec<_>>(),
            "quaternion": Rotation::from_matrix(&t.rotation).quaternion(),
            "translation": vec_json(&t.translation),
            "residual_rms": robust.fit.residual_rms,
            "inliers": robust.inliers.len(),
            "pose": PoseRecord::from_pose(&robust.fit.pose),
        }));
        return Ok(());
    }
    let t = umeyama(&src, &dst, !args.rigid)?;
    let rms =
        (src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum::<f64>() / src.len() as f64).sqrt();
    print_json(&json!({
        "scale": t.scale,
        "rotation": t.rotation.row_iter().map(|r| [r[0], r[1], r[2]]).collect::<Vec<_>>(),
        "quaternion": Rotation::from_matrix(&t.rotation).quaternion(),
        "translation": vec_json(&t.translation),
        "residual_rms": rms,
    }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Target silhouette: 8-bit grayscale PNG, nonzero = object.
    #[arg(long)]
    mask: PathBuf,
    /// Camera intrinsics JSON (`fx fy cx cy width height`).
    #[arg(long)]
    intrinsics: PathBuf,
    /// Initial pose JSON (`quaternion`, `translation_m`, `size_m`).
    #[arg(long)]
    init: PathBuf,
    /// Mesh to fit (Wavefront OBJ in the canonical frame).
    #[arg(long, conflicts_with = "category", required_unless_present = "category")]
    prior: Option<PathBuf>,
    /// Use the built-in prior of this category instead of `--prior`.
    #[arg(long)]
    category: Option<String>,
    /// Also fit a per-vertex deformation of the prior.
    #[arg(long)]
    shape: bool,
    /// Iteration budget (overrides the configuration).
    #[arg(long)]
    iters: Option<usize>,
    /// Write the fitted pose JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn fit(ctx: &Context, args: FitArgs) -> CmdResult {
    let target = read_mask_png(&args.mask)?;
    let k = parse_intrinsics_json(&read_text(&args.intrinsics)?)?;
    let init = posekit::dataio::parse_pose_json(&read_text(&args.init)?)?;
    let mesh = match (&args.prior, &args.category) {
        (Some(path), _) => load_prior_file(path, &PriorCheck::relaxed())?,
        (None, Some(category)) => procedural::prior(category)
            .ok_or_else(|| invalid(format!("no built-in prior for category '{category}'")))?,
        (None, None) => unreachable!("clap requires --prior or --category"),
    };
    let mut cfg = ctx.config.fit;
    if let Some(iters) = args.iters {
        cfg.max_iters = iters;
    }
    let (result, deformation): (FitResult, Option<f64>) = if args.shape {
        let r = fit_pose_and_shape(&target, &mesh, &k, &init, &cfg)?;
        (r.fit, Some(r.delta.mean_magnitude()))
    } else {
        (fit_pose(&target, &mesh, &k, &init, &cfg)?, None)
    };
    let record = PoseRecord::from_pose(&result.pose);
    let mut report = json!({
        "pose": record,
        "iterations": result.iterations,
        "converged": result.converged,
        "diverged": result.diverged,
        "rejected_steps": result.rejected_steps,
        "silhouette_iou": result.silhouette_iou,
        "initial_loss": result.loss_trajectory.first(),
        "final_loss": result.loss_trajectory.last(),
    });
    if let Some(d) = deformation {
        report["mean_deformation"] = json!(d);
    }
    print_json(&report);
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&record).expect("pose records always serialize");
        write_atomic(out, text.as_bytes())?;
    }
    if result.diverged {
        return Err(Failure::Runtime("fit diverged; the reported pose is the last accepted iterate".into()));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory holding one sub-directory per video.
    #[arg(long)]
    root: PathBuf,
    /// Prediction file name inside each video directory.
    #[arg(long, default_value = "annotations.json")]
    pred: String,
    /// Ground-truth file name inside each video directory.
    #[arg(long, default_value = "groundtruth.json")]
    gt: String,
    /// Also write the table as `category,metric,value` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> CmdResult {
    let mut records = Vec::new();
    for dir in list_videos(&args.root)? {
        let (pred_path, gt_path) = (dir.join(&args.pred), dir.join(&args.gt));
        if !pred_path.is_file() || !gt_path.is_file() {
            log::warn!("{}: skipped, needs both {} and {}", dir.display(), args.pred, args.gt);
            continue;
        }
        let video = load_video(&dir)?;
        let symmetry = ctx.config.category(&video.category)?.symmetry;
        let pred = read_annotations(&pred_path)?.poses()?;
        let gt = read_annotations(&gt_path)?.poses()?;
        for (frame, gt_pose) in &gt {
            match pred.get(frame) {
                Some(p) => {
                    records.push(EvalRecord { category: video.category.clone(), pred: *p, gt: *gt_pose, symmetry })
                }
                None => log::warn!("{}: frame {frame} has no prediction", video.id),
            }
        }
    }
    if records.is_empty() {
        return Err(invalid(format!(
            "no frames with both a prediction and ground truth under {}",
            args.root.display()
        )));
    }
    let table = evaluate(&records, &Thresholds::default())?;
    println!("{}", table.render());
    if let Some(csv) = &args.csv {
        write_atomic(csv, table.to_csv().as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    /// Video directory with keyframes in its annotations.
    #[arg(long)]
    video: PathBuf,
    /// Points sampled per frame for registration.
    #[arg(long, default_value_t = DEFAULT_PROPAGATION_SAMPLES)]
    samples: usize,
    /// Expected keyframe spacing; longer unanchored spans are reported.
    #[arg(long, default_value_t = DEFAULT_KEYFRAME_STRIDE)]
    keyframe_stride: usize,
    /// Trim fraction for the registration (overrides the configuration).
    #[arg(long)]
    trim: Option<f64>,
    /// Where to write the result (defaults to the video's annotations file).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn propagate(ctx: &Context, args: PropagateArgs) -> CmdResult {
    let video = load_video(&args.video)?;
    let mut cfg = PropagateConfig {
        icp: ctx.config.icp,
        sample_count: args.samples,
        seed: ctx.seed,
        keyframe_stride: args.keyframe_stride,
    };
    if let Some(trim) = args.trim {
        cfg.icp.trim_fraction = trim;
    }
    let result = propagate_video(&video, &cfg, &|done| log::info!("{done}/{} frames", video.frame_count))?;
    let out = args.out.unwrap_or_else(|| video.annotations_path());
    write_annotations(&out, &propagation_annotations(&result))?;
    let unpropagated = result.unpropagated();
    println!(
        "{}: {} of {} frames posed, written to {}",
        video.id,
        result.poses.len(),
        video.frame_count,
        out.display()
    );
    if !unpropagated.is_empty() {
        println!("unpropagated frames: {unpropagated:?}");
    }
    for w in &result.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output video directory.
    #[arg(long)]
    out: PathBuf,
    /// Object category (selects the built-in prior mesh).
    #[arg(long, default_value = "mug")]
    category: String,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Rotation per frame about the camera's vertical axis, degrees.
    #[arg(long, default_value_t = 1.0)]
    deg_per_frame: f64,
    /// Translation per frame along camera x, millimetres.
    #[arg(long, default_value_t = 2.0)]
    step_mm: f64,
    /// Object bounding-box diagonal, metres.
    #[arg(long, default_value_t = 0.2)]
    diagonal_m: f64,
    /// Object distance from the camera, metres.
    #[arg(long, default_value_t = 0.6)]
    distance_m: f64,
    /// Gaussian depth noise, millimetres.
    #[arg(long, default_value_t = 0.0)]
    noise_mm: f64,
    /// Fraction of foreground depth readings replaced by outliers.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    /// Store every n-th ground-truth pose as a keyframe annotation (0: none).
    #[arg(long, default_value_t = DEFAULT_KEYFRAME_STRIDE)]
    keyframe_stride: usize,
    #[arg(long, default_value_t = 320)]
    width: u32,
    #[arg(long, default_value_t = 240)]
    height: u32,
    /// Focal length in pixels (both axes).
    #[arg(long, default_value_t = 300.0)]
    focal: f64,
}

pub fn synth(ctx: &Context, args: SynthArgs) -> CmdResult {
    let mesh = procedural::prior(&args.category)
        .ok_or_else(|| invalid(format!("no built-in prior for category '{}'", args.category)))?;
    let k = Intrinsics::new(
        args.focal,
        args.focal,
        (args.width as f64 - 1.0) / 2.0,
        (args.height as f64 - 1.0) / 2.0,
        args.width,
        args.height,
    )?;
    let start = Pose::new(
        Rotation::from_axis_angle(&Vec3::new(1.0, 0.2, 0.1), 0.4),
        Vec3::new(0.0, 0.0, args.distance_m),
        extents(&mesh) * args.diagonal_m,
    )?;
    let spec = SceneSpec {
        mesh,
        trajectory: spin_trajectory(
            &start,
            &Vec3::y(),
            args.deg_per_frame,
            &Vec3::new(args.step_mm / 1000.0, 0.0, 0.0),
            args.frames,
        ),
        intrinsics: k,
        noise: NoiseModel { depth_sigma_mm: args.noise_mm, outlier_fraction: args.outliers },
        category: args.category,
    };
    let video = synth_generate(&spec, ctx.seed)?;
    let stride = (args.keyframe_stride > 0).then_some(args.keyframe_stride);
    video.write(&args.out, stride)?;
    println!("{}: {} frames of '{}'", args.out.display(), video.frames.len(), video.category);
    Ok(())
}

/// Axis-aligned extents of a canonical mesh (unit bounding-box diagonal).
fn extents(mesh: &Mesh) -> Vec3 {
    let (lo, hi) = mesh.bounds();
    hi - lo
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random poses.
    #[arg(long, default_value_t = 10)]
    poses: usize,
}

pub fn gradcheck(ctx: &Context, args: GradcheckArgs) -> CmdResult {
    if args.poses == 0 {
        return Err(invalid("--poses must be at least 1"));
    }
    let report = run_suite(args.poses, ctx.seed)?;
    let worst = report.worst().map_or("-", |w| w.name.as_str());
    println!(
        "max relative error {:.3e} over {} entries (worst: {worst}); tolerance {RELATIVE_TOLERANCE:e}",
        report.max_relative_error(),
        report.entries.len()
    );
    if !report.passed() {
        return Err(Failure::Runtime("analytic gradients disagree with finite differences".into()));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Dataset directory holding one sub-directory per video.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Built annotator assets to serve at `/`.
    #[arg(long = "static", value_name = "DIR")]
    static_dir: Option<PathBuf>,
}

pub fn serve(ctx: &Context, args: ServeArgs) -> CmdResult {
    let mut opts = ServeOptions::new(args.root);
    opts.static_dir = args.static_dir;
    opts.propagate.icp = ctx.config.icp;
    opts.propagate.seed = ctx.seed;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime
        .block_on(posekit_serve::serve(opts, SocketAddr::new(args.host, args.port)))
        .map_err(|e| Failure::Runtime(e.to_string()))
}
