//! Analysis-by-synthesis: recover a pose (and optionally a shape deformation)
//! from a target silhouette by Adam-style descent through the soft renderer.
//!
//! The pose is optimized in the decoupled space `(q, o_x, o_y, log t_z, log S)`.
//! Every step is guarded: a candidate that raises the loss (at the current
//! sharpness) is halved up to [`BACKTRACK_HALVINGS`] times and rejected if it
//! still does not improve, so the loss is non-increasing within each
//! sharpness stage.

use crate::error::{Error, Result};
use crate::geometry::{decouple_translation, project_translation, Intrinsics, Pose, Rotation, Vec3};
use crate::losses::{deformation_reg, silhouette_loss, silhouette_loss_with_grad};
use crate::mesh::Mesh;
use crate::raster::BinaryMask;
use crate::shape::{apply_deformation, Deformation};
use crate::softrender::{hard_mask, render_silhouette, render_with_gradients, RenderConfig, RenderGradients};

pub const BACKTRACK_HALVINGS: usize = 5;
const DIVERGENCE_FACTOR: f64 = 2.0;
const DIVERGENCE_STEPS: usize = 20;
/// Sharpness used to score the final pose against the target.
const SCORING_SIGMA: f64 = 1e-4;

/// Geometric sharpness annealing: `σ_i = max(initial · factor^⌊i / every⌋, min)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
    pub min: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self { initial: 1.0, factor: 0.5, every: 50, min: 1.0 / 64.0 }
    }
}

impl SigmaSchedule {
    pub fn constant(sigma: f64) -> Self {
        Self { initial: sigma, factor: 1.0, every: usize::MAX, min: sigma }
    }

    pub fn stage(&self, iter: usize) -> usize {
        iter.checked_div(self.every).unwrap_or(0)
    }

    pub fn at(&self, iter: usize) -> f64 {
        let stage = self.stage(iter).min(i32::MAX as usize) as i32;
        (self.initial * self.factor.powi(stage)).max(self.min)
    }

    fn at_floor(&self, iter: usize) -> bool {
        self.at(iter) <= self.min
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Learning rate for quaternion components.
    pub lr_rotation: f64,
    /// Learning rate for `log t_z`.
    pub lr_depth: f64,
    /// Learning rate for the image-plane offsets, pixels.
    pub lr_offset: f64,
    /// Learning rate for `log S`; only used when `optimize_scale`.
    pub lr_scale: f64,
    /// Learning rate for deformation offsets (joint shape fitting).
    pub lr_shape: f64,
    /// Learning-rate multiplier applied at every sharpness stage change.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub sigma: SigmaSchedule,
    /// Converged when the loss moves less than this over `convergence_window` steps
    /// once the sharpness schedule has reached its floor.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Silhouettes barely constrain depth against size, so size is held fixed by default.
    pub optimize_scale: bool,
    /// Weight of the deformation regularizer in joint shape fitting.
    pub lambda_reg: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            lr_rotation: 0.01,
            lr_depth: 0.01,
            lr_offset: 0.05,
            lr_scale: 0.01,
            lr_shape: 0.001,
            lr_decay: 0.7,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sigma: SigmaSchedule::default(),
            convergence_tol: 1e-6,
            convergence_window: 10,
            optimize_scale: false,
            lambda_reg: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub pose: Pose,
    /// Objective after every iteration (entry 0 is the initial value), at that iteration's sharpness.
    pub loss_trajectory: Vec<f64>,
    pub sigma_trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub rejected_steps: usize,
    /// Hard-mask IOU between the final render and the target.
    pub silhouette_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeFitResult {
    pub fit: FitResult,
    pub delta: Deformation,
}

/// Optimization state in the decoupled parameterization.
#[derive(Clone, Debug, PartialEq)]
struct Params {
    q: [f64; 4],
    o: [f64; 2],
    log_tz: f64,
    log_s: [f64; 3],
    deltas: Vec<Vec3>,
}

const POSE_DIM: usize = 10;

impl Params {
    fn from_pose(pose: &Pose, k: &Intrinsics, n_deltas: usize) -> Result<Self> {
        let (ox, oy, tz) = project_translation(&pose.translation, k)?;
        Ok(Self {
            q: pose.rotation.quaternion(),
            o: [ox, oy],
            log_tz: tz.ln(),
            log_s: [pose.scale.x.ln(), pose.scale.y.ln(), pose.scale.z.ln()],
            deltas: vec![Vec3::zeros(); n_deltas],
        })
    }

    fn pose(&self, k: &Intrinsics) -> Result<Pose> {
        Ok(Pose {
            rotation: Rotation::from_quaternion(self.q)?,
            translation: decouple_translation(self.o[0], self.o[1], self.log_tz.exp(), k)?,
            scale: Vec3::new(self.log_s[0].exp(), self.log_s[1].exp(), self.log_s[2].exp()),
        })
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(POSE_DIM + 3 * self.deltas.len());
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.o);
        v.push(self.log_tz);
        v.extend_from_slice(&self.log_s);
        for d in &self.deltas {
            v.extend(d.iter());
        }
        v
    }

    fn from_flat(v: &[f64]) -> Self {
        let n = (v.len() - POSE_DIM) / 3;
        let q = [v[0], v[1], v[2], v[3]];
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        Self {
            q: q.map(|c| c / norm),
            o: [v[4], v[5]],
            log_tz: v[6],
            log_s: [v[7], v[8], v[9]],
            deltas: (0..n)
                .map(|i| Vec3::new(v[POSE_DIM + 3 * i], v[POSE_DIM + 3 * i + 1], v[POSE_DIM + 3 * i + 2]))
                .collect(),
        }
    }
}

/// Silhouette objective (+ weighted deformation regularizer) and its gradient
/// w.r.t. the pose and the deformed vertices.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: f64,
    pub silhouette: f64,
    pub render_gradients: RenderGradients,
}

/// One forward/backward evaluation: the renderer's reverse pass seeded with the
/// soft-IOU adjoint.
pub fn silhouette_objective(
    target: &BinaryMask,
    mesh: &Mesh,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<Objective> {
    let render = render_silhouette(mesh, pose, k, cfg)?;
    let (loss, adjoint) = silhouette_loss_with_grad(&render.mask, target)?;
    let (_, grads) = render_with_gradients(mesh, pose, k, cfg, &adjoint)?;
    Ok(Objective { loss: loss.value, silhouette: loss.value, render_gradients: grads })
}

struct Problem<'a> {
    target: &'a BinaryMask,
    mesh: &'a Mesh,
    k: &'a Intrinsics,
    cfg: &'a FitConfig,
    shape: bool,
}

impl Problem<'_> {
    fn mesh_for(&self, p: &Params) -> Result<Mesh> {
        if self.shape {
            apply_deformation(self.mesh, &Deformation { deltas: p.deltas.clone() })
        } else {
            Ok(self.mesh.clone())
        }
    }

    fn render_cfg(&self, sigma: f64) -> RenderConfig {
        RenderConfig::new(self.target.width(), self.target.height(), sigma)
    }

    fn loss(&self, p: &Params, sigma: f64) -> Result<f64> {
        let mesh = self.mesh_for(p)?;
        let render = render_silhouette(&mesh, &p.pose(self.k)?, self.k, &self.render_cfg(sigma))?;
        let sil = silhouette_loss(&render.mask, self.target)?.value;
        Ok(if self.shape { sil + self.cfg.lambda_reg * deformation_reg(&p.deltas) } else { sil })
    }

    fn loss_and_grad(&self, p: &Params, sigma: f64) -> Result<(f64, Vec<f64>)> {
        let mesh = self.mesh_for(p)?;
        let pose = p.pose(self.k)?;
        let obj = silhouette_objective(self.target, &mesh, &pose, self.k, &self.render_cfg(sigma))?;
        let g = &obj.render_gradients;
        let mut grad = vec![0.0; POSE_DIM + 3 * p.deltas.len()];
        grad[..4].copy_from_slice(&g.quaternion);
        let tz = p.log_tz.exp();
        grad[4] = g.translation.x * tz / self.k.fx;
        grad[5] = g.translation.y * tz / self.k.fy;
        grad[6] = g.translation.dot(&pose.translation);
        if self.cfg.optimize_scale {
            for i in 0..3 {
                grad[7 + i] = g.scale[i] * pose.scale[i];
            }
        }
        let mut loss = obj.loss;
        if self.shape {
            loss += self.cfg.lambda_reg * deformation_reg(&p.deltas);
            // The regularizer enters through the proximal shrinkage in `run`.
            for (i, gv) in g.vertices.iter().enumerate() {
                for c in 0..3 {
                    grad[POSE_DIM + 3 * i + c] = gv[c];
                }
            }
        }
        Ok((loss, grad))
    }

    fn learning_rates(&self, n: usize) -> Vec<f64> {
        let c = self.cfg;
        let mut lr = vec![c.lr_rotation; 4];
        lr.extend([c.lr_offset, c.lr_offset, c.lr_depth]);
        let s = if c.optimize_scale { c.lr_scale } else { 0.0 };
        lr.extend([s, s, s]);
        lr.resize(n, if self.shape { c.lr_shape } else { 0.0 });
        lr
    }

    /// Proximal step for the mean-norm regularizer: each offset shrinks toward
    /// zero by its effective step size times `λ_reg / n` (group soft threshold).
    fn shrink_deltas(&self, flat: &mut [f64], eta: &[f64], scale: f64) {
        let n = (flat.len() - POSE_DIM) / 3;
        let weight = self.cfg.lambda_reg / n.max(1) as f64;
        for i in 0..n {
            let at = POSE_DIM + 3 * i;
            let d = Vec3::new(flat[at], flat[at + 1], flat[at + 2]);
            let len = d.norm();
            if len == 0.0 {
                continue;
            }
            let tau = scale * weight * (eta[at] + eta[at + 1] + eta[at + 2]) / 3.0;
            let keep = (1.0 - tau / len).max(0.0);
            for c in 0..3 {
                flat[at + c] *= keep;
            }
        }
    }

    fn run(&self, init: &Pose) -> Result<(Params, FitResult)> {
        let cfg = self.cfg;
        init.validate()?;
        let n_deltas = if self.shape { self.mesh.vertices.len() } else { 0 };
        let mut params = Params::from_pose(init, self.k, n_deltas)?;

        let sigma0 = cfg.sigma.at(0);
        let initial = self.loss(&params, sigma0)?;
        if initial >= 1.0 - 1e-6 {
            return Err(Error::NoOverlap);
        }
        let mut trajectory = vec![initial];
        let mut sigmas = vec![sigma0];
        let mut converged = false;
        let mut diverged = false;
        let mut rejected = 0;
        let mut above = 0;

        let n = POSE_DIM + 3 * n_deltas;
        let base_lr = self.learning_rates(n);
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut iterations = 0;
        for it in 0..cfg.max_iters {
            let sigma = cfg.sigma.at(it);
            let decay = cfg.lr_decay.powi(cfg.sigma.stage(it).min(i32::MAX as usize) as i32);
            let (loss, grad) = self.loss_and_grad(&params, sigma)?;

            let t = (it + 1) as i32;
            let mut step = vec![0.0; n];
            let mut eta = vec![0.0; n];
            // The offsets share one second moment so that vertices with weak
            // silhouette evidence move proportionally less than boundary ones.
            let shared_sq = if n > POSE_DIM {
                grad[POSE_DIM..].iter().map(|g| g * g).sum::<f64>() / (n - POSE_DIM) as f64
            } else {
                0.0
            };
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                let sq = if i < POSE_DIM { grad[i] * grad[i] } else { shared_sq };
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * sq;
                let m_hat = m[i] / (1.0 - cfg.beta1.powi(t));
                let v_hat = v[i] / (1.0 - cfg.beta2.powi(t));
                eta[i] = base_lr[i] * decay / (v_hat.sqrt() + cfg.epsilon);
                step[i] = -eta[i] * m_hat;
            }

            let flat = params.flat();
            let mut accepted = None;
            let mut scale = 1.0;
            for _ in 0..=BACKTRACK_HALVINGS {
                let mut cand: Vec<f64> = flat.iter().zip(&step).map(|(x, s)| x + scale * s).collect();
                if self.shape {
                    self.shrink_deltas(&mut cand, &eta, scale);
                }
                let cand = Params::from_flat(&cand);
                let l = self.loss(&cand, sigma)?;
                if l <= loss {
                    accepted = Some((cand, l));
                    break;
                }
                scale *= 0.5;
            }
            let current = match accepted {
                Some((cand, l)) => {
                    params = cand;
                    l
                }
                None => {
                    rejected += 1;
                    loss
                }
            };
            trajectory.push(current);
            sigmas.push(sigma);
            iterations = it + 1;

            if current > initial * DIVERGENCE_FACTOR {
                above += 1;
                if above >= DIVERGENCE_STEPS {
                    diverged = true;
                    break;
                }
            } else {
                above = 0;
            }
            let w = cfg.convergence_window;
            if cfg.sigma.at_floor(it) && trajectory.len() > w {
                let stage_start = sigmas.iter().position(|&s| s == sigma).unwrap_or(0);
                let back = trajectory.len() - 1 - w;
                if back >= stage_start && (trajectory[back] - current).abs() < cfg.convergence_tol {
                    converged = true;
                    break;
                }
            }
        }

        let pose = params.pose(self.k)?;
        let final_mesh = self.mesh_for(&params)?;
        let sharp = render_silhouette(&final_mesh, &pose, self.k, &self.render_cfg(SCORING_SIGMA))?;
        let iou = hard_mask(&sharp.mask, 0.5).iou(self.target);
        Ok((
            params,
            FitResult {
                pose,
                loss_trajectory: trajectory,
                sigma_trajectory: sigmas,
                iterations,
                converged,
                diverged,
                rejected_steps: rejected,
                silhouette_iou: iou,
            },
        ))
    }
}

fn check_inputs(target: &BinaryMask, k: &Intrinsics) -> Result<()> {
    k.validate()?;
    if target.width() != k.width as usize || target.height() != k.height as usize {
        return Err(Error::invalid("target mask size differs from the intrinsics image size"));
    }
    Ok(())
}

/// Fits the pose of `mesh` so its silhouette matches `target`.
pub fn fit_pose(target: &BinaryMask, mesh: &Mesh, k: &Intrinsics, init: &Pose, cfg: &FitConfig) -> Result<FitResult> {
    check_inputs(target, k)?;
    let problem = Problem { target, mesh, k, cfg, shape: false };
    Ok(problem.run(init)?.1)
}

/// Jointly fits pose and a free per-vertex deformation of `prior`, regularized by
/// `cfg.lambda_reg` times the mean deformation magnitude.
pub fn fit_pose_and_shape(
    target: &BinaryMask,
    prior: &Mesh,
    k: &Intrinsics,
    init: &Pose,
    cfg: &FitConfig,
) -> Result<ShapeFitResult> {
    check_inputs(target, k)?;
    let problem = Problem { target, mesh: prior, k, cfg, shape: true };
    let (params, fit) = problem.run(init)?;
    Ok(ShapeFitResult { fit, delta: Deformation { deltas: params.deltas } })
}
