use posekit::fit::{fit_pose, fit_pose_and_shape, FitConfig};
use posekit::metrics::{cube_symmetry_group, rotation_error_under_group};
use posekit::shape::procedural;
use posekit::softrender::{hard_mask, render_silhouette, RenderConfig};
use posekit::{BinaryMask, Intrinsics, Mesh, Pose, Rotation, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera() -> Intrinsics {
    Intrinsics::new(80.0, 80.0, 31.5, 31.5, 64, 64).unwrap()
}

fn target(mesh: &Mesh, pose: &Pose, k: &Intrinsics) -> BinaryMask {
    let r = render_silhouette(mesh, pose, k, &RenderConfig::for_intrinsics(k, 1e-4)).unwrap();
    hard_mask(&r.mask, 0.5)
}

/// Ground truth plus an init 15° off in rotation and 10% off in translation.
fn perturbed(seed: u64) -> (Pose, Pose) {
    perturbed_with_size(seed, 1.0)
}

fn perturbed_with_size(seed: u64, size: f64) -> (Pose, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = [0; 4].map(|_| rng.random::<f64>() - 0.5);
    let gt = Pose::new(
        Rotation::from_quaternion(q).unwrap(),
        Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 2.5),
        Vec3::repeat(size),
    )
    .unwrap();
    let axis = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
    let mut init = gt;
    init.rotation = Rotation::from_axis_angle(&axis, 15f64.to_radians()).compose(&gt.rotation);
    init.translation *= if rng.random::<bool>() { 1.1 } else { 0.9 };
    (gt, init)
}

#[test]
fn cube_is_recovered_from_a_perturbed_start() {
    let k = camera();
    let mesh = Mesh::cube(0.5);
    let group = cube_symmetry_group();
    for seed in [0, 5] {
        let (gt, init) = perturbed(seed);
        let out = fit_pose(&target(&mesh, &gt, &k), &mesh, &k, &init, &FitConfig::default()).unwrap();
        let rot = rotation_error_under_group(&out.pose.rotation, &gt.rotation, &group).to_degrees();
        assert!(rot <= 2.0, "seed {seed}: {rot}°");
        assert!((out.pose.translation.z / gt.translation.z - 1.0).abs() <= 0.01);
        let (u0, v0) = k.project(&gt.translation);
        let (u1, v1) = k.project(&out.pose.translation);
        assert!((u1 - u0).hypot(v1 - v0) <= 2.0);
        assert!(out.silhouette_iou >= 0.98);
        assert!(!out.diverged);
    }
}

#[test]
fn undeformed_target_keeps_shape_near_prior() {
    let k = camera();
    let prior = procedural::prior("camera").unwrap();
    let (gt, mut init) = perturbed_with_size(3, 0.6);
    init.rotation = Rotation::from_axis_angle(&Vec3::new(0.0, 1.0, 1.0), 5f64.to_radians()).compose(&gt.rotation);
    let cfg = FitConfig { max_iters: 300, ..Default::default() };
    let out = fit_pose_and_shape(&target(&prior, &gt, &k), &prior, &k, &init, &cfg).unwrap();
    assert!(out.delta.mean_magnitude() <= 0.02, "{}", out.delta.mean_magnitude());
    assert!(out.fit.silhouette_iou > 0.9, "{}", out.fit.silhouette_iou);
}

#[test]
fn heavy_regularization_reduces_to_pose_fitting() {
    let k = camera();
    let prior = procedural::prior("mug").unwrap();
    let (gt, mut init) = perturbed_with_size(4, 0.6);
    init.rotation = Rotation::from_axis_angle(&Vec3::new(1.0, 0.0, 1.0), 5f64.to_radians()).compose(&gt.rotation);
    let cfg = FitConfig { max_iters: 300, lambda_reg: 1e3, ..Default::default() };
    let t = target(&prior, &gt, &k);
    let joint = fit_pose_and_shape(&t, &prior, &k, &init, &cfg).unwrap();
    let plain = fit_pose(&t, &prior, &k, &init, &cfg).unwrap();
    assert!(joint.delta.mean_magnitude() < 1e-3, "{}", joint.delta.mean_magnitude());
    let gap = joint.fit.pose.rotation.angle_to(&plain.pose.rotation).to_degrees();
    assert!(gap <= 0.5, "{gap}°");
}
