use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use posekit::dataio::synth::{spin_trajectory, synth_generate, NoiseModel, SceneSpec};
use posekit::shape::procedural;
use posekit::{Intrinsics, Pose, Rotation, Vec3};
use posekit_serve::{overlay_corners, router, AppState, ServeOptions};
use serde_json::{json, Value};
use tower::ServiceExt;

fn start_pose() -> Pose {
    Pose::new(
        Rotation::from_axis_angle(&Vec3::new(0.4, 1.0, 0.1), 0.6),
        Vec3::new(0.01, -0.01, 0.6),
        Vec3::new(0.1, 0.08, 0.07),
    )
    .unwrap()
}

fn intrinsics() -> Intrinsics {
    Intrinsics::new(150.0, 150.0, 79.5, 59.5, 160, 120).unwrap()
}

/// Writes `<root>/<id>` with `frames` frames; `deg_per_frame = 0` gives a static video.
fn write_video(root: &Path, id: &str, frames: usize, deg_per_frame: f64) {
    let spec = SceneSpec {
        mesh: procedural::prior("camera").unwrap(),
        trajectory: spin_trajectory(&start_pose(), &Vec3::y(), deg_per_frame, &Vec3::zeros(), frames),
        intrinsics: intrinsics(),
        noise: NoiseModel::default(),
        category: "camera".into(),
    };
    synth_generate(&spec, 0).unwrap().write(&root.join(id), None).unwrap();
}

fn dataset() -> (tempfile::TempDir, Router) {
    let dir = tempfile::tempdir().unwrap();
    write_video(dir.path(), "static", 8, 0.0);
    write_video(dir.path(), "spin", 6, 1.0);
    let state = AppState::load(&ServeOptions::new(dir.path())).unwrap();
    (dir, router(Arc::new(state), None))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn pose_json(pose: &Pose) -> String {
    json!({
        "quaternion": pose.rotation.quaternion(),
        "translation_m": [pose.translation.x, pose.translation.y, pose.translation.z],
        "size_m": [pose.scale.x, pose.scale.y, pose.scale.z],
    })
    .to_string()
}

async fn wait_for_job(app: &Router, job_id: u64) -> Value {
    for _ in 0..600 {
        let (s, job) = get_json(app, &format!("/api/jobs/{job_id}")).await;
        assert_eq!(s, StatusCode::OK);
        if job["state"] == "done" || job["state"] == "failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {job_id} did not finish");
}

#[tokio::test]
async fn lists_videos_with_counts() {
    let (_dir, app) = dataset();
    let (s, v) = get_json(&app, "/api/videos").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        v,
        json!([
            {"id": "spin", "category": "camera", "frame_count": 6, "keyframe_count": 0},
            {"id": "static", "category": "camera", "frame_count": 8, "keyframe_count": 0},
        ])
    );
}

#[tokio::test]
async fn frame_images_are_the_stored_png_bytes() {
    let (dir, app) = dataset();
    for stream in ["rgb", "depth", "mask"] {
        let (s, bytes) = call(&app, Method::GET, &format!("/api/videos/spin/frames/3/{stream}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let on_disk = std::fs::read(dir.path().join("spin").join(stream).join("000003.png")).unwrap();
        assert_eq!(bytes, on_disk);
    }
    for uri in [
        "/api/videos/nope/frames/0/rgb",
        "/api/videos/spin/frames/6/rgb",
        "/api/videos/spin/frames/0/normals",
        "/api/videos/spin/frames/0/overlay",
        "/api/videos/nope/keyframes",
        "/api/jobs/99",
        "/api/unknown",
        "/index.html",
    ] {
        let (s, body) = get_json(&app, uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert!(body["error"].is_string(), "{uri}");
    }
}

#[tokio::test]
async fn keyframe_round_trip_is_bit_identical() {
    let (dir, app) = dataset();
    // Unit to within the tolerance but not exactly: must be stored as sent.
    let q: [f64; 4] = [0.5, 0.5 + 4e-7, -0.5, 0.5];
    let body = json!({"quaternion": q, "translation_m": [0.1, -0.2, 0.7], "size_m": [0.3, 0.2, 0.1]});
    let (s, _) = call(&app, Method::PUT, "/api/videos/spin/keyframes/2", Some(body.to_string())).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = get_json(&app, "/api/videos/spin/keyframes").await;
    assert_eq!(s, StatusCode::OK);
    let stored = &v["2"];
    for (i, c) in q.iter().enumerate() {
        assert_eq!(stored["quaternion"][i].as_f64().unwrap().to_bits(), c.to_bits());
    }
    assert_eq!(stored["translation_m"], body["translation_m"]);
    assert_eq!(stored["size_m"], body["size_m"]);
    // Persisted, and visible in the listing.
    assert!(dir.path().join("spin/annotations.json").is_file());
    let (_, list) = get_json(&app, "/api/videos").await;
    assert_eq!(list[0]["keyframe_count"], 1);
}

#[tokio::test]
async fn invalid_keyframes_are_rejected() {
    let (_dir, app) = dataset();
    let bad = json!({"quaternion": [1.0, 0.1, 0.0, 0.0], "translation_m": [0, 0, 1], "size_m": [1, 1, 1]});
    let (s, body) = call(&app, Method::PUT, "/api/videos/spin/keyframes/0", Some(bad.to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let msg = serde_json::from_slice::<Value>(&body).unwrap()["error"].as_str().unwrap().to_string();
    assert!(msg.contains("normalize"), "{msg}");

    for payload in [
        "not json".to_string(),
        json!({"quaternion": [1, 0, 0, 0], "translation_m": [0, 0, 1]}).to_string(),
        json!({"quaternion": [1, 0, 0, 0], "translation_m": [0, 0, 1], "size_m": [1, -1, 1]}).to_string(),
    ] {
        let (s, _) = call(&app, Method::PUT, "/api/videos/spin/keyframes/0", Some(payload.clone())).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{payload}");
    }
    let (s, _) = call(&app, Method::PUT, "/api/videos/spin/keyframes/6", Some(pose_json(&start_pose()))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, v) = get_json(&app, "/api/videos/spin/keyframes").await;
    assert_eq!(v, json!({}));
}

#[tokio::test]
async fn static_video_propagates_the_keyframe_pose_to_every_frame() {
    let (_dir, app) = dataset();
    let key = start_pose();
    let (s, _) = call(&app, Method::PUT, "/api/videos/static/keyframes/0", Some(pose_json(&key))).await;
    assert_eq!(s, StatusCode::OK);

    let (s, body) = call(&app, Method::POST, "/api/videos/static/propagate", None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job_id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_u64().unwrap();
    // A second request while the first is queued or running conflicts.
    let (s, _) = call(&app, Method::POST, "/api/videos/static/propagate", None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    // Readers during the job see either the keyframe-only or the complete set.
    let mut job = Value::Null;
    for _ in 0..600 {
        let (s, poses) = get_json(&app, "/api/videos/static/poses").await;
        assert_eq!(s, StatusCode::OK);
        let n = poses["frames"].as_object().unwrap().len();
        assert!(n == 1 || n == 8, "partial annotation set with {n} frames");
        let (_, j) = get_json(&app, &format!("/api/jobs/{job_id}")).await;
        if j["state"] == "done" || j["state"] == "failed" {
            job = j;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["frames_done"], 8);
    assert_eq!(job["unpropagated"], json!([]));

    let expected = serde_json::to_value(overlay_corners(&key, &intrinsics())).unwrap();
    let (_, poses) = get_json(&app, "/api/videos/static/poses").await;
    for f in 0..8 {
        let frame = &poses["frames"][f.to_string()];
        assert_eq!(frame["is_keyframe"], f == 0);
        for (i, c) in key.rotation.quaternion().iter().enumerate() {
            assert_eq!(frame["quaternion"][i].as_f64().unwrap().to_bits(), c.to_bits());
        }
        let (s, overlay) = get_json(&app, &format!("/api/videos/static/frames/{f}/overlay")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(overlay["corners"], expected["corners"]);
        assert_eq!(overlay["edges"], expected["edges"]);
        assert_eq!(overlay["behind"], json!([]));
    }

    // The job is finished, so propagation may run again.
    let (s, _) = call(&app, Method::POST, "/api/videos/static/propagate", None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
}

#[tokio::test]
async fn propagation_tracks_a_spinning_video() {
    let (dir, app) = dataset();
    let (s, _) = call(&app, Method::PUT, "/api/videos/spin/keyframes/0", Some(pose_json(&start_pose()))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, body) = call(&app, Method::POST, "/api/videos/spin/propagate", None).await;
    let job_id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_u64().unwrap();
    assert_eq!(wait_for_job(&app, job_id).await["state"], "done");
    let gt = posekit::dataio::annotation::read_annotations(&dir.path().join("spin/groundtruth.json")).unwrap();
    let (_, poses) = get_json(&app, "/api/videos/spin/poses").await;
    let stored: posekit::dataio::AnnotationFile = serde_json::from_value(poses).unwrap();
    for (f, truth) in gt.poses().unwrap() {
        let got = stored.frames[&f].pose.to_pose().unwrap();
        assert!(got.rotation.angle_to(&truth.rotation).to_degrees() < 1.0, "frame {f}");
        assert!((got.translation - truth.translation).norm() < 0.005, "frame {f}");
        assert_eq!(stored.frames[&f].drift_rms_m.is_some(), f != 0);
    }
}

#[tokio::test]
async fn propagation_without_keyframes_fails_with_a_reason() {
    let (_dir, app) = dataset();
    let (_, body) = call(&app, Method::POST, "/api/videos/spin/propagate", None).await;
    let job_id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_u64().unwrap();
    let job = wait_for_job(&app, job_id).await;
    assert_eq!(job["state"], "failed");
    assert!(job["error"].as_str().unwrap().contains("keyframe"), "{job}");
}

#[tokio::test]
async fn static_assets_are_served_outside_the_api() {
    let data = tempfile::tempdir().unwrap();
    write_video(data.path(), "v", 2, 0.0);
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<html>annotator</html>").unwrap();
    let state = AppState::load(&ServeOptions::new(data.path())).unwrap();
    let app = router(Arc::new(state), Some(assets.path()));
    let (s, body) = call(&app, Method::GET, "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>annotator</html>");
    let (s, _) = call(&app, Method::GET, "/api/videos", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&app, Method::GET, "/api/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
