//! HTTP/JSON service over a directory of posekit videos: frame images,
//! keyframe storage, background propagation jobs and projected box overlays.
//!
//! Every numeric field in a response is produced by the corresponding library
//! call; the service only routes, serializes and persists. Annotation writes go
//! through a temp-file-and-rename, so concurrent readers observe either the old
//! or the new annotation set. Writes to one video (keyframe PUTs and
//! propagation jobs) are serialized by a per-video lock; distinct videos
//! proceed independently.

pub mod overlay;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use posekit::dataio::annotation::{read_annotations, write_annotations, PoseRecord};
use posekit::dataio::video::list_videos;
use posekit::dataio::{load_video, parse_pose_json, AnnotationFile, VideoRecord};
use posekit::registration::{propagate_video, propagation_annotations, FrameStatus, PropagateConfig};
use serde::Serialize;
use serde_json::json;
use tower_http::services::ServeDir;

pub use overlay::{overlay_corners, Overlay, BOX_EDGES};

const STREAMS: [&str; 3] = ["rgb", "depth", "mask"];

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Dataset directory: every sub-directory with a `meta.json` is a video.
    pub root: PathBuf,
    /// Built annotator assets, served for every non-API path.
    pub static_dir: Option<PathBuf>,
    pub propagate: PropagateConfig,
}

impl ServeOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), static_dir: None, propagate: PropagateConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub video: String,
    pub state: JobState,
    pub frames_done: usize,
    pub frame_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Frames left without a pose (before the first keyframe or after a failed registration).
    pub unpropagated: Vec<usize>,
    /// Frames whose registration failed, cutting off the rest of their segment.
    pub failed_frames: Vec<usize>,
    pub warnings: Vec<String>,
}

impl JobStatus {
    fn finished(&self) -> bool {
        matches!(self.state, JobState::Done | JobState::Failed)
    }
}

struct VideoEntry {
    record: VideoRecord,
    writer: Arc<tokio::sync::Mutex<()>>,
    active_job: Mutex<Option<u64>>,
}

pub struct AppState {
    videos: BTreeMap<String, VideoEntry>,
    jobs: Mutex<BTreeMap<u64, JobStatus>>,
    next_job: AtomicU64,
    propagate: PropagateConfig,
}

impl AppState {
    /// Loads (and validates) every video under `opts.root`.
    pub fn load(opts: &ServeOptions) -> posekit::Result<Self> {
        let mut videos = BTreeMap::new();
        for path in list_videos(&opts.root)? {
            let record = load_video(&path)?;
            videos.insert(
                record.id.clone(),
                VideoEntry { record, writer: Arc::new(tokio::sync::Mutex::new(())), active_job: Mutex::new(None) },
            );
        }
        Ok(Self { videos, jobs: Mutex::new(BTreeMap::new()), next_job: AtomicU64::new(1), propagate: opts.propagate })
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.keys().cloned().collect()
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().unwrap().get(&id).cloned()
    }

    fn video(&self, id: &str) -> Result<&VideoEntry, ApiError> {
        self.videos.get(id).ok_or_else(|| ApiError::not_found(format!("unknown video {id:?}")))
    }

    fn update_job(&self, id: u64, f: impl FnOnce(&mut JobStatus)) {
        if let Some(job) = self.jobs.lock().unwrap().get_mut(&id) {
            f(job);
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: message.into() }
    }
}

impl From<posekit::Error> for ApiError {
    fn from(e: posekit::Error) -> Self {
        let status = match &e {
            posekit::Error::MissingFrame { .. } => StatusCode::NOT_FOUND,
            e if e.is_validation() => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

/// The annotation file as currently persisted (empty when none was written yet).
fn current_annotations(record: &VideoRecord) -> posekit::Result<AnnotationFile> {
    let path = record.annotations_path();
    if path.exists() {
        read_annotations(&path)
    } else {
        Ok(AnnotationFile::default())
    }
}

fn check_frame(record: &VideoRecord, n: usize) -> ApiResult<()> {
    if n >= record.frame_count {
        return Err(ApiError::not_found(format!(
            "video {:?} has {} frames, no frame {n}",
            record.id, record.frame_count
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct VideoSummary {
    id: String,
    category: String,
    frame_count: usize,
    keyframe_count: usize,
}

async fn list(State(state): State<Shared>) -> ApiResult<Json<Vec<VideoSummary>>> {
    let mut out = Vec::with_capacity(state.videos.len());
    for entry in state.videos.values() {
        let r = &entry.record;
        let annotations = current_annotations(r)?;
        out.push(VideoSummary {
            id: r.id.clone(),
            category: r.category.clone(),
            frame_count: r.frame_count,
            keyframe_count: annotations.frames.values().filter(|a| a.is_keyframe).count(),
        });
    }
    Ok(Json(out))
}

async fn frame_image(
    State(state): State<Shared>,
    UrlPath((id, n, stream)): UrlPath<(String, usize, String)>,
) -> ApiResult<Response> {
    let record = &state.video(&id)?.record;
    check_frame(record, n)?;
    if !STREAMS.contains(&stream.as_str()) {
        return Err(ApiError::not_found(format!("unknown frame stream {stream:?}")));
    }
    let path = record.frame_path(&stream, n);
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn keyframes(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<BTreeMap<usize, PoseRecord>>> {
    let annotations = current_annotations(&state.video(&id)?.record)?;
    Ok(Json(annotations.frames.into_iter().filter(|(_, a)| a.is_keyframe).map(|(f, a)| (f, a.pose)).collect()))
}

async fn put_keyframe(
    State(state): State<Shared>,
    UrlPath((id, n)): UrlPath<(String, usize)>,
    body: Bytes,
) -> ApiResult<Response> {
    let entry = state.video(&id)?;
    check_frame(&entry.record, n)?;
    let text = std::str::from_utf8(&body).map_err(|e| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        message: format!("pose payload is not UTF-8: {e}"),
    })?;
    let pose = parse_pose_json(text)?;
    let _writer = entry.writer.lock().await;
    let mut annotations = current_annotations(&entry.record)?;
    annotations.set_keyframe(n, &pose);
    write_annotations(&entry.record.annotations_path(), &annotations)?;
    log::info!("video {id}: keyframe {n} saved");
    Ok(Json(&annotations.frames[&n]).into_response())
}

async fn poses(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AnnotationFile>> {
    Ok(Json(current_annotations(&state.video(&id)?.record)?))
}

#[derive(Serialize)]
struct FrameOverlay {
    frame: usize,
    is_keyframe: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    drift_rms_m: Option<f64>,
    #[serde(flatten)]
    overlay: Overlay,
}

async fn frame_overlay(
    State(state): State<Shared>,
    UrlPath((id, n)): UrlPath<(String, usize)>,
) -> ApiResult<Json<FrameOverlay>> {
    let record = &state.video(&id)?.record;
    check_frame(record, n)?;
    let annotations = current_annotations(record)?;
    let frame = annotations
        .frames
        .get(&n)
        .ok_or_else(|| ApiError::not_found(format!("frame {n} of video {id:?} has no pose")))?;
    let pose = frame.pose.to_pose()?;
    Ok(Json(FrameOverlay {
        frame: n,
        is_keyframe: frame.is_keyframe,
        drift_rms_m: frame.drift_rms_m,
        overlay: overlay_corners(&pose, &record.intrinsics),
    }))
}

async fn start_propagation(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let entry = state.video(&id)?;
    let job_id = {
        let mut active = entry.active_job.lock().unwrap();
        if let Some(running) = *active {
            if state.job(running).is_some_and(|j| !j.finished()) {
                return Err(ApiError {
                    status: StatusCode::CONFLICT,
                    message: format!("propagation job {running} is already running for video {id:?}"),
                });
            }
        }
        let job_id = state.next_job.fetch_add(1, Ordering::Relaxed);
        state.jobs.lock().unwrap().insert(
            job_id,
            JobStatus {
                job_id,
                video: id.clone(),
                state: JobState::Queued,
                frames_done: 0,
                frame_count: entry.record.frame_count,
                error: None,
                unpropagated: Vec::new(),
                failed_frames: Vec::new(),
                warnings: Vec::new(),
            },
        );
        *active = Some(job_id);
        job_id
    };
    tokio::spawn(run_job(state.clone(), id, job_id));
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response())
}

async fn run_job(state: Shared, id: String, job_id: u64) {
    let entry = &state.videos[&id];
    let _writer = entry.writer.clone().lock_owned().await;
    state.update_job(job_id, |j| j.state = JobState::Running);
    log::info!("job {job_id}: propagating video {id}");
    let worker = state.clone();
    let outcome = tokio::task::spawn_blocking(move || -> posekit::Result<JobStatus> {
        let entry = &worker.videos[&id];
        let mut record = entry.record.clone();
        record.annotations = current_annotations(&record)?;
        let progress = |done: usize| worker.update_job(job_id, |j| j.frames_done = done);
        let result = propagate_video(&record, &worker.propagate, &progress)?;
        write_annotations(&record.annotations_path(), &propagation_annotations(&result))?;
        let mut failed: Vec<usize> = result
            .status
            .iter()
            .filter_map(|s| match s {
                FrameStatus::Failed { link, .. } => Some(*link),
                _ => None,
            })
            .collect();
        failed.dedup();
        let mut status = worker.job(job_id).expect("job registered before spawning");
        status.state = JobState::Done;
        status.unpropagated = result.unpropagated();
        status.failed_frames = failed;
        status.warnings = result.warnings;
        Ok(status)
    })
    .await;
    let status = match outcome {
        Ok(Ok(status)) => status,
        Ok(Err(e)) => failed_status(&state, job_id, e.to_string()),
        Err(e) => failed_status(&state, job_id, format!("propagation worker crashed: {e}")),
    };
    log::info!("job {job_id}: {:?}", status.state);
    state.update_job(job_id, |j| *j = status);
}

fn failed_status(state: &AppState, job_id: u64, error: String) -> JobStatus {
    let mut status = state.job(job_id).expect("job registered before spawning");
    status.state = JobState::Failed;
    status.error = Some(error);
    status
}

async fn job(State(state): State<Shared>, UrlPath(job_id): UrlPath<u64>) -> ApiResult<Json<JobStatus>> {
    state.job(job_id).map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job {job_id}")))
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

/// The full router. Paths outside `/api` fall back to `static_dir` when given.
pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/videos", get(list))
        .route("/api/videos/{id}/frames/{n}/overlay", get(frame_overlay))
        .route("/api/videos/{id}/frames/{n}/{stream}", get(frame_image))
        .route("/api/videos/{id}/keyframes", get(keyframes))
        .route("/api/videos/{id}/keyframes/{n}", put(put_keyframe))
        .route("/api/videos/{id}/propagate", post(start_propagation))
        .route("/api/videos/{id}/poses", get(poses))
        .route("/api/jobs/{job_id}", get(job))
        .route("/api/{*rest}", get(api_not_found))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(api_not_found),
    }
}

/// Loads the dataset and serves until the listener fails.
pub async fn serve(opts: ServeOptions, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::load(&opts).map_err(std::io::Error::other)?;
    log::info!("serving {} videos from {}", state.videos.len(), opts.root.display());
    let app = router(Arc::new(state), opts.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}
