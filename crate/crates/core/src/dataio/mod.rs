//! Dataset formats, synthetic scene generation and configuration files.

pub mod annotation;
pub mod config;
pub mod image;
pub mod points;
pub mod synth;
pub mod video;

pub use annotation::{parse_annotations_json, parse_pose_json, AnnotationFile, FrameAnnotation, PoseRecord};
pub use config::{parse_category_config, ToolConfig};
pub use image::{decode_depth_png, decode_mask_png, decode_rgb_png};
pub use points::parse_points;
pub use synth::{synth_generate, NoiseModel, SceneSpec, SynthVideo};
pub use video::{load_video, parse_intrinsics_json, VideoRecord};
