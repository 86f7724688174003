//! On-disk video layout:
//!
//! ```text
//! <video>/intrinsics.json      {"fx", "fy", "cx", "cy", "width", "height"}
//! <video>/meta.json            {"category": "mug"}
//! <video>/rgb/000000.png       8-bit RGB
//! <video>/depth/000000.png     16-bit grayscale, millimetres (0 = no reading)
//! <video>/mask/000000.png      8-bit grayscale, {0, 255}
//! <video>/annotations.json     optional, see the annotation schema
//! <video>/groundtruth.json     optional, same schema (synthetic videos)
//! ```
//! Frame indices are contiguous from 0 and zero-padded to six digits.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotation::{read_annotations, write_annotations, AnnotationFile};
use super::image::{
    encode_depth_png, encode_mask_png, encode_rgb_png, probe_png, read_depth_png, read_mask_png, read_rgb_png,
    ImageKind,
};
use crate::error::{Error, Result};
use crate::geometry::{backproject_with_pixels, Intrinsics, PointCloud};
use crate::raster::{BinaryMask, DepthImage, RgbImage};

pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const META_FILE: &str = "meta.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub category: String,
}

pub fn parse_intrinsics_json(text: &str) -> Result<Intrinsics> {
    let k: Intrinsics = serde_json::from_str(text)?;
    k.validate()?;
    Ok(k)
}

pub fn frame_file(index: usize) -> String {
    format!("{index:06}.png")
}

fn load_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Load { path: path.to_path_buf(), msg: e.to_string() }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| load_err(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub root: PathBuf,
    pub frame_count: usize,
    pub intrinsics: Intrinsics,
    pub category: String,
    /// Contents of `annotations.json`, or an empty set.
    pub annotations: AnnotationFile,
}

/// Frame indices named `NNNNNN.png` in `dir`.
fn indices(dir: &Path) -> Result<BTreeSet<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| load_err(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let name = entry.map_err(|e| load_err(dir, e))?.file_name();
        let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".png")) else {
            continue;
        };
        if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
            out.insert(stem.parse().expect("six digits"));
        }
    }
    Ok(out)
}

/// Opens and validates a video directory: contiguous frames in all three
/// streams, pixel formats and resolutions matching the intrinsics.
pub fn load_video(path: &Path) -> Result<VideoRecord> {
    let intrinsics = parse_intrinsics_json(&read_text(&path.join(INTRINSICS_FILE))?)
        .map_err(|e| load_err(&path.join(INTRINSICS_FILE), e))?;
    let meta: VideoMeta =
        serde_json::from_str(&read_text(&path.join(META_FILE))?).map_err(|e| load_err(&path.join(META_FILE), e))?;

    let streams = [("rgb", ImageKind::Rgb), ("depth", ImageKind::Depth), ("mask", ImageKind::Mask)];
    let mut frame_count = 0;
    let mut sets = Vec::new();
    for (dir, _) in streams {
        let set = indices(&path.join(dir))?;
        frame_count = frame_count.max(set.last().map_or(0, |&m| m + 1));
        sets.push(set);
    }
    if frame_count == 0 {
        return Err(load_err(path, "video has no frames"));
    }
    for ((dir, kind), set) in streams.iter().zip(&sets) {
        for index in 0..frame_count {
            let file = path.join(dir).join(frame_file(index));
            if !set.contains(&index) {
                return Err(Error::MissingFrame { path: path.join(dir).to_path_buf(), index });
            }
            let (w, h) = probe_png(&file, *kind).map_err(|e| match e {
                Error::Format(msg) => Error::Format(format!("{}: {msg}", file.display())),
                other => other,
            })?;
            if (w, h) != (intrinsics.width as usize, intrinsics.height as usize) {
                return Err(Error::Format(format!(
                    "{}: resolution {w}x{h} differs from intrinsics {}x{}",
                    file.display(),
                    intrinsics.width,
                    intrinsics.height
                )));
            }
        }
    }
    let annotations_path = path.join(ANNOTATIONS_FILE);
    let annotations =
        if annotations_path.exists() { read_annotations(&annotations_path)? } else { AnnotationFile::default() };
    if let Some((&f, _)) = annotations.frames.range(frame_count..).next() {
        return Err(load_err(&annotations_path, format!("annotation for frame {f} beyond the last frame")));
    }
    let id = path.file_name().and_then(|n| n.to_str()).unwrap_or("video").to_string();
    Ok(VideoRecord { id, root: path.to_path_buf(), frame_count, intrinsics, category: meta.category, annotations })
}

impl VideoRecord {
    pub fn frame_path(&self, stream: &str, index: usize) -> PathBuf {
        self.root.join(stream).join(frame_file(index))
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.frame_count {
            return Err(Error::MissingFrame { path: self.root.to_path_buf(), index });
        }
        Ok(())
    }

    pub fn rgb(&self, index: usize) -> Result<RgbImage> {
        self.check_index(index)?;
        read_rgb_png(&self.frame_path("rgb", index))
    }

    pub fn depth(&self, index: usize) -> Result<DepthImage> {
        self.check_index(index)?;
        read_depth_png(&self.frame_path("depth", index))
    }

    pub fn mask(&self, index: usize) -> Result<BinaryMask> {
        self.check_index(index)?;
        read_mask_png(&self.frame_path("mask", index))
    }

    /// Colored object cloud of one frame (masked back-projection).
    pub fn object_cloud(&self, index: usize, sample_count: usize, seed: u64) -> Result<PointCloud> {
        let depth = self.depth(index)?;
        let rgb = self.rgb(index)?;
        let mask = self.mask(index)?;
        let seed = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(backproject_with_pixels(&depth, Some(&rgb), &self.intrinsics, &mask, sample_count, seed)?.cloud)
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.root.join(ANNOTATIONS_FILE)
    }

    pub fn ground_truth(&self) -> Result<Option<AnnotationFile>> {
        let p = self.root.join(GROUND_TRUTH_FILE);
        if p.exists() {
            read_annotations(&p).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// One frame's images.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameImages {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub mask: BinaryMask,
}

/// Writes a complete video directory (creating it if needed).
pub fn write_video(
    path: &Path,
    intrinsics: &Intrinsics,
    category: &str,
    frames: &[FrameImages],
    annotations: Option<&AnnotationFile>,
    ground_truth: Option<&AnnotationFile>,
) -> Result<()> {
    intrinsics.validate()?;
    for dir in ["rgb", "depth", "mask"] {
        std::fs::create_dir_all(path.join(dir))?;
    }
    std::fs::write(path.join(INTRINSICS_FILE), serde_json::to_string_pretty(intrinsics)?)?;
    let meta = VideoMeta { category: category.to_string() };
    std::fs::write(path.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    for (i, f) in frames.iter().enumerate() {
        let name = frame_file(i);
        std::fs::write(path.join("rgb").join(&name), encode_rgb_png(&f.rgb)?)?;
        std::fs::write(path.join("depth").join(&name), encode_depth_png(&f.depth)?)?;
        std::fs::write(path.join("mask").join(&name), encode_mask_png(&f.mask)?)?;
    }
    if let Some(a) = annotations {
        write_annotations(&path.join(ANNOTATIONS_FILE), a)?;
    }
    if let Some(g) = ground_truth {
        write_annotations(&path.join(GROUND_TRUTH_FILE), g)?;
    }
    Ok(())
}

/// Video directories (those containing `meta.json`) directly under `root`, sorted by name.
pub fn list_videos(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| load_err(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}
