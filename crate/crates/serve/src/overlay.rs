//! Projected 3D bounding boxes for drawing over video frames.

use posekit::metrics::Box3D;
use posekit::{Intrinsics, Pose};
use serde::Serialize;

/// Corner pairs joined by box edges. Corners are indexed by bit pattern
/// (bit 0 → +x, bit 1 → +y, bit 2 → +z), so every edge flips exactly one bit.
pub const BOX_EDGES: [[usize; 2]; 12] =
    [[0, 1], [2, 3], [4, 5], [6, 7], [0, 2], [1, 3], [4, 6], [5, 7], [0, 4], [1, 5], [2, 6], [3, 7]];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Overlay {
    /// Pixel coordinates `[u, v]` of the 8 box corners. Corners at or behind
    /// the camera plane have no meaningful projection and are `null`.
    pub corners: Vec<Option<[f64; 2]>>,
    pub edges: Vec<[usize; 2]>,
    /// Indices of corners with camera depth `z ≤ 0`.
    pub behind: Vec<usize>,
}

impl Overlay {
    pub fn fully_visible(&self) -> bool {
        self.behind.is_empty()
    }
}

/// Box with extents `S` placed by `(R, T)` and pinhole-projected.
pub fn overlay_corners(pose: &Pose, k: &Intrinsics) -> Overlay {
    let corners = Box3D::from_pose(pose).corners();
    let behind: Vec<usize> = (0..8).filter(|&i| corners[i].z <= 0.0).collect();
    Overlay {
        corners: corners
            .iter()
            .map(|c| {
                (c.z > 0.0).then(|| {
                    let (u, v) = k.project(c);
                    [u, v]
                })
            })
            .collect(),
        edges: BOX_EDGES.to_vec(),
        behind,
    }
}
