//! Geometric core for rendering-based category-level 6D object pose estimation.

// `!(x > 0.0)` is used on purpose throughout: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod raster;
pub mod registration;
pub mod shape;
pub mod softrender;
pub mod umeyama;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, NocsMap, PointCloud, Pose, Rotation, Vec3};
pub use mesh::Mesh;
pub use raster::{BinaryMask, DepthImage, Grid, RgbImage, SoftMask};
