//! Geometry, box-regression losses, anchors, matching, suppression and
//! evaluation for 3D voxel object detection.

pub mod geometry;
pub mod losses;
pub mod anchors;
pub mod matching;
pub mod nms;
pub mod metrics;
pub mod annotation;
pub mod io;
pub mod cli;
