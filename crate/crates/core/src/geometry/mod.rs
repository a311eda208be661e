//! Pinhole cameras, ray generation and the piecewise-linear grid warp that
//! gives the triplane fine cells near the ego vehicle and coarse cells far
//! away.

mod camera;
mod warp;

pub use camera::{camera_rays, Camera, CameraRig, Intrinsics, Projection, Ray, RigFacing};
pub use warp::{Axis, AxisWarp, GridWarp, WarpKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("camera {index}: {reason}")]
    InvalidCamera { index: usize, reason: String },
    #[error("camera {index} not in rig of {count}")]
    UnknownCamera { index: usize, count: usize },
    #[error("pixel ({row}, {col}) outside {height}x{width} image")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("{axis} warp: {reason}")]
    InvalidWarp { axis: Axis, reason: String },
    #[error("{axis} coordinate {value} outside [{lo}, {hi}]")]
    OutOfRange {
        axis: Axis,
        value: f64,
        lo: f64,
        hi: f64,
    },
}
