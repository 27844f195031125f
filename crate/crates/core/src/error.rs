use alloc::string::String;

use crate::rig::CameraId;

/// Errors raised by the refinement library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("unknown frame index {0}")]
    UnknownFrame(usize),
    #[error("unknown camera id {0}")]
    UnknownCamera(CameraId),
    #[error("value {value} outside barrier interval ({lower}, {upper})")]
    OutOfBounds { value: f64, lower: f64, upper: f64 },
    #[error("relative translation between the two views is (near) zero")]
    DegenerateBaseline,
    #[error("every correspondence was rejected by the triangulation gates")]
    NoAcceptedMatches,
    #[error("need at least {required} visible samples, found {found}")]
    InsufficientSamples { found: usize, required: usize },
    #[error("need at least {required} matches, found {found}")]
    InsufficientMatches { found: usize, required: usize },
    #[error("refinement diverged at iteration {iteration} (non-finite loss or no usable matches left)")]
    Diverged { iteration: usize },
    #[error("landmark could not be placed with two-view visibility after {attempts} attempts")]
    InfeasibleVisibility { attempts: usize },
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("image is {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
