//! Joint refinement of multi-camera rig poses and pinhole intrinsics.
//!
//! Camera-to-world poses are decomposed into a time-indexed device pose and a
//! shared camera-to-device extrinsic, each refined by a right-multiplied
//! tangent delta. Refinement is first-order gradient descent driven by a
//! Sampson epipolar loss and a line-intersection reprojection loss, kept
//! feasible by log-barrier box constraints and scaled per parameter group by
//! a sensitivity preconditioner.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled.
//! All transcendental math goes through `libm` so results do not depend on
//! the platform libm.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod fmath;

pub mod barrier;
pub mod bench;
pub mod camera;
pub mod dual;
pub mod error;
pub mod exposure;
pub mod lie;
pub mod losses;
pub mod optimizer;
pub mod rig;

pub use barrier::{BarrierSpec, Bounds, TemperatureSchedule};
pub use camera::{CameraPoint, Intrinsics, PixelCoord};
pub use error::Error;
pub use lie::{Rotation, SE3Pose, TangentDelta};
pub use losses::{FundamentalMatrix, MatchSet, TriangulationResult, TriangulationStatus};
pub use rig::{CameraId, DeviceTrajectory, Frame, ParamGroupId, RigCamera, RigModel};
pub use optimizer::{run_refinement, test_time_adapt, AdaptConfig, LRSchedule, LossWeights, RefineConfig, RefinementResult, Toggles};
