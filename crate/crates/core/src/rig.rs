//! Rig/trajectory decomposition and the flat parameter layout seen by the
//! optimizer.
//!
//! The camera-to-world pose of camera `j` at frame `t` is
//! `(P̂ᵗ ∘ exp φᵗ) ∘ (Eʲ ∘ exp ρʲ)`: device poses carry per-frame deltas, the
//! camera-to-device extrinsics carry deltas shared by every frame.

use alloc::vec::Vec;

use crate::camera::{refined_camera_pose, Intrinsics};
use crate::error::{Error, Result};
use crate::lie::{apply_right_delta, SE3Pose, TangentDelta};

pub type CameraId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct RigCamera {
    pub id: CameraId,
    /// Camera-to-device transform `Eʲ`.
    pub extrinsic: SE3Pose,
    pub intrinsics: Intrinsics,
    pub rho: TangentDelta,
    /// `(dfx, dfy, dcx, dcy)` in pixels.
    pub intrinsic_delta: [f64; 4],
}

impl RigCamera {
    pub fn new(id: CameraId, extrinsic: SE3Pose, intrinsics: Intrinsics) -> Self {
        RigCamera { id, extrinsic, intrinsics, rho: TangentDelta::zero(), intrinsic_delta: [0.0; 4] }
    }

    pub fn effective_extrinsic(&self) -> SE3Pose {
        apply_right_delta(&self.extrinsic, &self.rho)
    }

    pub fn effective_intrinsics(&self) -> Intrinsics {
        self.intrinsics.offset(&self.intrinsic_delta)
    }
}

/// Cameras sorted by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RigModel {
    cameras: Vec<RigCamera>,
}

impl RigModel {
    pub fn new(mut cameras: Vec<RigCamera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidInput("rig needs at least one camera".into()));
        }
        cameras.sort_by_key(|c| c.id);
        if cameras.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidInput("camera ids must be unique".into()));
        }
        for c in &cameras {
            c.intrinsics.validate()?;
        }
        Ok(RigModel { cameras })
    }

    pub fn cameras(&self) -> &[RigCamera] {
        &self.cameras
    }

    pub fn cameras_mut(&mut self) -> &mut [RigCamera] {
        &mut self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn index_of(&self, id: CameraId) -> Result<usize> {
        self.cameras.binary_search_by_key(&id, |c| c.id).map_err(|_| Error::UnknownCamera(id))
    }

    pub fn camera(&self, id: CameraId) -> Result<&RigCamera> {
        Ok(&self.cameras[self.index_of(id)?])
    }

    /// Folds every delta into the base extrinsics/intrinsics and zeroes it.
    pub fn baked(&self) -> RigModel {
        let cameras = self
            .cameras
            .iter()
            .map(|c| RigCamera::new(c.id, c.effective_extrinsic(), c.effective_intrinsics()))
            .collect();
        RigModel { cameras }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Seconds.
    pub timestamp: f64,
    /// Device-to-world pose `P̂ᵗ`.
    pub pose: SE3Pose,
    pub phi: TangentDelta,
}

impl Frame {
    pub fn new(timestamp: f64, pose: SE3Pose) -> Self {
        Frame { timestamp, pose, phi: TangentDelta::zero() }
    }

    pub fn effective_pose(&self) -> SE3Pose {
        apply_right_delta(&self.pose, &self.phi)
    }
}

/// Device poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceTrajectory {
    frames: Vec<Frame>,
}

impl DeviceTrajectory {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::InvalidInput("timestamps must be strictly increasing".into()));
        }
        Ok(DeviceTrajectory { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Frame] {
        &mut self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, index: usize) -> Result<&Frame> {
        self.frames.get(index).ok_or(Error::UnknownFrame(index))
    }

    pub fn baked(&self) -> DeviceTrajectory {
        let frames = self.frames.iter().map(|f| Frame::new(f.timestamp, f.effective_pose())).collect();
        DeviceTrajectory { frames }
    }
}

/// Camera-to-world pose of `camera_id` at `frame_index`, with all deltas applied.
pub fn effective_pose(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    frame_index: usize,
    camera_id: CameraId,
) -> Result<SE3Pose> {
    let frame = traj.frame(frame_index)?;
    let cam = rig.camera(camera_id)?;
    Ok(refined_camera_pose(&frame.pose, &frame.phi, &cam.extrinsic, &cam.rho))
}

/// Learnable parameter groups. Every learnable scalar belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ParamGroupId {
    PhiRot,
    PhiTrans,
    RhoRot,
    RhoTrans,
    Fx,
    Fy,
    Cx,
    Cy,
}

impl ParamGroupId {
    pub const ALL: [ParamGroupId; 8] = [
        ParamGroupId::PhiRot,
        ParamGroupId::PhiTrans,
        ParamGroupId::RhoRot,
        ParamGroupId::RhoTrans,
        ParamGroupId::Fx,
        ParamGroupId::Fy,
        ParamGroupId::Cx,
        ParamGroupId::Cy,
    ];

    pub const POSE: [ParamGroupId; 4] =
        [ParamGroupId::PhiRot, ParamGroupId::PhiTrans, ParamGroupId::RhoRot, ParamGroupId::RhoTrans];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroupId::PhiRot => "phi_rot",
            ParamGroupId::PhiTrans => "phi_trans",
            ParamGroupId::RhoRot => "rho_rot",
            ParamGroupId::RhoTrans => "rho_trans",
            ParamGroupId::Fx => "fx",
            ParamGroupId::Fy => "fy",
            ParamGroupId::Cx => "cx",
            ParamGroupId::Cy => "cy",
        }
    }

    pub fn is_intrinsic(self) -> bool {
        matches!(self, ParamGroupId::Fx | ParamGroupId::Fy | ParamGroupId::Cx | ParamGroupId::Cy)
    }

    fn pose_group(rot: bool, frame_level: bool) -> ParamGroupId {
        match (frame_level, rot) {
            (true, true) => ParamGroupId::PhiRot,
            (true, false) => ParamGroupId::PhiTrans,
            (false, true) => ParamGroupId::RhoRot,
            (false, false) => ParamGroupId::RhoTrans,
        }
    }
}

/// What a flat parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamOwner {
    /// Frame index; component 0..6 of φ.
    Frame(usize),
    /// Camera index (position in the sorted rig); component 0..6 of ρ, or
    /// 0..4 of the intrinsic delta.
    Camera(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub group: ParamGroupId,
    pub owner: ParamOwner,
    pub component: usize,
}

/// Ordering of the flat parameter vector: frames ascending (φ), then cameras
/// ascending (ρ), then per-camera intrinsic deltas when learnable.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub slots: Vec<ParamSlot>,
    pub num_frames: usize,
    pub num_cameras: usize,
    pub intrinsics_learnable: bool,
}

impl ParamLayout {
    pub fn new(num_frames: usize, num_cameras: usize, intrinsics_learnable: bool) -> Self {
        let mut slots = Vec::with_capacity(dof(num_frames, num_cameras, intrinsics_learnable));
        for f in 0..num_frames {
            for c in 0..6 {
                slots.push(ParamSlot { group: ParamGroupId::pose_group(c < 3, true), owner: ParamOwner::Frame(f), component: c });
            }
        }
        for cam in 0..num_cameras {
            for c in 0..6 {
                slots.push(ParamSlot { group: ParamGroupId::pose_group(c < 3, false), owner: ParamOwner::Camera(cam), component: c });
            }
        }
        if intrinsics_learnable {
            for cam in 0..num_cameras {
                for (c, g) in ParamGroupId::ALL[4..].iter().enumerate() {
                    slots.push(ParamSlot { group: *g, owner: ParamOwner::Camera(cam), component: c });
                }
            }
        }
        ParamLayout { slots, num_frames, num_cameras, intrinsics_learnable }
    }

    pub fn for_state(traj: &DeviceTrajectory, rig: &RigModel, intrinsics_learnable: bool) -> Self {
        Self::new(traj.len(), rig.len(), intrinsics_learnable)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Offset of frame `f`'s φ block.
    pub fn phi_offset(&self, f: usize) -> usize {
        6 * f
    }

    /// Offset of camera index `c`'s ρ block.
    pub fn rho_offset(&self, c: usize) -> usize {
        6 * self.num_frames + 6 * c
    }

    /// Offset of camera index `c`'s intrinsic block, if intrinsics are learnable.
    pub fn intrinsic_offset(&self, c: usize) -> Option<usize> {
        self.intrinsics_learnable.then(|| 6 * self.num_frames + 6 * self.num_cameras + 4 * c)
    }
}

fn dof(num_frames: usize, num_cameras: usize, intrinsics_learnable: bool) -> usize {
    6 * num_frames + 6 * num_cameras + if intrinsics_learnable { 4 * num_cameras } else { 0 }
}

/// Degrees of freedom of the decomposed parameterization.
pub fn dof_count(traj: &DeviceTrajectory, rig: &RigModel, intrinsics_learnable: bool) -> usize {
    dof(traj.len(), rig.len(), intrinsics_learnable)
}

/// Same count from sizes alone.
pub fn dof_count_for(num_frames: usize, num_cameras: usize, intrinsics_learnable: bool) -> usize {
    dof(num_frames, num_cameras, intrinsics_learnable)
}

/// Current deltas as a flat vector, plus the layout describing each entry.
pub fn flatten_params(traj: &DeviceTrajectory, rig: &RigModel, intrinsics_learnable: bool) -> (Vec<f64>, ParamLayout) {
    let layout = ParamLayout::for_state(traj, rig, intrinsics_learnable);
    let mut x = Vec::with_capacity(layout.len());
    for f in traj.frames() {
        x.extend_from_slice(&f.phi.to_array());
    }
    for c in rig.cameras() {
        x.extend_from_slice(&c.rho.to_array());
    }
    if intrinsics_learnable {
        for c in rig.cameras() {
            x.extend_from_slice(&c.intrinsic_delta);
        }
    }
    (x, layout)
}

/// Writes a flat vector back into the deltas of `traj` and `rig`.
pub fn unflatten_params(x: &[f64], layout: &ParamLayout, traj: &mut DeviceTrajectory, rig: &mut RigModel) -> Result<()> {
    if x.len() != layout.len() || traj.len() != layout.num_frames || rig.len() != layout.num_cameras {
        return Err(Error::IndexMismatch("parameter vector does not match the state layout".into()));
    }
    for (i, f) in traj.frames_mut().iter_mut().enumerate() {
        let o = layout.phi_offset(i);
        f.phi = TangentDelta::from_array(x[o..o + 6].try_into().expect("six entries"));
    }
    for (i, c) in rig.cameras_mut().iter_mut().enumerate() {
        let o = layout.rho_offset(i);
        c.rho = TangentDelta::from_array(x[o..o + 6].try_into().expect("six entries"));
        if let Some(o) = layout.intrinsic_offset(i) {
            c.intrinsic_delta.copy_from_slice(&x[o..o + 4]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Rotation;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn pose(r: [f64; 3], t: [f64; 3]) -> SE3Pose {
        SE3Pose::new(Rotation::exp(&Vector3::from(r)), Vector3::from(t))
    }

    fn state(frames: usize) -> (DeviceTrajectory, RigModel) {
        let traj = DeviceTrajectory::new(
            (0..frames).map(|i| Frame::new(i as f64 * 0.1, pose([0.0, 0.05 * i as f64, 0.0], [0.3 * i as f64, 0.0, 1.0]))).collect(),
        )
        .unwrap();
        let rig = RigModel::new(vec![
            RigCamera::new(2, pose([0.0, -0.4, 0.0], [-0.1, 0.0, 0.0]), k()),
            RigCamera::new(1, pose([0.0, 0.4, 0.05], [0.1, 0.0, 0.02]), k()),
        ])
        .unwrap();
        (traj, rig)
    }

    #[test]
    fn rig_validation() {
        assert!(RigModel::new(vec![]).is_err());
        let c = RigCamera::new(3, SE3Pose::identity(), k());
        assert!(RigModel::new(vec![c.clone(), c]).is_err());
        let (_, rig) = state(1);
        assert_eq!(rig.cameras()[0].id, 1);
        assert!(matches!(rig.index_of(7), Err(Error::UnknownCamera(7))));
        assert!(DeviceTrajectory::new(vec![Frame::new(1.0, SE3Pose::identity()), Frame::new(1.0, SE3Pose::identity())]).is_err());
    }

    #[test]
    fn zero_deltas_reduce_to_plain_composition() {
        let (traj, rig) = state(3);
        let p = effective_pose(&traj, &rig, 2, 2).unwrap();
        let expected = traj.frames()[2].pose.compose(&rig.camera(2).unwrap().extrinsic);
        assert_eq!(p, expected);
        assert!(matches!(effective_pose(&traj, &rig, 5, 1), Err(Error::UnknownFrame(5))));
        assert!(matches!(effective_pose(&traj, &rig, 0, 9), Err(Error::UnknownCamera(9))));
    }

    #[test]
    fn phi_moves_the_whole_rig_rigidly() {
        let (mut traj, rig) = state(2);
        let rel = |traj: &DeviceTrajectory| {
            let a = effective_pose(traj, &rig, 1, 1).unwrap();
            let b = effective_pose(traj, &rig, 1, 2).unwrap();
            a.inverse().compose(&b).to_homogeneous()
        };
        let before = rel(&traj);
        traj.frames_mut()[1].phi = TangentDelta::from_array([0.01, -0.02, 0.005, 0.03, 0.0, -0.01]);
        assert!((rel(&traj) - before).abs().max() < 1e-12);
    }

    #[test]
    fn rho_is_shared_across_frames() {
        let (traj, mut rig) = state(4);
        let before: Vec<_> = (0..4).map(|f| effective_pose(&traj, &rig, f, 1).unwrap()).collect();
        let before2: Vec<_> = (0..4).map(|f| effective_pose(&traj, &rig, f, 2).unwrap()).collect();
        rig.cameras_mut()[1].rho = TangentDelta::from_array([0.0, 0.01, 0.0, 0.02, 0.0, 0.0]);
        for f in 0..4 {
            assert_eq!(effective_pose(&traj, &rig, f, 1).unwrap(), before[f]);
            assert_ne!(effective_pose(&traj, &rig, f, 2).unwrap(), before2[f]);
        }
    }

    #[test]
    fn dof_examples() {
        assert_eq!(dof_count_for(2500, 4, false), 15024);
        assert_eq!(dof_count_for(1, 1, false), 12);
        assert_eq!(dof_count_for(50, 2, true), 320);
        let (traj, rig) = state(3);
        assert_eq!(dof_count(&traj, &rig, true), flatten_params(&traj, &rig, true).0.len());
    }

    #[test]
    fn zero_state_flattens_to_zero() {
        let (traj, rig) = state(3);
        let (x, layout) = flatten_params(&traj, &rig, true);
        assert!(x.iter().all(|v| *v == 0.0));
        assert_eq!(layout.len(), 6 * 3 + 6 * 2 + 4 * 2);
    }

    #[test]
    fn group_map_covers_each_scalar_once() {
        let layout = ParamLayout::new(4, 3, true);
        let mut counts = [0usize; 8];
        for s in &layout.slots {
            counts[s.group.index()] += 1;
        }
        assert_eq!(counts, [12, 12, 9, 9, 3, 3, 3, 3]);
        let mut seen = Vec::new();
        for s in &layout.slots {
            let key = (s.group, s.owner, s.component);
            assert!(!seen.contains(&key));
            seen.push(key);
        }
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(values in proptest::collection::vec(-0.5f64..0.5, 6 * 3 + 6 * 2 + 4 * 2)) {
            let (mut traj, mut rig) = state(3);
            let layout = ParamLayout::for_state(&traj, &rig, true);
            unflatten_params(&values, &layout, &mut traj, &mut rig).unwrap();
            let (x, layout2) = flatten_params(&traj, &rig, true);
            prop_assert_eq!(&x, &values);
            prop_assert_eq!(layout2, layout);
        }

        #[test]
        fn rig_relative_pose_constant_across_frames(rho in proptest::collection::vec(-0.05f64..0.05, 6)) {
            let (traj, mut rig) = state(4);
            rig.cameras_mut()[0].rho = TangentDelta::from_array(rho[..].try_into().unwrap());
            let rel = |f: usize| {
                let a = effective_pose(&traj, &rig, f, 1).unwrap();
                let b = effective_pose(&traj, &rig, f, 2).unwrap();
                a.inverse().compose(&b).to_homogeneous()
            };
            let r0 = rel(0);
            for f in 1..4 {
                prop_assert!((rel(f) - r0).abs().max() < 1e-10);
            }
        }
    }
}
