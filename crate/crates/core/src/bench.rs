//! Synthetic scenes with known ground truth: a smooth device trajectory, a
//! small rig of yawed cameras, landmarks visible from several frames, noise
//! injection and match synthesis, plus the evaluation metrics.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::barrier::BarrierSpec;
use crate::camera::{project, Intrinsics, PixelCoord};
use crate::error::{Error, Result};
use crate::lie::{apply_right_delta, Rotation, SE3Pose, TangentDelta};
use crate::losses::{geometric_metrics, MatchSet};
use crate::rig::{effective_pose, DeviceTrajectory, Frame, ParamGroupId, RigCamera, RigModel};

const DEG: f64 = core::f64::consts::PI / 180.0;

/// Attempts per landmark before giving up on visibility.
pub const MAX_VISIBILITY_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SceneConfig {
    pub num_frames: usize,
    pub num_cameras: usize,
    pub num_landmarks: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Distance between neighbouring cameras, meters.
    pub baseline: f64,
    /// Yaw between neighbouring cameras, degrees.
    pub yaw_step_deg: f64,
    /// Device travel between frames, meters.
    pub frame_spacing: f64,
    /// Landmark depth range along the viewing ray, meters.
    pub min_depth: f64,
    pub max_depth: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_frames: 50,
            num_cameras: 2,
            num_landmarks: 500,
            width: 640,
            height: 480,
            focal: 500.0,
            baseline: 0.2,
            yaw_step_deg: 25.0,
            frame_spacing: 0.5,
            min_depth: 2.0,
            max_depth: 12.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.num_frames < 2 {
            return bad("num_frames must be >= 2");
        }
        if self.num_cameras < 1 {
            return bad("num_cameras must be >= 1");
        }
        if self.num_landmarks < 8 {
            return bad("num_landmarks must be >= 8");
        }
        if self.width < 2 || self.height < 2 || !(self.focal > 0.0) {
            return bad("image size and focal must be positive");
        }
        if !(self.frame_spacing > 0.0) || !(self.baseline >= 0.0) || !self.yaw_step_deg.is_finite() {
            return bad("frame_spacing must be > 0, baseline >= 0");
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return bad("need 0 < min_depth < max_depth");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub landmarks: Vec<Vector3<f64>>,
    pub trajectory: DeviceTrajectory,
    pub rig: RigModel,
    pub config: SceneConfig,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn catmull_rom(p0: &Vector3<f64>, p1: &Vector3<f64>, p2: &Vector3<f64>, p3: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let t2 = t * t;
    let t3 = t2 * t;
    (p1 * 2.0 + (p2 - p0) * t + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2 + (p1 * 3.0 - p0 - p2 * 3.0 + p3) * t3) * 0.5
}

/// Camera-style orientation: `+z` along `forward`, `+y` as close to world
/// `+y` (down) as possible.
fn look_along(forward: &Vector3<f64>) -> Rotation {
    let z = forward.normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    Rotation::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]))
}

fn sample_trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<DeviceTrajectory> {
    // Waypoints every ~4 frames along +z with gentle wander.
    let length = cfg.frame_spacing * (cfg.num_frames - 1) as f64;
    let segments = (cfg.num_frames.div_ceil(4)).max(1);
    let step = length / segments as f64;
    let mut way = Vec::with_capacity(segments + 3);
    for k in 0..segments + 3 {
        let z = (k as f64 - 1.0) * step;
        way.push(Vector3::new(rng.random_range(-0.15..0.15) * step, rng.random_range(-0.05..0.05) * step, z));
    }
    let position = |s: f64| -> Vector3<f64> {
        let u = (s / step).clamp(0.0, segments as f64 - 1e-12);
        let k = u as usize;
        catmull_rom(&way[k], &way[k + 1], &way[k + 2], &way[k + 3], u - k as f64)
    };
    let frames = (0..cfg.num_frames)
        .map(|f| {
            let s = f as f64 * cfg.frame_spacing;
            let p = position(s);
            let ahead = position((s + 0.5 * cfg.frame_spacing).min(length));
            let behind = position((s - 0.5 * cfg.frame_spacing).max(0.0));
            // the rig looks sideways so consecutive frames have parallax
            let view = Vector3::y().cross(&(ahead - behind));
            Frame::new(0.1 * f as f64, SE3Pose::new(look_along(&view), p))
        })
        .collect();
    DeviceTrajectory::new(frames)
}

fn build_rig(cfg: &SceneConfig) -> Result<RigModel> {
    let k = Intrinsics::new(
        cfg.focal,
        cfg.focal,
        0.5 * cfg.width as f64,
        0.5 * cfg.height as f64,
        cfg.width,
        cfg.height,
    )?;
    let mid = 0.5 * (cfg.num_cameras as f64 - 1.0);
    let cameras = (0..cfg.num_cameras)
        .map(|c| {
            let off = c as f64 - mid;
            let extrinsic = SE3Pose::new(
                Rotation::exp(&Vector3::new(0.0, off * cfg.yaw_step_deg * DEG, 0.0)),
                Vector3::new(off * cfg.baseline, 0.0, 0.0),
            );
            RigCamera::new(c as u32, extrinsic, k)
        })
        .collect();
    RigModel::new(cameras)
}

fn visible(p: &Vector3<f64>, pose: &SE3Pose, k: &Intrinsics) -> Option<PixelCoord> {
    project(p, pose, k).ok().filter(|px| k.contains(px))
}

/// Number of frames (any camera) that see `p`.
fn frames_seeing(p: &Vector3<f64>, traj: &DeviceTrajectory, rig: &RigModel) -> usize {
    traj.frames()
        .iter()
        .filter(|f| {
            rig.cameras().iter().any(|c| visible(p, &f.pose.compose(&c.extrinsic), &c.intrinsics).is_some())
        })
        .count()
}

/// Deterministic scene for `config.seed`. Landmarks are drawn by bearing
/// and depth from a random view and redrawn until at least two frames see
/// them.
pub fn generate_scene(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = rng_for(config.seed, 1);
    let trajectory = sample_trajectory(config, &mut rng)?;
    let rig = build_rig(config)?;
    let mut landmarks = Vec::with_capacity(config.num_landmarks);
    for _ in 0..config.num_landmarks {
        let mut found = None;
        for _ in 0..MAX_VISIBILITY_ATTEMPTS {
            let f = rng.random_range(0..config.num_frames);
            let cam = &rig.cameras()[rng.random_range(0..config.num_cameras)];
            let px = PixelCoord::new(
                rng.random_range(0.0..config.width as f64),
                rng.random_range(0.0..config.height as f64),
            );
            let depth = rng.random_range(config.min_depth..config.max_depth);
            let pose = trajectory.frames()[f].pose.compose(&cam.extrinsic);
            let p = pose.transform_point(&(cam.intrinsics.unproject(&px) * depth));
            if frames_seeing(&p, &trajectory, &rig) >= 2 {
                found = Some(p);
                break;
            }
        }
        match found {
            Some(p) => landmarks.push(p),
            None => return Err(Error::InfeasibleVisibility { attempts: MAX_VISIBILITY_ATTEMPTS }),
        }
    }
    Ok(SyntheticScene { landmarks, trajectory, rig, config: *config })
}

/// Injected noise. Angles in degrees, distances in meters, pixel noise in
/// pixels. Tangent-space noise is truncated at 3σ per component.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NoiseSpec {
    pub device_rot_sigma: f64,
    pub device_trans_sigma: f64,
    pub rig_rot_sigma: f64,
    pub point_sigma: f64,
    pub pixel_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// Rotational benchmark at `level_deg`: the rig rotations get the full
    /// level, device rotations the same capped at a third of the default
    /// `φ` bound so the truncated noise stays representable.
    pub fn rotation_benchmark(level_deg: f64, seed: u64) -> Self {
        let phi_cap = BarrierSpec::default().group(ParamGroupId::PhiRot).upper / DEG / 3.0;
        NoiseSpec {
            device_rot_sigma: level_deg.min(phi_cap),
            device_trans_sigma: 0.0,
            rig_rot_sigma: level_deg,
            point_sigma: 0.0,
            pixel_sigma: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("device_rot_sigma", self.device_rot_sigma),
            ("device_trans_sigma", self.device_trans_sigma),
            ("rig_rot_sigma", self.rig_rot_sigma),
            ("point_sigma", self.point_sigma),
            ("pixel_sigma", self.pixel_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(alloc::format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Standard normal sample rejected outside `[-3, 3]`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 3.0 {
            return v;
        }
    }
}

fn noise_vec<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::new(truncated_normal(rng) * sigma, truncated_normal(rng) * sigma, truncated_normal(rng) * sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub trajectory: DeviceTrajectory,
    pub rig: RigModel,
    pub landmarks: Vec<Vector3<f64>>,
}

/// Right-composes truncated Gaussian tangent noise onto every device pose and
/// rig extrinsic and jitters the landmarks. Deltas of the result are zero.
pub fn perturb(scene: &SyntheticScene, noise: &NoiseSpec) -> Result<Perturbed> {
    noise.validate()?;
    let mut rng = rng_for(noise.seed, 2);
    let mut trajectory = scene.trajectory.baked();
    for f in trajectory.frames_mut() {
        let d = TangentDelta::new(noise_vec(&mut rng, noise.device_rot_sigma * DEG), noise_vec(&mut rng, noise.device_trans_sigma));
        f.pose = apply_right_delta(&f.pose, &d);
    }
    let mut rig = scene.rig.baked();
    for c in rig.cameras_mut() {
        let d = TangentDelta::new(noise_vec(&mut rng, noise.rig_rot_sigma * DEG), Vector3::zeros());
        c.extrinsic = apply_right_delta(&c.extrinsic, &d);
    }
    let landmarks = scene.landmarks.iter().map(|p| p + noise_vec(&mut rng, noise.point_sigma)).collect();
    Ok(Perturbed { trajectory, rig, landmarks })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MatchOptions {
    /// Frame offsets `n` in `1..=3`.
    pub offsets: Vec<usize>,
    pub pixel_sigma: f64,
    /// Evenly strided subsample of the co-visible landmarks per set.
    pub max_per_set: usize,
    pub seed: u64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions { offsets: alloc::vec![1, 2, 3], pixel_sigma: 0.0, max_per_set: 48, seed: 0 }
    }
}

pub const MIN_MATCHES_PER_SET: usize = 8;

/// Ground-truth correspondences for frame pairs `(i, i+n)` and every camera
/// pair, with Gaussian pixel noise. Sets with fewer than 8 co-visible
/// landmarks are dropped.
pub fn synthesize_matches(scene: &SyntheticScene, options: &MatchOptions) -> Result<Vec<MatchSet>> {
    if options.offsets.iter().any(|n| !(1..=3).contains(n)) {
        return Err(Error::InvalidInput("match offsets must be in 1..=3".into()));
    }
    if !(options.pixel_sigma >= 0.0 && options.pixel_sigma.is_finite()) {
        return Err(Error::InvalidInput("pixel_sigma must be finite and >= 0".into()));
    }
    let mut offsets = options.offsets.clone();
    offsets.sort_unstable();
    offsets.dedup();
    let mut rng = rng_for(options.seed, 3);
    let traj = &scene.trajectory;
    let rig = &scene.rig;
    let mut sets = Vec::new();
    for i in 0..traj.len() {
        for &n in &offsets {
            let j = i + n;
            if j >= traj.len() {
                continue;
            }
            for ci in rig.cameras() {
                for cj in rig.cameras() {
                    let pose_i = effective_pose(traj, rig, i, ci.id)?;
                    let pose_j = effective_pose(traj, rig, j, cj.id)?;
                    let (ki, kj) = (ci.effective_intrinsics(), cj.effective_intrinsics());
                    let co: Vec<(PixelCoord, PixelCoord)> = scene
                        .landmarks
                        .iter()
                        .filter_map(|p| Some((visible(p, &pose_i, &ki)?, visible(p, &pose_j, &kj)?)))
                        .collect();
                    if co.len() < MIN_MATCHES_PER_SET {
                        continue;
                    }
                    let stride = if options.max_per_set == 0 { 1 } else { co.len().div_ceil(options.max_per_set) };
                    let mut pi = Vec::new();
                    let mut pj = Vec::new();
                    for (a, b) in co.iter().step_by(stride.max(1)) {
                        pi.push(jitter(a, options.pixel_sigma, &mut rng));
                        pj.push(jitter(b, options.pixel_sigma, &mut rng));
                    }
                    if pi.len() >= MIN_MATCHES_PER_SET {
                        sets.push(MatchSet::new(i, ci.id, j, cj.id, pi, pj)?);
                    }
                }
            }
        }
    }
    Ok(sets)
}

fn jitter<R: Rng + ?Sized>(p: &PixelCoord, sigma: f64, rng: &mut R) -> PixelCoord {
    if sigma == 0.0 {
        return *p;
    }
    let du: f64 = StandardNormal.sample(rng);
    let dv: f64 = StandardNormal.sample(rng);
    PixelCoord::new(p.u + sigma * du, p.v + sigma * dv)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoseErrors {
    /// Geodesic rotation error over every (frame, camera) pose, degrees.
    pub rot_mean_deg: f64,
    pub rot_max_deg: f64,
    /// Camera center error, meters.
    pub trans_mean: f64,
    pub trans_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupUsage {
    pub group: ParamGroupId,
    /// Largest `|δ|` in the group; intrinsic groups as a fraction of the
    /// base value.
    pub max_abs_delta: f64,
    /// Default bound in the same units.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub pose: PoseErrors,
    pub ep_e: f64,
    pub rp_e: f64,
    pub groups: Vec<GroupUsage>,
}

pub fn pose_errors(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    gt_traj: &DeviceTrajectory,
    gt_rig: &RigModel,
) -> Result<PoseErrors> {
    if traj.len() != gt_traj.len() {
        return Err(Error::IndexMismatch(alloc::format!(
            "trajectory has {} frames, ground truth {}",
            traj.len(),
            gt_traj.len()
        )));
    }
    let ids: Vec<_> = rig.cameras().iter().map(|c| c.id).collect();
    let gt_ids: Vec<_> = gt_rig.cameras().iter().map(|c| c.id).collect();
    if ids != gt_ids {
        return Err(Error::IndexMismatch(alloc::format!("camera ids {ids:?} vs ground truth {gt_ids:?}")));
    }
    let mut e = PoseErrors::default();
    let mut n = 0usize;
    for f in 0..traj.len() {
        for &id in &ids {
            let a = effective_pose(traj, rig, f, id)?;
            let b = effective_pose(gt_traj, gt_rig, f, id)?;
            let r = a.rotation.angle_to(&b.rotation) / DEG;
            let t = (a.translation - b.translation).norm();
            e.rot_mean_deg += r;
            e.trans_mean += t;
            e.rot_max_deg = e.rot_max_deg.max(r);
            e.trans_max = e.trans_max.max(t);
            n += 1;
        }
    }
    e.rot_mean_deg /= n as f64;
    e.trans_mean /= n as f64;
    Ok(e)
}

/// Largest delta per group against the default bounds.
pub fn group_usage(traj: &DeviceTrajectory, rig: &RigModel, bounds: &BarrierSpec) -> Vec<GroupUsage> {
    let mut max = [0.0f64; 8];
    let mut upd = |g: ParamGroupId, v: f64| max[g.index()] = max[g.index()].max(v.abs());
    for f in traj.frames() {
        for c in 0..3 {
            upd(ParamGroupId::PhiRot, f.phi.rot[c]);
            upd(ParamGroupId::PhiTrans, f.phi.trans[c]);
        }
    }
    for cam in rig.cameras() {
        for c in 0..3 {
            upd(ParamGroupId::RhoRot, cam.rho.rot[c]);
            upd(ParamGroupId::RhoTrans, cam.rho.trans[c]);
        }
        let base = cam.intrinsics.params();
        for (c, g) in ParamGroupId::ALL[4..].iter().enumerate() {
            upd(*g, cam.intrinsic_delta[c] / base[c]);
        }
    }
    ParamGroupId::ALL
        .iter()
        .map(|g| GroupUsage { group: *g, max_abs_delta: max[g.index()], bound: bounds.group(*g).upper })
        .collect()
}

/// Pose errors against ground truth plus Ep-e / RP-e on `sets` and the
/// per-group delta magnitudes.
pub fn evaluate(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    gt_traj: &DeviceTrajectory,
    gt_rig: &RigModel,
    sets: &[MatchSet],
) -> Result<EvalReport> {
    let pose = pose_errors(traj, rig, gt_traj, gt_rig)?;
    let (ep_e, rp_e) = if sets.is_empty() {
        (0.0, 0.0)
    } else {
        let m = geometric_metrics(traj, rig, sets)?;
        (m.ep_e, m.rp_e)
    };
    Ok(EvalReport { pose, ep_e, rp_e, groups: group_usage(traj, rig, &BarrierSpec::default()) })
}
