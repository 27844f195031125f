//! Two-view geometric losses: fundamental matrix from poses, Sampson epipolar
//! loss, closed-form ray triangulation and the depth-aware reprojection loss,
//! plus the Ep-e / RP-e evaluation metrics.
//!
//! Poses are camera-to-world. A [`MatchSet`] pairs pixels of view `i` with
//! pixels of view `j`; the fundamental matrix used for a set satisfies
//! `x_jᵀ·F·x_i = 0`, which is `fundamental_from_poses(pose_j, pose_i, ..)`.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::camera::{Intrinsics, PixelCoord, MIN_DEPTH};
use crate::dual::{Scalar, M3, V3};
use crate::error::{Error, Result};
use crate::fmath;
use crate::lie::{skew, SE3Pose};
use crate::rig::{effective_pose, CameraId, DeviceTrajectory, RigModel};

/// Rays closer than this to parallel are not triangulated.
pub const MIN_RAY_ANGLE_DEG: f64 = 2.0;

/// The reprojection loss uses `sqrt(r² + δ²) − δ` per transfer residual with
/// this `δ`, in pixels. A bare norm has a unit-length subgradient at zero and
/// a tiny `δ` has curvature `1/δ` there; either way fixed-rate momentum steps
/// oscillate around a noiseless optimum instead of settling. Above `δ` the
/// term is still linear in the residual.
pub const REPROJ_SMOOTHING: f64 = 0.1;

/// Keypoint correspondences between two views.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub frame_i: usize,
    pub camera_i: CameraId,
    pub frame_j: usize,
    pub camera_j: CameraId,
    pub pixels_i: Vec<PixelCoord>,
    pub pixels_j: Vec<PixelCoord>,
}

impl MatchSet {
    /// Requires `frame_j - frame_i ∈ 1..=3`, equal non-zero lengths and
    /// finite pixels.
    pub fn new(
        frame_i: usize,
        camera_i: CameraId,
        frame_j: usize,
        camera_j: CameraId,
        pixels_i: Vec<PixelCoord>,
        pixels_j: Vec<PixelCoord>,
    ) -> Result<Self> {
        if frame_j <= frame_i || frame_j - frame_i > 3 {
            return Err(Error::InvalidInput(alloc::format!(
                "match frames must satisfy i < j <= i + 3, got ({frame_i}, {frame_j})"
            )));
        }
        if pixels_i.is_empty() || pixels_i.len() != pixels_j.len() {
            return Err(Error::InvalidInput("match set needs equal, non-zero pixel counts".into()));
        }
        if !pixels_i.iter().chain(pixels_j.iter()).all(PixelCoord::is_finite) {
            return Err(Error::InvalidInput("match pixels must be finite".into()));
        }
        Ok(MatchSet { frame_i, camera_i, frame_j, camera_j, pixels_i, pixels_j })
    }

    pub fn len(&self) -> usize {
        self.pixels_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels_i.is_empty()
    }

    /// Every pixel inside its image.
    pub fn within_images(&self, k_i: &Intrinsics, k_j: &Intrinsics) -> bool {
        self.pixels_i.iter().all(|p| k_i.contains(p)) && self.pixels_j.iter().all(|p| k_j.contains(p))
    }

    /// Same correspondences with the roles of the two views exchanged. The
    /// result no longer satisfies `frame_i < frame_j`.
    pub fn swapped(&self) -> MatchSet {
        MatchSet {
            frame_i: self.frame_j,
            camera_i: self.camera_j,
            frame_j: self.frame_i,
            camera_j: self.camera_i,
            pixels_i: self.pixels_j.clone(),
            pixels_j: self.pixels_i.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(pub Matrix3<f64>);

impl FundamentalMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `x_aᵀ·F·x_b` in homogeneous pixels.
    pub fn residual(&self, x_a: &PixelCoord, x_b: &PixelCoord) -> f64 {
        x_a.homogeneous().dot(&(self.0 * x_b.homogeneous()))
    }
}

/// Camera-`b`-to-camera-`a` relative transform of two camera-to-world poses.
fn relative(pose_a: &SE3Pose, pose_b: &SE3Pose) -> (Matrix3<f64>, Vector3<f64>) {
    let ra = pose_a.rotation.matrix();
    let r = ra.transpose() * pose_b.rotation.matrix();
    let t = ra.tr_mul(&(pose_b.translation - pose_a.translation));
    (r, t)
}

/// `F = K_i⁻ᵀ·[t]×·R·K_j⁻¹` with `(R, t)` mapping camera-`j` coordinates into
/// camera `i`, so that `x_iᵀ·F·x_j = 0` for corresponding pixels.
pub fn fundamental_from_poses(
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    k_i: &Intrinsics,
    k_j: &Intrinsics,
) -> Result<FundamentalMatrix> {
    let (r, t) = relative(pose_i, pose_j);
    if t.norm() <= 1e-9 {
        return Err(Error::DegenerateBaseline);
    }
    let e = skew(&t) * r;
    Ok(FundamentalMatrix(k_inv(k_i).transpose() * e * k_inv(k_j)))
}

fn k_inv(k: &Intrinsics) -> Matrix3<f64> {
    Matrix3::new(1.0 / k.fx, 0.0, -k.cx / k.fx, 0.0, 1.0 / k.fy, -k.cy / k.fy, 0.0, 0.0, 1.0)
}

/// Sampson loss of a match set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampsonOutcome {
    /// Mean over the matches that were not skipped.
    pub loss: f64,
    /// Matches whose four line coefficients all vanished.
    pub skipped: usize,
}

/// Mean Sampson distance `(x_jᵀFx_i)² / [(Fx_i)₁² + (Fx_i)₂² + (Fᵀx_j)₁² + (Fᵀx_j)₂²]`
/// for `F` with `x_jᵀ·F·x_i = 0`.
pub fn sampson_loss(matches: &MatchSet, f: &FundamentalMatrix) -> Result<SampsonOutcome> {
    let m = f.matrix();
    let mut sum = 0.0;
    let mut used = 0usize;
    for (xi, xj) in matches.pixels_i.iter().zip(matches.pixels_j.iter()) {
        let (xi, xj) = (xi.homogeneous(), xj.homogeneous());
        let fxi = m * xi;
        let ftxj = m.tr_mul(&xj);
        let den = fxi.x * fxi.x + fxi.y * fxi.y + ftxj.x * ftxj.x + ftxj.y * ftxj.y;
        if !(den > 0.0) {
            continue;
        }
        let num = xj.dot(&fxi);
        sum += num * num / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::NoAcceptedMatches);
    }
    Ok(SampsonOutcome { loss: sum / used as f64, skipped: matches.len() - used })
}

/// Mean distance in pixels from `x_j` to its epipolar line `F·x_i`.
pub fn epipolar_line_error(matches: &MatchSet, f: &FundamentalMatrix) -> f64 {
    let m = f.matrix();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (xi, xj) in matches.pixels_i.iter().zip(matches.pixels_j.iter()) {
        let line = m * xi.homogeneous();
        let scale = fmath::sqrt(line.x * line.x + line.y * line.y);
        if scale > 0.0 {
            sum += xj.homogeneous().dot(&line).abs() / scale;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangulationStatus {
    Accepted,
    BehindCamera,
    NearParallel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationResult {
    /// Parameter along the first ray.
    pub t: f64,
    /// Parameter along the second ray.
    pub s: f64,
    pub midpoint: Vector3<f64>,
    /// Distance from the first origin along its (unit) ray.
    pub depth_i: f64,
    pub depth_j: f64,
    /// `‖l₂(s) − l₁(t)‖`
    pub gap: f64,
    pub status: TriangulationStatus,
}

struct RayPair<T> {
    t: T,
    s: T,
    status: TriangulationStatus,
}

/// Closest points of `o1 + t·d1` and `o2 + s·d2`.
fn closest_params<T: Scalar>(x21: &V3<T>, d1: &V3<T>, d2: &V3<T>) -> RayPair<T> {
    let a = d1.dot(d1);
    let b = d1.dot(d2);
    let c = d2.dot(d2);
    let e = x21.dot(d1);
    let f = x21.dot(d2);
    let cos = (b.value() / fmath::sqrt(a.value() * c.value())).clamp(-1.0, 1.0);
    let zero = T::constant(0.0);
    if fmath::acos(cos) < MIN_RAY_ANGLE_DEG.to_radians() {
        return RayPair { t: zero, s: zero, status: TriangulationStatus::NearParallel };
    }
    let den = a * c - b * b;
    let t = (c * e - b * f) / den;
    let s = (b * e - a * f) / den;
    let status = if t.value() <= 0.0 || s.value() <= 0.0 {
        TriangulationStatus::BehindCamera
    } else {
        TriangulationStatus::Accepted
    };
    RayPair { t, s, status }
}

/// Closed-form closest approach of two rays. Rays less than 2° apart are
/// flagged `NearParallel`; intersections behind either origin are flagged
/// `BehindCamera`.
pub fn triangulate_line_intersection(
    o1: &Vector3<f64>,
    d1: &Vector3<f64>,
    o2: &Vector3<f64>,
    d2: &Vector3<f64>,
) -> TriangulationResult {
    let x21 = V3::<f64>::from_f64(&(o2 - o1));
    let r = closest_params(&x21, &V3::from_f64(d1), &V3::from_f64(d2));
    let (t, s) = (r.t, r.s);
    let p1 = o1 + d1 * t;
    let p2 = o2 + d2 * s;
    TriangulationResult {
        t,
        s,
        midpoint: (p1 + p2) * 0.5,
        depth_i: t * d1.norm(),
        depth_j: s * d2.norm(),
        gap: (p2 - p1).norm(),
        status: r.status,
    }
}

/// Reprojection loss of a match set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionOutcome {
    /// Mean of the accepted per-match residuals (smoothed), pixels.
    pub loss: f64,
    /// Per match: `Some(‖transfer_i→j − x_j‖ + ‖transfer_j→i − x_i‖)` or
    /// `None` when gated out.
    pub residuals: Vec<Option<f64>>,
    pub rejected: usize,
}

/// Symmetric transfer error through line-intersection depths: each pixel is
/// lifted to the closest point on its ray and projected into the other view.
pub fn reprojection_loss(
    matches: &MatchSet,
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    k_i: &Intrinsics,
    k_j: &Intrinsics,
) -> Result<ReprojectionOutcome> {
    let mut residuals = Vec::with_capacity(matches.len());
    let out = kernel::evaluate::<f64>(
        &kernel::PairInput {
            pose_i: Some(kernel::PoseT::from_pose(pose_i)),
            pose_j: kernel::PoseT::from_pose(pose_j),
            k_i: k_i.params(), k_j: k_j.params(), matches },
        kernel::Terms { sampson: false, reproj: true },
        Some(&mut residuals),
    );
    if out.reproj_count == 0 {
        return Err(Error::NoAcceptedMatches);
    }
    Ok(ReprojectionOutcome {
        loss: out.reproj_sum / out.reproj_count as f64,
        rejected: matches.len() - out.reproj_count,
        residuals,
    })
}

/// Ep-e and RP-e over a collection of match sets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeometricMetrics {
    /// Mean epipolar line distance over all matches, pixels.
    pub ep_e: f64,
    /// Mean reprojection residual over all accepted matches, pixels.
    pub rp_e: f64,
    /// Mean Sampson distance over all usable matches, pixels².
    pub sampson: f64,
    pub matches: usize,
    pub rejected: usize,
}

/// Evaluates Ep-e / RP-e for the current state (deltas applied).
pub fn geometric_metrics(traj: &DeviceTrajectory, rig: &RigModel, sets: &[MatchSet]) -> Result<GeometricMetrics> {
    let mut ep = 0.0;
    let mut ep_n = 0usize;
    let mut rp = 0.0;
    let mut rp_n = 0usize;
    let mut sa = 0.0;
    let mut sa_n = 0usize;
    let mut total = 0usize;
    for set in sets {
        let pose_i = effective_pose(traj, rig, set.frame_i, set.camera_i)?;
        let pose_j = effective_pose(traj, rig, set.frame_j, set.camera_j)?;
        let k_i = rig.camera(set.camera_i)?.effective_intrinsics();
        let k_j = rig.camera(set.camera_j)?.effective_intrinsics();
        let out = kernel::evaluate::<f64>(
            &kernel::PairInput {
                pose_i: Some(kernel::PoseT::from_pose(&pose_i)),
                pose_j: kernel::PoseT::from_pose(&pose_j),
                k_i: k_i.params(), k_j: k_j.params(), matches: set },
            kernel::Terms { sampson: true, reproj: true },
            None,
        );
        ep += out.line_sum;
        ep_n += out.line_count;
        rp += out.reproj_plain_sum;
        rp_n += out.reproj_count;
        sa += out.sampson_sum;
        sa_n += out.sampson_count;
        total += set.len();
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(GeometricMetrics {
        ep_e: mean(ep, ep_n),
        rp_e: mean(rp, rp_n),
        sampson: mean(sa, sa_n),
        matches: total,
        rejected: total - rp_n,
    })
}

/// Generic per-pair evaluation shared by the public losses, the metrics and
/// the optimizer (with `f64` for values, with duals for intrinsic gradients).
pub(crate) mod kernel {
    use super::*;

    /// Camera-to-world rotation and center.
    #[derive(Debug, Clone, Copy)]
    pub(crate) struct PoseT<T> {
        pub r: M3<T>,
        pub c: V3<T>,
    }

    impl<T: Scalar> PoseT<T> {
        pub fn from_pose(p: &SE3Pose) -> Self {
            PoseT { r: M3::from_f64(p.rotation.matrix()), c: V3::from_f64(&p.translation) }
        }
    }

    pub(crate) struct PairInput<'a, T> {
        /// `None` puts camera `i` at the origin, which skips its rotations.
        pub pose_i: Option<PoseT<T>>,
        pub pose_j: PoseT<T>,
        /// `(fx, fy, cx, cy)`
        pub k_i: [T; 4],
        pub k_j: [T; 4],
        pub matches: &'a MatchSet,
    }

    #[derive(Debug, Clone, Copy)]
    pub(crate) struct Terms {
        pub sampson: bool,
        pub reproj: bool,
    }

    #[derive(Debug, Clone, Copy)]
    pub(crate) struct PairOutput<T> {
        pub sampson_sum: T,
        pub sampson_count: usize,
        /// Smoothed residuals, for the loss.
        pub reproj_sum: T,
        /// Plain residual norms, for RP-e.
        pub reproj_plain_sum: f64,
        pub reproj_count: usize,
        pub line_sum: f64,
        pub line_count: usize,
    }

    impl<T: Scalar> PairOutput<T> {
        pub fn sampson_mean(&self) -> T {
            if self.sampson_count == 0 {
                T::constant(0.0)
            } else {
                self.sampson_sum / self.sampson_count as f64
            }
        }

        pub fn reproj_mean(&self) -> T {
            if self.reproj_count == 0 {
                T::constant(0.0)
            } else {
                self.reproj_sum / self.reproj_count as f64
            }
        }
    }

    /// `K⁻¹` for `(fx, fy, cx, cy)`.
    fn k_inverse<T: Scalar>(k: &[T; 4]) -> M3<T> {
        let (z, one) = (T::constant(0.0), T::constant(1.0));
        let (ifx, ify) = (one / k[0], one / k[1]);
        M3([[ifx, z, -k[2] * ifx], [z, ify, -k[3] * ify], [z, z, one]])
    }

    /// Pixel residual of projecting camera-frame point `p` against `obs` as
    /// `(smoothed, plain norm)`, or `None` if the point is behind the camera.
    #[inline]
    fn transfer_residual<T: Scalar>(p: &V3<T>, k: &[T; 4], obs: &PixelCoord) -> Option<(T, f64)> {
        let z = p.0[2];
        if z.value() <= MIN_DEPTH {
            return None;
        }
        let du = k[0] * p.0[0] / z + k[2] - obs.u;
        let dv = k[1] * p.0[1] / z + k[3] - obs.v;
        let q = du * du + dv * dv;
        let d = super::REPROJ_SMOOTHING;
        Some(((q + d * d).sqrt() - d, fmath::sqrt(q.value())))
    }

    pub(crate) fn evaluate<T: Scalar>(
        input: &PairInput<'_, T>,
        terms: Terms,
        mut residuals: Option<&mut Vec<Option<f64>>>,
    ) -> PairOutput<T> {
        let zero = T::constant(0.0);
        let mut out =
            PairOutput { sampson_sum: zero, sampson_count: 0, reproj_sum: zero, reproj_plain_sum: 0.0, reproj_count: 0, line_sum: 0.0, line_count: 0 };
        let pose_i = input.pose_i.as_ref();
        let rj = &input.pose_j.r;
        let cj = &input.pose_j.c;
        let from_world_i = |v: &V3<T>| pose_i.map_or(*v, |p| p.r.tr_mul_vec(v));
        // camera-i coordinates into camera j: X_j = R·X_i + t
        let (r_ji, x21) = match pose_i {
            Some(p) => (rj.tr_mul(&p.r), cj.sub(&p.c)),
            None => (rj.transpose(), *cj),
        };
        let ci_minus_cj = x21.scale(T::constant(-1.0));
        let t_ji = rj.tr_mul_vec(&ci_minus_cj);
        let (ki, kj) = (&input.k_i, &input.k_j);
        let (ki_inv, kj_inv) = (k_inverse(ki), k_inverse(kj));
        // x_jᵀ·F·x_i = 0 in pixels, F = K_j⁻ᵀ·[t]ₓ·R·K_i⁻¹
        let f = kj_inv.tr_mul(&M3::skew(&t_ji).mul(&r_ji).mul(&ki_inv));
        // pixel to world-frame ray direction, unnormalized
        let ray_i = pose_i.map_or(ki_inv, |p| p.r.mul(&ki_inv));
        let ray_j = rj.mul(&kj_inv);

        for (pi, pj) in input.matches.pixels_i.iter().zip(input.matches.pixels_j.iter()) {
            if terms.sampson {
                let l = f.mul_pixel(pi.u, pi.v);
                let m = f.tr_mul_pixel(pj.u, pj.v);
                let num = l.0[0] * pj.u + l.0[1] * pj.v + l.0[2];
                let line = l.0[0] * l.0[0] + l.0[1] * l.0[1];
                let den = line + m.0[0] * m.0[0] + m.0[1] * m.0[1];
                if den.value() > 0.0 {
                    out.sampson_sum = out.sampson_sum + num * num / den;
                    out.sampson_count += 1;
                }
                if line.value() > 0.0 {
                    out.line_sum += num.value().abs() / fmath::sqrt(line.value());
                    out.line_count += 1;
                }
            }

            if terms.reproj {
                let di = ray_i.mul_pixel(pi.u, pi.v);
                let dj = ray_j.mul_pixel(pj.u, pj.v);
                let pair = closest_params(&x21, &di, &dj);
                let mut r = None;
                if pair.status == TriangulationStatus::Accepted {
                    // closest point on ray i, seen from camera j, and vice versa
                    let p1_in_j = rj.tr_mul_vec(&ci_minus_cj.add(&di.scale(pair.t)));
                    let p2_in_i = from_world_i(&x21.add(&dj.scale(pair.s)));
                    if let (Some(a), Some(b)) = (transfer_residual(&p1_in_j, kj, pj), transfer_residual(&p2_in_i, ki, pi)) {
                        r = Some((a.0 + b.0, a.1 + b.1));
                    }
                }
                if let Some((r, plain)) = r {
                    out.reproj_sum = out.reproj_sum + r;
                    out.reproj_plain_sum += plain;
                    out.reproj_count += 1;
                }
                if let Some(res) = residuals.as_deref_mut() {
                    res.push(r.map(|v| v.1));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project, ray_direction};
    use crate::lie::Rotation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn k2() -> Intrinsics {
        Intrinsics::new(450.0, 455.0, 300.0, 250.0, 640, 480).unwrap()
    }

    fn stereo() -> (SE3Pose, SE3Pose) {
        let a = SE3Pose::new(Rotation::exp(&Vector3::new(0.02, -0.05, 0.01)), Vector3::new(0.0, 0.0, 0.0));
        let b = SE3Pose::new(Rotation::exp(&Vector3::new(-0.03, 0.1, 0.02)), Vector3::new(0.6, 0.05, 0.2));
        (a, b)
    }

    /// Projections of random points in front of both cameras.
    fn synthetic_set(pose_i: &SE3Pose, pose_j: &SE3Pose, k_i: &Intrinsics, k_j: &Intrinsics, n: usize, seed: u64) -> (MatchSet, Vec<Vector3<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pi = Vec::new();
        let mut pj = Vec::new();
        let mut pts = Vec::new();
        while pi.len() < n {
            let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..15.0));
            if let (Ok(a), Ok(b)) = (project(&p, pose_i, k_i), project(&p, pose_j, k_j)) {
                if k_i.contains(&a) && k_j.contains(&b) {
                    pi.push(a);
                    pj.push(b);
                    pts.push(p);
                }
            }
        }
        (MatchSet::new(0, 0, 1, 1, pi, pj).unwrap(), pts)
    }

    #[test]
    fn match_set_validation() {
        let p = vec![PixelCoord::new(1.0, 1.0)];
        assert!(MatchSet::new(0, 0, 4, 0, p.clone(), p.clone()).is_err());
        assert!(MatchSet::new(2, 0, 2, 0, p.clone(), p.clone()).is_err());
        assert!(MatchSet::new(0, 0, 1, 0, p.clone(), vec![]).is_err());
        assert!(MatchSet::new(0, 0, 1, 0, vec![PixelCoord::new(f64::NAN, 0.0)], p.clone()).is_err());
        assert!(MatchSet::new(0, 0, 3, 1, p.clone(), p).is_ok());
    }

    #[test]
    fn exact_correspondences_satisfy_epipolar_constraint() {
        let (a, b) = stereo();
        let (set, _) = synthetic_set(&a, &b, &k(), &k2(), 100, 1);
        let f = fundamental_from_poses(&a, &b, &k(), &k2()).unwrap();
        let worst = set.pixels_i.iter().zip(&set.pixels_j).map(|(xi, xj)| f.residual(xi, xj).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
        let svd = f.matrix().svd(false, false);
        let sv = svd.singular_values;
        assert!(sv.min() / sv.max() < 1e-8);
    }

    #[test]
    fn pure_rotation_is_degenerate() {
        let (a, _) = stereo();
        let b = SE3Pose::new(Rotation::exp(&Vector3::new(0.0, 0.3, 0.0)), a.translation);
        assert_eq!(fundamental_from_poses(&a, &b, &k(), &k()), Err(Error::DegenerateBaseline));
    }

    #[test]
    fn swapped_arguments_transpose() {
        let (a, b) = stereo();
        let fab = fundamental_from_poses(&a, &b, &k(), &k2()).unwrap();
        let fba = fundamental_from_poses(&b, &a, &k2(), &k()).unwrap();
        // Both vanish on the same correspondences; they agree up to sign and scale.
        let (m1, m2) = (fab.matrix().normalize(), fba.matrix().transpose().normalize());
        let diff = (m1 - m2).abs().max().min((m1 + m2).abs().max());
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn sampson_zero_on_exact_and_scale_invariant() {
        let (a, b) = stereo();
        let (set, _) = synthetic_set(&a, &b, &k(), &k2(), 60, 2);
        let f = fundamental_from_poses(&b, &a, &k2(), &k()).unwrap();
        assert!(sampson_loss(&set, &f).unwrap().loss < 1e-12);
        assert!(epipolar_line_error(&set, &f) < 1e-9);

        let mut noisy = set.clone();
        noisy.pixels_j[3].u += 1.3;
        noisy.pixels_j[7].v -= 0.4;
        let l1 = sampson_loss(&noisy, &f).unwrap().loss;
        let l5 = sampson_loss(&noisy, &FundamentalMatrix(f.matrix() * 5.0)).unwrap().loss;
        assert!(l1 > 0.0);
        assert_relative_eq!(l1, l5, max_relative = 1e-12);
    }

    /// Brute force: smallest total squared displacement of the two pixels that
    /// lands them on a consistent epipolar pair, minimized numerically.
    fn brute_force_geometric_error(f: &Matrix3<f64>, xi: &PixelCoord, xj: &PixelCoord) -> f64 {
        // Minimize ‖δi‖² + ‖δj‖² subject to (xj+δj)ᵀF(xi+δi) = 0 with a
        // penalty and coordinate descent over a shrinking grid.
        let cost = |d: &[f64; 4], mu: f64| {
            let a = Vector3::new(xi.u + d[0], xi.v + d[1], 1.0);
            let b = Vector3::new(xj.u + d[2], xj.v + d[3], 1.0);
            let c = b.dot(&(f * a));
            d.iter().map(|v| v * v).sum::<f64>() + mu * c * c
        };
        let mut d = [0.0; 4];
        let fxi = f * xi.homogeneous();
        let scale = 1.0 / (fxi.x * fxi.x + fxi.y * fxi.y);
        let mu = 1e8 * scale;
        let mut step = 2.0;
        while step > 1e-9 {
            let mut improved = true;
            while improved {
                improved = false;
                for c in 0..4 {
                    for sgn in [-1.0, 1.0] {
                        let mut trial = d;
                        trial[c] += sgn * step;
                        if cost(&trial, mu) < cost(&d, mu) {
                            d = trial;
                            improved = true;
                        }
                    }
                }
            }
            step *= 0.5;
        }
        d.iter().map(|v| v * v).sum()
    }

    #[test]
    fn sampson_matches_geometric_oracle_for_one_pixel_offset() {
        let (a, b) = stereo();
        let (set, _) = synthetic_set(&a, &b, &k(), &k2(), 1, 3);
        let f = fundamental_from_poses(&b, &a, &k2(), &k()).unwrap();
        // push x_j 1 px perpendicular to its epipolar line
        let line = f.matrix() * set.pixels_i[0].homogeneous();
        let n = Vector3::new(line.x, line.y, 0.0).normalize();
        let mut moved = set.clone();
        moved.pixels_j[0].u += n.x;
        moved.pixels_j[0].v += n.y;
        let sampson = sampson_loss(&moved, &f).unwrap().loss;
        let oracle = brute_force_geometric_error(f.matrix(), &moved.pixels_i[0], &moved.pixels_j[0]);
        assert!((0.25..=1.0).contains(&sampson), "{sampson}");
        // first-order approximation: agreement up to the second-order term
        assert_relative_eq!(sampson, oracle, max_relative = 5e-3);
        assert_relative_eq!(epipolar_line_error(&moved, &f), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn hand_triangulation() {
        let s2 = 2f64.sqrt();
        let r = triangulate_line_intersection(
            &Vector3::zeros(),
            &Vector3::z(),
            &Vector3::x(),
            &Vector3::new(-1.0, 0.0, 1.0).normalize(),
        );
        assert_eq!(r.status, TriangulationStatus::Accepted);
        assert_relative_eq!(r.t, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.s, s2, epsilon = 1e-12);
        assert!(r.gap < 1e-12);
        assert_relative_eq!(r.midpoint, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn triangulation_gates() {
        let par = triangulate_line_intersection(&Vector3::zeros(), &Vector3::z(), &Vector3::x(), &Vector3::z());
        assert_eq!(par.status, TriangulationStatus::NearParallel);
        let behind = triangulate_line_intersection(
            &Vector3::zeros(),
            &-Vector3::z(),
            &Vector3::x(),
            &Vector3::new(-1.0, 0.0, 1.0).normalize(),
        );
        assert_eq!(behind.status, TriangulationStatus::BehindCamera);
    }

    #[test]
    fn triangulation_recovers_landmarks() {
        let (a, b) = stereo();
        let (set, pts) = synthetic_set(&a, &b, &k(), &k2(), 50, 4);
        for ((pi, pj), p) in set.pixels_i.iter().zip(&set.pixels_j).zip(&pts) {
            let d1 = ray_direction(pi, &k(), &a).into_inner();
            let d2 = ray_direction(pj, &k2(), &b).into_inner();
            let r = triangulate_line_intersection(&a.translation, &d1, &b.translation, &d2);
            if r.status == TriangulationStatus::Accepted {
                assert!(r.gap < 1e-9);
                assert_relative_eq!(r.midpoint, *p, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn reprojection_zero_on_exact_data() {
        let (a, b) = stereo();
        let (set, _) = synthetic_set(&a, &b, &k(), &k2(), 80, 5);
        let out = reprojection_loss(&set, &a, &b, &k(), &k2()).unwrap();
        assert!(out.loss < 1e-8, "{}", out.loss);
        assert_eq!(out.residuals.len(), 80);
    }

    /// Straight-line evaluation of the symmetric transfer error: lift x_i by
    /// its triangulated depth, move it through the relative pose, project.
    fn reprojection_oracle(set: &MatchSet, a: &SE3Pose, b: &SE3Pose, ka: &Intrinsics, kb: &Intrinsics, delta: f64) -> f64 {
        let h = |e: f64| (e * e + delta * delta).sqrt() - delta;
        let kmat = |k: &Intrinsics| Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let (ma, mb) = (kmat(ka), kmat(kb));
        let to_cam = |p: &SE3Pose| p.inverse().to_homogeneous();
        let mut sum = 0.0;
        let mut n = 0;
        for (xi, xj) in set.pixels_i.iter().zip(&set.pixels_j) {
            let di = a.rotation.matrix() * (ma.try_inverse().unwrap() * xi.homogeneous());
            let dj = b.rotation.matrix() * (mb.try_inverse().unwrap() * xj.homogeneous());
            let r = triangulate_line_intersection(&a.translation, &di.normalize(), &b.translation, &dj.normalize());
            if r.status != TriangulationStatus::Accepted {
                continue;
            }
            // depth D_i is the camera-frame z of the point on ray i
            let zi = r.t / (ma.try_inverse().unwrap() * xi.homogeneous()).norm();
            let zj = r.s / (mb.try_inverse().unwrap() * xj.homogeneous()).norm();
            let lift = |m: &Matrix3<f64>, x: &PixelCoord, z: f64| (m.try_inverse().unwrap() * x.homogeneous() * z).push(1.0);
            let i_to_j = to_cam(b) * a.to_homogeneous() * lift(&ma, xi, zi);
            let j_to_i = to_cam(a) * b.to_homogeneous() * lift(&mb, xj, zj);
            let pj = mb * i_to_j.xyz();
            let pi = ma * j_to_i.xyz();
            let e1 = ((pj.x / pj.z - xj.u).powi(2) + (pj.y / pj.z - xj.v).powi(2)).sqrt();
            let e2 = ((pi.x / pi.z - xi.u).powi(2) + (pi.y / pi.z - xi.v).powi(2)).sqrt();
            sum += h(e1) + h(e2);
            n += 1;
        }
        sum / n as f64
    }

    #[test]
    fn reprojection_matches_independent_evaluation() {
        let (a, b) = stereo();
        let (set, _) = synthetic_set(&a, &b, &k(), &k2(), 40, 6);
        let shifted = SE3Pose::new(b.rotation, b.translation + Vector3::new(0.01, 0.0, 0.0));
        let out = reprojection_loss(&set, &a, &shifted, &k(), &k2()).unwrap();
        assert!(out.loss > 1e-3);
        let oracle = reprojection_oracle(&set, &a, &shifted, &k(), &k2(), 0.0);
        let plain: Vec<f64> = out.residuals.iter().flatten().copied().collect();
        assert_relative_eq!(plain.iter().sum::<f64>() / plain.len() as f64, oracle, max_relative = 1e-9);
        let smoothed = reprojection_oracle(&set, &a, &shifted, &k(), &k2(), REPROJ_SMOOTHING);
        assert_relative_eq!(out.loss, smoothed, max_relative = 1e-9);
    }

    #[test]
    fn reprojection_is_symmetric() {
        let (a, b) = stereo();
        let (set, _) = synthetic_set(&a, &b, &k(), &k2(), 40, 7);
        let shifted = SE3Pose::new(Rotation::exp(&Vector3::new(0.0, 0.002, 0.0)) * b.rotation, b.translation);
        let fwd = reprojection_loss(&set, &a, &shifted, &k(), &k2()).unwrap().loss;
        let back = reprojection_loss(&set.swapped(), &shifted, &a, &k2(), &k()).unwrap().loss;
        assert_relative_eq!(fwd, back, epsilon = 1e-10);
    }

    #[test]
    fn all_parallel_rays_are_rejected() {
        // identical centers except a tiny baseline along the optical axis
        let a = SE3Pose::identity();
        let b = SE3Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 0.01));
        let px = vec![PixelCoord::new(320.0, 240.0), PixelCoord::new(330.0, 250.0)];
        let set = MatchSet::new(0, 0, 1, 0, px.clone(), px).unwrap();
        assert_eq!(reprojection_loss(&set, &a, &b, &k(), &k()), Err(Error::NoAcceptedMatches));
    }

    #[test]
    fn kernel_sampson_matches_fundamental_form() {
        let (a, b) = stereo();
        let (mut set, _) = synthetic_set(&a, &b, &k(), &k2(), 30, 8);
        for (n, p) in set.pixels_j.iter_mut().enumerate() {
            p.u += (n as f64 * 0.37).sin() * 2.0;
        }
        let f = fundamental_from_poses(&b, &a, &k2(), &k()).unwrap();
        let via_f = sampson_loss(&set, &f).unwrap().loss;
        let via_kernel = kernel::evaluate::<f64>(
            &kernel::PairInput { pose_i: Some(kernel::PoseT::from_pose(&a)), pose_j: kernel::PoseT::from_pose(&b), k_i: k().params(), k_j: k2().params(), matches: &set },
            kernel::Terms { sampson: true, reproj: false },
            None,
        );
        assert_relative_eq!(via_f, via_kernel.sampson_mean(), max_relative = 1e-12);
        assert_relative_eq!(epipolar_line_error(&set, &f), via_kernel.line_sum / via_kernel.line_count as f64, max_relative = 1e-12);
    }

    /// Dense grid over (t, s) followed by local pattern search.
    fn grid_argmin(o1: &Vector3<f64>, d1: &Vector3<f64>, o2: &Vector3<f64>, d2: &Vector3<f64>, t0: f64, s0: f64) -> (f64, f64) {
        let dist = |t: f64, s: f64| ((o2 + d2 * s) - (o1 + d1 * t)).norm_squared();
        let span = 4.0 * (t0.abs() + s0.abs() + 1.0);
        let n = 200;
        let (mut bt, mut bs, mut best) = (0.0, 0.0, f64::INFINITY);
        for a in 0..=n {
            for b in 0..=n {
                let t = -span + 2.0 * span * a as f64 / n as f64;
                let s = -span + 2.0 * span * b as f64 / n as f64;
                let v = dist(t, s);
                if v < best {
                    (bt, bs, best) = (t, s, v);
                }
            }
        }
        let mut step = 2.0 * span / n as f64;
        while step > 1e-12 {
            let mut moved = true;
            while moved {
                moved = false;
                for (dt, ds) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step), (step, step), (-step, -step), (step, -step), (-step, step)] {
                    let v = dist(bt + dt, bs + ds);
                    if v < best {
                        (bt, bs, best) = (bt + dt, bs + ds, v);
                        moved = true;
                    }
                }
            }
            step *= 0.5;
        }
        (bt, bs)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn closed_form_equals_grid_argmin(
            o1 in [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0],
            o2 in [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0],
            d1 in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
            d2 in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
        ) {
            let (o1, o2) = (Vector3::from(o1), Vector3::from(o2));
            let (d1, d2) = (Vector3::from(d1), Vector3::from(d2));
            prop_assume!(d1.norm() > 0.1 && d2.norm() > 0.1);
            let (d1, d2) = (d1.normalize(), d2.normalize());
            prop_assume!(d1.dot(&d2).abs() < 0.9);
            let r = triangulate_line_intersection(&o1, &d1, &o2, &d2);
            let (t, s) = grid_argmin(&o1, &d1, &o2, &d2, r.t, r.s);
            prop_assert!((t - r.t).abs() < 1e-6 && (s - r.s).abs() < 1e-6, "({}, {}) vs ({}, {})", t, s, r.t, r.s);
            if r.status == TriangulationStatus::Accepted {
                prop_assert!(r.t > 0.0 && r.s > 0.0);
                prop_assert!(d1.dot(&d2).acos() >= MIN_RAY_ANGLE_DEG.to_radians());
            }
        }
    }
}
