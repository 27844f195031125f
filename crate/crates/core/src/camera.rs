//! Undistorted pinhole camera: projection, back-projection and Jacobians.
//!
//! Poses passed to this module are camera-to-world; projection inverts them
//! internally. Skew is fixed at zero.

use nalgebra::{Matrix2x4, SMatrix, Unit, Vector3};

use crate::error::{Error, Result};
use crate::lie::{apply_right_delta, SE3Pose, TangentDelta};

/// Points closer to the image plane than this are treated as behind it.
pub const MIN_DEPTH: f64 = 1e-9;

/// Step used by the finite-difference pose Jacobian (radians / meters).
pub const POSE_JACOBIAN_STEP: f64 = 1e-6;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Validated constructor: positive focal lengths and a principal point
    /// strictly inside the image.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput("focal lengths must be positive and finite".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput("principal point must lie inside the image".into()));
        }
        Ok(())
    }

    /// `(fx, fy, cx, cy)`
    pub fn params(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Intrinsics shifted by `(dfx, dfy, dcx, dcy)`; image size unchanged.
    pub fn offset(&self, d: &[f64; 4]) -> Intrinsics {
        Intrinsics { fx: self.fx + d[0], fy: self.fy + d[1], cx: self.cx + d[2], cy: self.cy + d[3], ..*self }
    }

    pub fn contains(&self, px: &PixelCoord) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// `K⁻¹·(u, v, 1)`, i.e. the normalized image coordinates with z = 1.
    pub fn unproject(&self, px: &PixelCoord) -> Vector3<f64> {
        Vector3::new((px.u - self.cx) / self.fx, (px.v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        PixelCoord { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// `(u, v, 1)`
    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

/// A point expressed in the camera frame (z along the optical axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint(pub Vector3<f64>);

impl CameraPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        CameraPoint(Vector3::new(x, y, z))
    }

    fn check_depth(&self) -> Result<()> {
        if self.0.z <= MIN_DEPTH {
            Err(Error::BehindCamera { z: self.0.z })
        } else {
            Ok(())
        }
    }
}

/// Pixel of a camera-frame point.
pub fn project_camera_point(p: &CameraPoint, k: &Intrinsics) -> Result<PixelCoord> {
    p.check_depth()?;
    let (x, y, z) = (p.0.x, p.0.y, p.0.z);
    Ok(PixelCoord { u: k.fx * x / z + k.cx, v: k.fy * y / z + k.cy })
}

/// Pixel of a world point seen by a camera with camera-to-world pose `pose_c2w`.
pub fn project(point_world: &Vector3<f64>, pose_c2w: &SE3Pose, k: &Intrinsics) -> Result<PixelCoord> {
    project_camera_point(&CameraPoint(pose_c2w.inverse_transform_point(point_world)), k)
}

/// `∂(u, v)/∂(fx, fy, cx, cy)` at a camera-frame point.
pub fn intrinsic_jacobian(p: &CameraPoint) -> Result<Matrix2x4<f64>> {
    p.check_depth()?;
    let (x, y, z) = (p.0.x, p.0.y, p.0.z);
    #[rustfmt::skip]
    let j = Matrix2x4::new(
        x / z, 0.0,   1.0, 0.0,
        0.0,   y / z, 0.0, 1.0,
    );
    Ok(j)
}

/// Camera-to-world pose of a rig camera after right-multiplied deltas on the
/// device pose (`phi`) and on the camera-to-device extrinsic (`rho`).
pub fn refined_camera_pose(
    device_pose: &SE3Pose,
    phi: &TangentDelta,
    rig_extrinsic: &SE3Pose,
    rho: &TangentDelta,
) -> SE3Pose {
    apply_right_delta(device_pose, phi).compose(&apply_right_delta(rig_extrinsic, rho))
}

/// `∂(u, v)/∂(φ_rot, φ_trans, ρ_rot, ρ_trans)` at zero deltas, by central
/// differences with step [`POSE_JACOBIAN_STEP`].
pub fn pose_delta_jacobian(
    point_world: &Vector3<f64>,
    device_pose: &SE3Pose,
    rig_extrinsic: &SE3Pose,
    k: &Intrinsics,
) -> Result<SMatrix<f64, 2, 12>> {
    let base = device_pose.compose(rig_extrinsic);
    project(point_world, &base, k)?;
    let h = POSE_JACOBIAN_STEP;
    let mut jac = SMatrix::<f64, 2, 12>::zeros();
    for col in 0..12 {
        let eval = |step: f64| -> Result<PixelCoord> {
            let mut params = [0.0; 12];
            params[col] = step;
            let phi = TangentDelta::from_array([params[0], params[1], params[2], params[3], params[4], params[5]]);
            let rho = TangentDelta::from_array([params[6], params[7], params[8], params[9], params[10], params[11]]);
            project(point_world, &refined_camera_pose(device_pose, &phi, rig_extrinsic, &rho), k)
        };
        let plus = eval(h)?;
        let minus = eval(-h)?;
        jac[(0, col)] = (plus.u - minus.u) / (2.0 * h);
        jac[(1, col)] = (plus.v - minus.v) / (2.0 * h);
    }
    Ok(jac)
}

/// World-frame unit bearing of pixel `px`.
pub fn ray_direction(px: &PixelCoord, k: &Intrinsics, pose_c2w: &SE3Pose) -> Unit<Vector3<f64>> {
    Unit::new_normalize(pose_c2w.rotation.rotate(&k.unproject(px)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Rotation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn k_real() -> Intrinsics {
        Intrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 5.0, -1.0, 10, 10).is_err());
    }

    #[test]
    fn axis_point_hits_principal_point() {
        let px = project(&Vector3::new(0.0, 0.0, 3.0), &SE3Pose::identity(), &k100()).unwrap();
        assert_eq!(px, PixelCoord::new(50.0, 50.0));
    }

    #[test]
    fn hand_projection() {
        let px = project_camera_point(&CameraPoint::new(1.0, 2.0, 4.0), &k100()).unwrap();
        assert_eq!(px, PixelCoord::new(75.0, 100.0));
    }

    #[test]
    fn zero_depth_is_behind() {
        assert!(matches!(
            project_camera_point(&CameraPoint::new(1.0, 1.0, 0.0), &k100()),
            Err(Error::BehindCamera { .. })
        ));
        assert!(intrinsic_jacobian(&CameraPoint::new(1.0, 1.0, -2.0)).is_err());
    }

    #[test]
    fn intrinsic_jacobian_entries() {
        let j = intrinsic_jacobian(&CameraPoint::new(1.0, 2.0, 4.0)).unwrap();
        assert_eq!(j[(0, 0)], 0.25);
        assert_eq!(j[(1, 1)], 0.5);
        assert_eq!(j[(0, 2)], 1.0);
        assert_eq!(j[(1, 3)], 1.0);
        let axis = intrinsic_jacobian(&CameraPoint::new(0.0, 0.0, 7.0)).unwrap();
        assert_eq!(axis[(0, 0)], 0.0);
        assert_eq!(axis[(1, 1)], 0.0);
    }

    fn fd_intrinsic_jacobian(p: &CameraPoint, k: &Intrinsics) -> Matrix2x4<f64> {
        let mut j = Matrix2x4::zeros();
        for c in 0..4 {
            let h = 1e-4 * k.params()[c].abs().max(1.0);
            let mut d = [0.0; 4];
            d[c] = h;
            let plus = project_camera_point(p, &k.offset(&d)).unwrap();
            d[c] = -h;
            let minus = project_camera_point(p, &k.offset(&d)).unwrap();
            j[(0, c)] = (plus.u - minus.u) / (2.0 * h);
            j[(1, c)] = (plus.v - minus.v) / (2.0 * h);
        }
        j
    }

    #[test]
    fn pose_jacobian_base_point_is_projection() {
        let dev = SE3Pose::new(Rotation::exp(&Vector3::new(0.1, 0.2, 0.0)), Vector3::new(0.5, 0.0, -1.0));
        let ext = SE3Pose::new(Rotation::exp(&Vector3::new(0.0, 0.3, 0.0)), Vector3::new(0.1, 0.0, 0.0));
        let x = Vector3::new(1.0, 0.5, 6.0);
        let zero = refined_camera_pose(&dev, &TangentDelta::zero(), &ext, &TangentDelta::zero());
        assert_eq!(project(&x, &zero, &k_real()).unwrap(), project(&x, &dev.compose(&ext), &k_real()).unwrap());
        assert!(pose_delta_jacobian(&x, &dev, &ext, &k_real()).is_ok());
    }

    #[test]
    fn translational_sensitivity_shrinks_with_depth() {
        let k = k_real();
        let id = SE3Pose::identity();
        let mut trans_norm = [0.0; 2];
        let mut rot_norm = [0.0; 2];
        for (i, depth) in [1.0, 100.0].into_iter().enumerate() {
            let x = Vector3::new(0.2 * depth, -0.1 * depth, depth);
            let j = pose_delta_jacobian(&x, &id, &id, &k).unwrap();
            // For a point at camera coordinates (X, Y, Z) and a local translation
            // along z: ∂u/∂tz = fx·X/Z².
            assert_relative_eq!(j[(0, 5)], k.fx * x.x / (x.z * x.z), max_relative = 1e-6);
            assert_relative_eq!(j[(0, 3)], -k.fx / x.z, max_relative = 1e-6);
            trans_norm[i] = j.fixed_view::<2, 3>(0, 3).norm();
            rot_norm[i] = j.fixed_view::<2, 3>(0, 0).norm();
        }
        assert!(trans_norm[1] < trans_norm[0] / 50.0);
        assert!(rot_norm[1] / trans_norm[1] > 10.0 * rot_norm[0] / trans_norm[0]);
    }

    #[test]
    fn principal_ray() {
        let d = ray_direction(&PixelCoord::new(50.0, 50.0), &k100(), &SE3Pose::identity());
        assert_eq!(d.into_inner(), Vector3::z());
    }

    #[test]
    fn rotated_ray_is_rotated_canonical_ray() {
        let r = Rotation::exp(&Vector3::new(0.3, -0.5, 0.2));
        let pose = SE3Pose::new(r, Vector3::new(4.0, 5.0, 6.0));
        let px = PixelCoord::new(12.0, 80.0);
        let canonical = ray_direction(&px, &k100(), &SE3Pose::identity()).into_inner();
        let rotated = ray_direction(&px, &k100(), &pose).into_inner();
        assert_relative_eq!(rotated, r.matrix() * canonical, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn intrinsic_jacobian_matches_finite_differences(
            x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.5f64..30.0
        ) {
            let p = CameraPoint::new(x, y, z);
            let k = k_real();
            let analytic = intrinsic_jacobian(&p).unwrap();
            let numeric = fd_intrinsic_jacobian(&p, &k);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let scale = a.abs().max(1e-3);
                prop_assert!((a - n).abs() / scale < 1e-6, "{} vs {}", a, n);
            }
        }

        #[test]
        fn project_then_ray_returns_bearing(
            px in 0.0f64..640.0, py in 0.0f64..480.0, depth in 0.1f64..50.0,
            r in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
            t in [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0],
        ) {
            let k = k_real();
            let pose = SE3Pose::new(Rotation::exp(&Vector3::from(r)), Vector3::from(t));
            let p_cam = k.unproject(&PixelCoord::new(px, py)) * depth;
            let world = pose.transform_point(&p_cam);
            let pix = project(&world, &pose, &k).unwrap();
            let ray = ray_direction(&pix, &k, &pose).into_inner();
            let bearing = (world - pose.translation).normalize();
            prop_assert!(ray.cross(&bearing).norm() < 1e-9);
            prop_assert!(ray.dot(&bearing) > 0.0);
            // pre-composing with identity is exact
            prop_assert_eq!(project(&world, &SE3Pose::identity().compose(&pose), &k).unwrap(), pix);
        }
    }
}
