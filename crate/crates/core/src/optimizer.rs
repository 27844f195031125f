//! Constrained first-order refinement of the decomposed trajectory/rig.
//!
//! The objective is `λ_epi·ℒ_epi + λ_reproj·ℒ_reproj + λ_barrier·ℒ_barrier`.
//! The geometric terms are averaged over match sets and the barrier over
//! bounded parameters, so the weights do not need retuning when the number
//! of frames or matches changes.
//!
//! Both geometric losses depend only on the relative pose of the two views.
//! Gradients are taken with forward-mode duals over a 6-dof perturbation of
//! that relative pose (plus the intrinsics) and pushed back onto `φ` and `ρ`
//! with the adjoint and the rotation right Jacobian.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::barrier::{barrier_gradient, barrier_value, temperature, BarrierSpec, Bounds, TemperatureSchedule};
use crate::camera::{pose_delta_jacobian, ray_direction};
use crate::dual::{Dual, M3, V3};
use crate::error::{Error, Result};
use crate::fmath;
use crate::lie::{apply_right_delta, so3_right_jacobian, Rotation, SE3Pose, TangentDelta};
use crate::losses::kernel::{self, PairInput, PoseT, Terms};
use crate::losses::{geometric_metrics, triangulate_line_intersection, GeometricMetrics, MatchSet, TriangulationStatus};
use crate::rig::{flatten_params, unflatten_params, CameraId, DeviceTrajectory, ParamGroupId, ParamLayout, ParamOwner, RigModel};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_barrier: f64,
    pub lambda_epi: f64,
    pub lambda_reproj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_barrier: 0.1, lambda_epi: 1e-3, lambda_reproj: 5e-4 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { lambda_barrier: 0.0, lambda_epi: 0.0, lambda_reproj: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_barrier", self.lambda_barrier),
            ("lambda_epi", self.lambda_epi),
            ("lambda_reproj", self.lambda_reproj),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(alloc::format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Toggles {
    pub intrinsics_learnable: bool,
    pub barrier_enabled: bool,
    pub precondition_enabled: bool,
    pub epipolar_enabled: bool,
    pub reproj_enabled: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            intrinsics_learnable: true,
            barrier_enabled: true,
            precondition_enabled: true,
            epipolar_enabled: true,
            reproj_enabled: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Toggles {
            intrinsics_learnable: false,
            barrier_enabled: false,
            precondition_enabled: false,
            epipolar_enabled: false,
            reproj_enabled: false,
        }
    }
}

/// Each cosine segment decays from its peak to this fraction of it.
pub const COSINE_FLOOR: f64 = 0.01;

/// Base rates plus cosine decay with warm restarts at `0`, `max_iter/6` and
/// `max_iter/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LRSchedule {
    pub extrinsic_lr: f64,
    pub intrinsic_lr: f64,
    pub max_iter: usize,
}

impl Default for LRSchedule {
    fn default() -> Self {
        LRSchedule { extrinsic_lr: 5e-3, intrinsic_lr: 8e-4, max_iter: 5000 }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.extrinsic_lr > 0.0 && self.extrinsic_lr.is_finite() && self.intrinsic_lr > 0.0 && self.intrinsic_lr.is_finite()) {
            return Err(Error::InvalidInput("learning rates must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn restart_iters(&self) -> Vec<usize> {
        let mut r = vec![0, self.max_iter / 6, self.max_iter / 2];
        r.dedup();
        r
    }

    /// Multiplier in `[COSINE_FLOOR, 1]` applied to every base rate.
    pub fn factor(&self, iter: usize) -> f64 {
        if iter >= self.max_iter {
            return COSINE_FLOOR;
        }
        let restarts = self.restart_iters();
        let k = restarts.iter().rposition(|&r| r <= iter).unwrap_or(0);
        let start = restarts[k];
        let end = restarts.get(k + 1).copied().unwrap_or(self.max_iter);
        let len = end - start;
        if len <= 1 {
            return 1.0;
        }
        let p = (iter - start) as f64 / (len - 1) as f64;
        COSINE_FLOOR + (1.0 - COSINE_FLOOR) * 0.5 * (1.0 + fmath::cos(core::f64::consts::PI * p))
    }

    pub fn base_lr(&self, group: ParamGroupId) -> f64 {
        if group.is_intrinsic() {
            self.intrinsic_lr
        } else {
            self.extrinsic_lr
        }
    }

    pub fn lr(&self, group: ParamGroupId, iter: usize) -> f64 {
        self.base_lr(group) * self.factor(iter)
    }
}

/// Per-group learning-rate multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PreconditionedRates {
    pub multipliers: [f64; 8],
    /// Mean squared column norm of the averaged projection Jacobian per pose
    /// group (pixels per unit delta, squared). Zero for intrinsic groups.
    pub sensitivity: [f64; 8],
}

impl Default for PreconditionedRates {
    fn default() -> Self {
        PreconditionedRates { multipliers: [1.0; 8], sensitivity: [0.0; 8] }
    }
}

impl PreconditionedRates {
    pub fn multiplier(&self, g: ParamGroupId) -> f64 {
        self.multipliers[g.index()]
    }
}

/// A world point observed by one rig camera at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionSample {
    pub point: Vector3<f64>,
    pub frame: usize,
    pub camera: CameraId,
}

pub const MIN_PRECONDITION_SAMPLES: usize = 10;

/// Multipliers `∝ diag(J̄ᵀJ̄)^(-1/2)` per pose group, `J̄` the projection
/// Jacobian w.r.t. `(φ, ρ)` averaged over the samples, scaled so the median
/// pose-group multiplier is 1. Intrinsic groups keep 1.
pub fn compute_preconditioner(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    samples: &[PreconditionSample],
) -> Result<PreconditionedRates> {
    let mut sum = SMatrix::<f64, 2, 12>::zeros();
    let mut n = 0usize;
    for s in samples {
        let device = traj.frame(s.frame)?.effective_pose();
        let cam = rig.camera(s.camera)?;
        match pose_delta_jacobian(&s.point, &device, &cam.effective_extrinsic(), &cam.effective_intrinsics()) {
            Ok(j) => {
                sum += j;
                n += 1;
            }
            Err(Error::BehindCamera { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if n < MIN_PRECONDITION_SAMPLES {
        return Err(Error::InsufficientSamples { found: n, required: MIN_PRECONDITION_SAMPLES });
    }
    let mean = sum / n as f64;
    let mut rates = PreconditionedRates::default();
    let mut raw = [0.0; 4];
    for (gi, g) in ParamGroupId::POSE.iter().enumerate() {
        let sens = (0..3).map(|c| mean.column(3 * gi + c).norm_squared()).sum::<f64>() / 3.0;
        if !(sens > 0.0 && sens.is_finite()) {
            return Err(Error::InvalidInput(alloc::format!("{} has no measurable sensitivity", g.name())));
        }
        rates.sensitivity[g.index()] = sens;
        raw[gi] = 1.0 / fmath::sqrt(sens);
    }
    let mut sorted = raw;
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[1] + sorted[2]);
    for (gi, g) in ParamGroupId::POSE.iter().enumerate() {
        rates.multipliers[g.index()] = raw[gi] / median;
    }
    Ok(rates)
}

/// Triangulated midpoints of up to `per_set` matches of each set (evenly
/// strided), each seen from both views of its set.
pub fn preconditioner_samples(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    sets: &[MatchSet],
    per_set: usize,
) -> Result<Vec<PreconditionSample>> {
    let mut out = Vec::new();
    if per_set == 0 {
        return Ok(out);
    }
    for set in sets {
        let pose_i = crate::rig::effective_pose(traj, rig, set.frame_i, set.camera_i)?;
        let pose_j = crate::rig::effective_pose(traj, rig, set.frame_j, set.camera_j)?;
        let k_i = rig.camera(set.camera_i)?.effective_intrinsics();
        let k_j = rig.camera(set.camera_j)?.effective_intrinsics();
        let stride = set.len().div_ceil(per_set).max(1);
        for m in (0..set.len()).step_by(stride) {
            let d1 = ray_direction(&set.pixels_i[m], &k_i, &pose_i);
            let d2 = ray_direction(&set.pixels_j[m], &k_j, &pose_j);
            let tri = triangulate_line_intersection(&pose_i.translation, &d1, &pose_j.translation, &d2);
            if tri.status == TriangulationStatus::Accepted {
                out.push(PreconditionSample { point: tri.midpoint, frame: set.frame_i, camera: set.camera_i });
                out.push(PreconditionSample { point: tri.midpoint, frame: set.frame_j, camera: set.camera_j });
            }
        }
    }
    Ok(out)
}

/// Value of the objective split into its terms (weights applied to `total`
/// only).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean over sets of the per-set mean Sampson distance.
    pub epipolar: f64,
    /// Mean over sets of the per-set mean reprojection residual.
    pub reproj: f64,
    /// Mean barrier penalty over bounded parameters.
    pub barrier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub loss: LossBreakdown,
    /// Gradient in [`ParamLayout`] order.
    pub gradient: Vec<f64>,
    pub layout: ParamLayout,
}

/// Objective and gradient at the current deltas of `traj`/`rig`. The
/// barrier is included when `toggles.barrier_enabled`; the geometric terms
/// follow their toggles.
pub fn total_loss(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    sets: &[MatchSet],
    weights: &LossWeights,
    barrier: &BarrierSpec,
    temperature: f64,
    toggles: &Toggles,
) -> Result<LossEvaluation> {
    let (x, layout) = flatten_params(traj, rig, toggles.intrinsics_learnable);
    let problem = Problem::new(traj, rig, sets, layout, weights, barrier, toggles, 1)?;
    let (loss, gradient) = problem.evaluate(&x, temperature, true)?;
    Ok(LossEvaluation { loss, gradient, layout: problem.layout })
}

/// [`total_loss`] without the gradient.
pub fn loss_value(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    sets: &[MatchSet],
    weights: &LossWeights,
    barrier: &BarrierSpec,
    temperature: f64,
    toggles: &Toggles,
) -> Result<LossBreakdown> {
    let (x, layout) = flatten_params(traj, rig, toggles.intrinsics_learnable);
    let problem = Problem::new(traj, rig, sets, layout, weights, barrier, toggles, 1)?;
    Ok(problem.evaluate(&x, temperature, false)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Weights {
    epi: f64,
    reproj: f64,
    barrier: f64,
}

struct SetRef<'a> {
    set: &'a MatchSet,
    fi: usize,
    fj: usize,
    ci: usize,
    cj: usize,
}

struct Problem<'a> {
    traj: &'a DeviceTrajectory,
    rig: &'a RigModel,
    sets: Vec<SetRef<'a>>,
    layout: ParamLayout,
    bounds: Vec<Bounds>,
    weights: Weights,
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    threads: usize,
}

/// Poses and Jacobians derived from one parameter vector.
struct Decoded {
    device: Vec<SE3Pose>,
    ext: Vec<SE3Pose>,
    /// `Exp(ρ_rot)` per camera.
    rho_rot: Vec<Matrix3<f64>>,
    jr_phi: Vec<Matrix3<f64>>,
    jr_rho: Vec<Matrix3<f64>>,
    k: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, Default)]
struct SetEval {
    sampson: f64,
    sampson_n: usize,
    reproj: f64,
    reproj_n: usize,
    /// `∂/∂ξ` of the weighted set value for right perturbations of each
    /// camera pose, `(ω, v)`.
    xi_i: [f64; 6],
    xi_j: [f64; 6],
    k_i: [f64; 4],
    k_j: [f64; 4],
}

impl<'a> Problem<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        traj: &'a DeviceTrajectory,
        rig: &'a RigModel,
        sets: &'a [MatchSet],
        layout: ParamLayout,
        weights: &LossWeights,
        barrier: &BarrierSpec,
        toggles: &Toggles,
        threads: usize,
    ) -> Result<Self> {
        weights.validate()?;
        let mut refs = Vec::with_capacity(sets.len());
        for set in sets {
            traj.frame(set.frame_i)?;
            traj.frame(set.frame_j)?;
            refs.push(SetRef {
                set,
                fi: set.frame_i,
                fj: set.frame_j,
                ci: rig.index_of(set.camera_i)?,
                cj: rig.index_of(set.camera_j)?,
            });
        }
        let bounds = slot_bounds(rig, &layout, barrier);
        let w = Weights {
            epi: if toggles.epipolar_enabled { weights.lambda_epi } else { 0.0 },
            reproj: if toggles.reproj_enabled { weights.lambda_reproj } else { 0.0 },
            barrier: if toggles.barrier_enabled { weights.lambda_barrier } else { 0.0 },
        };
        Ok(Problem { traj, rig, sets: refs, layout, bounds, weights: w, threads: threads.max(1) })
    }

    fn decode(&self, x: &[f64]) -> Decoded {
        let frames = self.traj.frames();
        let cams = self.rig.cameras();
        let mut d = Decoded {
            device: Vec::with_capacity(frames.len()),
            ext: Vec::with_capacity(cams.len()),
            rho_rot: Vec::with_capacity(cams.len()),
            jr_phi: Vec::with_capacity(frames.len()),
            jr_rho: Vec::with_capacity(cams.len()),
            k: Vec::with_capacity(cams.len()),
        };
        for (f, frame) in frames.iter().enumerate() {
            let o = self.layout.phi_offset(f);
            let phi = delta_at(x, o);
            d.device.push(apply_right_delta(&frame.pose, &phi));
            d.jr_phi.push(so3_right_jacobian(&phi.rot));
        }
        for (c, cam) in cams.iter().enumerate() {
            let o = self.layout.rho_offset(c);
            let rho = delta_at(x, o);
            d.ext.push(apply_right_delta(&cam.extrinsic, &rho));
            d.rho_rot.push(*Rotation::exp(&rho.rot).matrix());
            d.jr_rho.push(so3_right_jacobian(&rho.rot));
            let k = match self.layout.intrinsic_offset(c) {
                Some(o) => cam.intrinsics.offset(&[x[o], x[o + 1], x[o + 2], x[o + 3]]),
                None => cam.effective_intrinsics(),
            };
            d.k.push(k.params());
        }
        d
    }

    fn camera_pose(&self, d: &Decoded, frame: usize, cam: usize) -> SE3Pose {
        d.device[frame].compose(&d.ext[cam])
    }

    fn map_sets<R, F>(&self, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&SetRef<'a>) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.threads > 1 {
            use rayon::prelude::*;
            return self.sets.par_iter().map(f).collect();
        }
        self.sets.iter().map(f).collect()
    }

    fn evaluate(&self, x: &[f64], temperature: f64, want_grad: bool) -> Result<(LossBreakdown, Vec<f64>)> {
        let w = self.weights;
        let d = self.decode(x);
        let mut grad = if want_grad { vec![0.0; x.len()] } else { Vec::new() };
        let mut loss = LossBreakdown::default();

        if (w.epi > 0.0 || w.reproj > 0.0) && !self.sets.is_empty() {
            let intr = self.layout.intrinsics_learnable;
            let evals = self.map_sets(|s| {
                let g = self.camera_pose(&d, s.fi, s.ci).inverse().compose(&self.camera_pose(&d, s.fj, s.cj));
                let (ki, kj) = (&d.k[s.ci], &d.k[s.cj]);
                match (want_grad, intr) {
                    (false, _) => set_value(s.set, &g, ki, kj, w),
                    (true, false) => set_gradient::<6>(s.set, &g, ki, kj, false, w),
                    (true, true) => set_gradient::<14>(s.set, &g, ki, kj, true, w),
                }
            });
            let n_sets = self.sets.len() as f64;
            let (mut sampson_n, mut reproj_n) = (0usize, 0usize);
            for (s, e) in self.sets.iter().zip(evals.iter()) {
                loss.epipolar += e.sampson;
                loss.reproj += e.reproj;
                sampson_n += e.sampson_n;
                reproj_n += e.reproj_n;
                if want_grad {
                    self.accumulate(&d, s, e, 1.0 / n_sets, &mut grad);
                }
            }
            if (w.epi > 0.0 && sampson_n == 0) || (w.reproj > 0.0 && reproj_n == 0) {
                return Err(Error::NoAcceptedMatches);
            }
            loss.epipolar /= n_sets;
            loss.reproj /= n_sets;
        }

        if w.barrier > 0.0 && !x.is_empty() {
            let n = x.len() as f64;
            let mut sum = 0.0;
            for (k, b) in self.bounds.iter().enumerate() {
                sum += barrier_value(x[k], b.lower, b.upper, temperature)?;
                if want_grad {
                    grad[k] += w.barrier * barrier_gradient(x[k], b.lower, b.upper, temperature)? / n;
                }
            }
            loss.barrier = sum / n;
        }
        loss.total = w.epi * loss.epipolar + w.reproj * loss.reproj + w.barrier * loss.barrier;
        Ok((loss, grad))
    }

    /// Chains the per-camera perturbation gradients of one set onto `φ`, `ρ`
    /// and the intrinsic deltas.
    fn accumulate(&self, d: &Decoded, s: &SetRef<'_>, e: &SetEval, scale: f64, grad: &mut [f64]) {
        for (frame, cam, xi, k) in [(s.fi, s.ci, &e.xi_i, &e.k_i), (s.fj, s.cj, &e.xi_j, &e.k_j)] {
            let g_w = Vector3::new(xi[0], xi[1], xi[2]) * scale;
            let g_v = Vector3::new(xi[3], xi[4], xi[5]) * scale;
            let rx = d.ext[cam].rotation.matrix();
            let tx = &d.ext[cam].translation;
            let rc = d.device[frame].rotation.matrix() * rx;
            let rp = self.traj.frames()[frame].pose.rotation.matrix();

            let phi_rot = d.jr_phi[frame].transpose() * (rx * g_w + tx.cross(&(rx * g_v)));
            let phi_trans = rp.transpose() * (rc * g_v);
            let rho_rot = d.jr_rho[cam].transpose() * g_w;
            let rho_trans = d.rho_rot[cam] * g_v;

            let o = self.layout.phi_offset(frame);
            for c in 0..3 {
                grad[o + c] += phi_rot[c];
                grad[o + 3 + c] += phi_trans[c];
            }
            let o = self.layout.rho_offset(cam);
            for c in 0..3 {
                grad[o + c] += rho_rot[c];
                grad[o + 3 + c] += rho_trans[c];
            }
            if let Some(o) = self.layout.intrinsic_offset(cam) {
                for c in 0..4 {
                    grad[o + c] += k[c] * scale;
                }
            }
        }
    }
}

fn delta_at(x: &[f64], o: usize) -> TangentDelta {
    TangentDelta::from_array([x[o], x[o + 1], x[o + 2], x[o + 3], x[o + 4], x[o + 5]])
}

/// Box of every flat parameter: pose groups absolute, intrinsic groups
/// relative to the camera's base intrinsics.
fn slot_bounds(rig: &RigModel, layout: &ParamLayout, spec: &BarrierSpec) -> Vec<Bounds> {
    layout
        .slots
        .iter()
        .map(|slot| {
            let initial = match (slot.group.is_intrinsic(), slot.owner) {
                (true, ParamOwner::Camera(c)) => rig.cameras()[c].intrinsics.params()[slot.component],
                _ => 0.0,
            };
            spec.delta_bounds(slot.group, initial)
        })
        .collect()
}

fn terms(w: Weights) -> Terms {
    Terms { sampson: w.epi > 0.0, reproj: w.reproj > 0.0 }
}

/// Set value with camera `i` at the origin and camera `j` at `g`.
fn set_value(set: &MatchSet, g: &SE3Pose, k_i: &[f64; 4], k_j: &[f64; 4], w: Weights) -> SetEval {
    let out = kernel::evaluate::<f64>(
        &PairInput {
            pose_i: None,
            pose_j: PoseT::from_pose(g),
            k_i: *k_i,
            k_j: *k_j,
            matches: set,
        },
        terms(w),
        None,
    );
    SetEval {
        sampson: out.sampson_mean(),
        sampson_n: out.sampson_count,
        reproj: out.reproj_mean(),
        reproj_n: out.reproj_count,
        ..SetEval::default()
    }
}

/// Set value and derivatives. Slots `0..6` perturb camera `j` relative to
/// camera `i` as `g ∘ exp(ζ)`; with `intr`, slots `6..10`/`10..14` are the
/// intrinsics of `i`/`j`.
fn set_gradient<const N: usize>(set: &MatchSet, g: &SE3Pose, k_i: &[f64; 4], k_j: &[f64; 4], intr: bool, w: Weights) -> SetEval {
    let var = |slot: usize| Dual::<N>::variable(0.0, slot);
    let z = Dual::<N>::constant(0.0);
    let om = [var(0), var(1), var(2)];
    let skew = M3([[z, -om[2], om[1]], [om[2], z, -om[0]], [-om[1], om[0], z]]);
    let rg = M3::<Dual<N>>::from_f64(g.rotation.matrix());
    // first order is exact for first derivatives
    let rs = rg.mul(&skew);
    let mut r = rg;
    for (row, drow) in r.0.iter_mut().zip(rs.0.iter()) {
        for (v, dv) in row.iter_mut().zip(drow.iter()) {
            *v = *v + *dv;
        }
    }
    let c = V3::<Dual<N>>::from_f64(&g.translation).add(&rg.mul_vec(&V3([var(3), var(4), var(5)])));
    let kd = |k: &[f64; 4], base: usize| -> [Dual<N>; 4] {
        core::array::from_fn(|m| if intr { Dual::variable(k[m], base + m) } else { Dual::constant(k[m]) })
    };
    let out = kernel::evaluate::<Dual<N>>(
        &PairInput {
            pose_i: None,
            pose_j: PoseT { r, c },
            k_i: kd(k_i, 6),
            k_j: kd(k_j, 10),
            matches: set,
        },
        terms(w),
        None,
    );
    let sampson = out.sampson_mean();
    let reproj = out.reproj_mean();
    let value = sampson * w.epi + reproj * w.reproj;
    let eps = &value.eps;

    // ζ = ξ_j and ζ = -Ad(g⁻¹)·ξ_i to first order
    let rgm = g.rotation.matrix();
    let g_w = Vector3::new(eps[0], eps[1], eps[2]);
    let g_v = Vector3::new(eps[3], eps[4], eps[5]);
    let s = -(rgm.tr_mul(&g.translation));
    let wi = rgm * s.cross(&g_v) - rgm * g_w;
    let vi = -(rgm * g_v);

    let mut e = SetEval {
        sampson: sampson.re,
        sampson_n: out.sampson_count,
        reproj: reproj.re,
        reproj_n: out.reproj_count,
        xi_i: [wi.x, wi.y, wi.z, vi.x, vi.y, vi.z],
        xi_j: [eps[0], eps[1], eps[2], eps[3], eps[4], eps[5]],
        ..SetEval::default()
    };
    if intr {
        e.k_i.copy_from_slice(&eps[6..10]);
        e.k_j.copy_from_slice(&eps[10..14]);
    }
    e
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RefineConfig {
    pub weights: LossWeights,
    pub bounds: BarrierSpec,
    /// Barrier temperature at the first and last iteration.
    pub t_start: f64,
    pub t_end: f64,
    pub schedule: LRSchedule,
    pub momentum: f64,
    pub toggles: Toggles,
    pub log_interval: usize,
    /// Matches per set triangulated for the preconditioner.
    pub precondition_samples_per_set: usize,
    /// Worker threads for per-set evaluation (needs the `parallel` feature).
    pub threads: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            weights: LossWeights::default(),
            bounds: BarrierSpec::default(),
            t_start: 1.0,
            t_end: 1e4,
            schedule: LRSchedule::default(),
            momentum: 0.9,
            toggles: Toggles::default(),
            log_interval: 50,
            precondition_samples_per_set: 8,
            threads: 1,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.bounds.validate()?;
        self.schedule.validate()?;
        self.temperature_schedule().validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("momentum must be in [0, 1)".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidInput("log_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn temperature_schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule { t_start: self.t_start, t_end: self.t_end, total_iters: self.schedule.max_iter }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub ep_e: f64,
    pub rp_e: f64,
    pub temperature: f64,
    pub lr_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    /// Inputs with the learned deltas written back.
    pub trajectory: DeviceTrajectory,
    pub rig: RigModel,
    /// Every `log_interval` iterations plus the final state.
    pub history: Vec<HistoryEntry>,
    pub rates: PreconditionedRates,
    pub iterations: usize,
    pub initial_metrics: GeometricMetrics,
    pub final_metrics: GeometricMetrics,
    /// Steps that left the box and were pulled back inside.
    pub clamp_events: usize,
    /// Largest `|δ - mid| / half_width` seen per group (1 = on the wall).
    pub max_usage: [f64; 8],
    /// Every bounded parameter strictly inside its box after every step.
    pub always_feasible: bool,
}

/// Momentum gradient descent on all deltas with per-group rate
/// `base_lr × multiplier × cosine(iter)` and the barrier temperature ramped
/// over `max_iter`.
pub fn run_refinement(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    sets: &[MatchSet],
    config: &RefineConfig,
) -> Result<RefinementResult> {
    config.validate()?;
    #[cfg(feature = "parallel")]
    if config.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidInput(alloc::format!("thread pool: {e}")))?;
        return pool.install(|| refine_inner(traj, rig, sets, config));
    }
    refine_inner(traj, rig, sets, config)
}

fn refine_inner(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    sets: &[MatchSet],
    config: &RefineConfig,
) -> Result<RefinementResult> {
    let toggles = config.toggles;
    let (mut x, layout) = flatten_params(traj, rig, toggles.intrinsics_learnable);
    let problem = Problem::new(traj, rig, sets, layout, &config.weights, &config.bounds, &toggles, config.threads)?;
    let barrier_on = problem.weights.barrier > 0.0;
    if barrier_on {
        for (v, b) in x.iter().zip(problem.bounds.iter()) {
            if !b.contains(*v) {
                return Err(Error::OutOfBounds { value: *v, lower: b.lower, upper: b.upper });
            }
        }
    }

    let rates = if toggles.precondition_enabled {
        let samples = preconditioner_samples(traj, rig, sets, config.precondition_samples_per_set)?;
        compute_preconditioner(traj, rig, &samples)?
    } else {
        PreconditionedRates::default()
    };
    let base_lr: Vec<f64> =
        problem.layout.slots.iter().map(|s| config.schedule.base_lr(s.group) * rates.multiplier(s.group)).collect();

    let mut state_traj = traj.clone();
    let mut state_rig = rig.clone();
    let initial_metrics = geometric_metrics(traj, rig, sets)?;
    let tsched = config.temperature_schedule();
    let max_iter = config.schedule.max_iter;
    let mut velocity = vec![0.0; x.len()];
    let mut history = Vec::new();
    let mut clamp_events = 0usize;
    let mut max_usage = [0.0f64; 8];
    let mut always_feasible = true;

    let mut record = |iter: usize, x: &[f64], loss: LossBreakdown, history: &mut Vec<HistoryEntry>| -> Result<()> {
        unflatten_params(x, &problem.layout, &mut state_traj, &mut state_rig)?;
        let m = geometric_metrics(&state_traj, &state_rig, sets)?;
        history.push(HistoryEntry {
            iteration: iter,
            loss,
            ep_e: m.ep_e,
            rp_e: m.rp_e,
            temperature: temperature(&tsched, iter),
            lr_factor: config.schedule.factor(iter),
        });
        Ok(())
    };

    // The starting state was usable, so a step that destroys every
    // correspondence means the iterates ran away.
    let lost = |iteration: usize| {
        move |e: Error| match e {
            Error::NoAcceptedMatches | Error::DegenerateBaseline => Error::Diverged { iteration },
            e => e,
        }
    };

    for iter in 0..max_iter {
        let t = temperature(&tsched, iter);
        let (loss, grad) = problem.evaluate(&x, t, true).map_err(lost(iter))?;
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: iter });
        }
        if iter % config.log_interval == 0 {
            record(iter, &x, loss, &mut history).map_err(lost(iter))?;
        }
        let factor = config.schedule.factor(iter);
        for k in 0..x.len() {
            velocity[k] = config.momentum * velocity[k] + grad[k];
            x[k] -= base_lr[k] * factor * velocity[k];
            let b = &problem.bounds[k];
            if barrier_on && !b.contains(x[k]) {
                x[k] = b.clamp_interior(x[k]);
                velocity[k] = 0.0;
                clamp_events += 1;
            }
            if !x[k].is_finite() {
                return Err(Error::Diverged { iteration: iter });
            }
            always_feasible &= b.contains(x[k]);
            let g = problem.layout.slots[k].group.index();
            max_usage[g] = max_usage[g].max(b.usage(x[k]));
        }
    }

    let final_t = temperature(&tsched, max_iter);
    let (final_loss, _) = problem.evaluate(&x, final_t, false).map_err(lost(max_iter))?;
    if !final_loss.total.is_finite() {
        return Err(Error::Diverged { iteration: max_iter });
    }
    record(max_iter, &x, final_loss, &mut history).map_err(lost(max_iter))?;
    let mut out_traj = traj.clone();
    let mut out_rig = rig.clone();
    unflatten_params(&x, &problem.layout, &mut out_traj, &mut out_rig)?;
    let final_metrics = geometric_metrics(&out_traj, &out_rig, sets)?;
    Ok(RefinementResult {
        trajectory: out_traj,
        rig: out_rig,
        history,
        rates,
        iterations: max_iter,
        initial_metrics,
        final_metrics,
        clamp_events,
        max_usage,
        always_feasible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptConfig {
    /// Peak rate; decays along one cosine segment.
    pub lr: f64,
    pub iterations: usize,
    pub momentum: f64,
    pub weights: LossWeights,
    pub epipolar_enabled: bool,
    pub reproj_enabled: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 5e-4,
            iterations: 500,
            momentum: 0.9,
            weights: LossWeights::default(),
            epipolar_enabled: true,
            reproj_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptResult {
    /// `new_frame_pose ∘ exp(φ)`
    pub pose: SE3Pose,
    pub phi: TangentDelta,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub matches: usize,
}

pub const MIN_ADAPT_MATCHES: usize = 8;

/// Fits only the `φ` of `frame_index`, starting from `new_frame_pose`,
/// against the sets that touch that frame. The trajectory and rig passed in
/// are never modified.
pub fn test_time_adapt(
    traj: &DeviceTrajectory,
    rig: &RigModel,
    frame_index: usize,
    new_frame_pose: &SE3Pose,
    sets: &[MatchSet],
    config: &AdaptConfig,
) -> Result<AdaptResult> {
    config.weights.validate()?;
    if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::InvalidInput("adapt needs lr > 0 and momentum in [0, 1)".into()));
    }
    traj.frame(frame_index)?;
    let touching: Vec<MatchSet> =
        sets.iter().filter(|s| s.frame_i == frame_index || s.frame_j == frame_index).cloned().collect();
    let matches: usize = touching.iter().map(MatchSet::len).sum();
    if matches < MIN_ADAPT_MATCHES {
        return Err(Error::InsufficientMatches { found: matches, required: MIN_ADAPT_MATCHES });
    }

    let mut local = traj.clone();
    {
        let f = &mut local.frames_mut()[frame_index];
        f.pose = *new_frame_pose;
        f.phi = TangentDelta::zero();
    }
    let toggles = Toggles {
        intrinsics_learnable: false,
        barrier_enabled: false,
        precondition_enabled: false,
        epipolar_enabled: config.epipolar_enabled,
        reproj_enabled: config.reproj_enabled,
    };
    let (mut x, layout) = flatten_params(&local, rig, false);
    let problem = Problem::new(&local, rig, &touching, layout, &config.weights, &BarrierSpec::default(), &toggles, 1)?;
    let o = problem.layout.phi_offset(frame_index);
    let schedule = LRSchedule { extrinsic_lr: config.lr, intrinsic_lr: config.lr, max_iter: config.iterations };
    let mut velocity = [0.0; 6];
    let initial_loss = problem.evaluate(&x, 1.0, false)?.0.total;
    for iter in 0..config.iterations {
        let (loss, grad) = problem.evaluate(&x, 1.0, true)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        // single segment: restarts do not apply to this short run
        let lr = config.lr * single_segment_factor(&schedule, iter);
        for c in 0..6 {
            velocity[c] = config.momentum * velocity[c] + grad[o + c];
            x[o + c] -= lr * velocity[c];
        }
    }
    let final_loss = problem.evaluate(&x, 1.0, false)?.0.total;
    let phi = delta_at(&x, o);
    Ok(AdaptResult { pose: apply_right_delta(new_frame_pose, &phi), phi, initial_loss, final_loss, matches })
}

fn single_segment_factor(s: &LRSchedule, iter: usize) -> f64 {
    if s.max_iter <= 1 {
        return 1.0;
    }
    let p = (iter.min(s.max_iter - 1)) as f64 / (s.max_iter - 1) as f64;
    COSINE_FLOOR + (1.0 - COSINE_FLOOR) * 0.5 * (1.0 + fmath::cos(core::f64::consts::PI * p))
}
