//! Run configuration. TOML by default; JSON when the file ends in `.json` or
//! starts with `{`. Unknown keys are errors everywhere and `seed` is
//! mandatory. Every other key has a default.
//!
//! Relative paths in `[paths]` are resolved against the config file's
//! directory.

use std::path::{Path, PathBuf};

use rigrefine_core::barrier::{default_bounds, BarrierSpec, Bounds};
use rigrefine_core::bench::{MatchOptions, NoiseSpec, SceneConfig};
use rigrefine_core::{LRSchedule, LossWeights, ParamGroupId, RefineConfig, Toggles};
use serde::{Deserialize, Serialize};

use crate::formats::read_text;
use crate::{CliError, Result};

const DEG: f64 = std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds scene generation, noise and match synthesis. Refinement itself
    /// draws no random numbers; the seed is recorded in its report.
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub toggles: TogglesSection,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub matches: MatchesSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub rig: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub matches: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Optional; when both are set, `refine` also reports pose errors.
    /// The rig may be a rig file or a `scene.json` written by `simulate`.
    pub ground_truth_rig: Option<PathBuf>,
    pub ground_truth_trajectory: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub lambda_barrier: f64,
    pub lambda_epi: f64,
    pub lambda_reproj: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsSection { lambda_barrier: w.lambda_barrier, lambda_epi: w.lambda_epi, lambda_reproj: w.lambda_reproj }
    }
}

/// Symmetric half-widths of the delta boxes. Intrinsic groups are fractions
/// of the initial value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub phi_rot_deg: f64,
    pub phi_trans_m: f64,
    pub rho_rot_deg: f64,
    pub rho_trans_m: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        let b = default_bounds();
        let u = |g: ParamGroupId| b.group(g).upper;
        // Degrees written out so converting back reproduces the default bits.
        BoundsSection {
            phi_rot_deg: 0.625,
            phi_trans_m: u(ParamGroupId::PhiTrans),
            rho_rot_deg: 2.5,
            rho_trans_m: u(ParamGroupId::RhoTrans),
            fx: u(ParamGroupId::Fx),
            fy: u(ParamGroupId::Fy),
            cx: u(ParamGroupId::Cx),
            cy: u(ParamGroupId::Cy),
        }
    }
}

impl BoundsSection {
    fn fields(&self) -> [(&'static str, ParamGroupId, f64); 8] {
        [
            ("phi_rot_deg", ParamGroupId::PhiRot, self.phi_rot_deg * DEG),
            ("phi_trans_m", ParamGroupId::PhiTrans, self.phi_trans_m),
            ("rho_rot_deg", ParamGroupId::RhoRot, self.rho_rot_deg * DEG),
            ("rho_trans_m", ParamGroupId::RhoTrans, self.rho_trans_m),
            ("fx", ParamGroupId::Fx, self.fx),
            ("fy", ParamGroupId::Fy, self.fy),
            ("cx", ParamGroupId::Cx, self.cx),
            ("cy", ParamGroupId::Cy, self.cy),
        ]
    }

    pub fn to_spec(&self) -> Result<BarrierSpec> {
        let mut spec = default_bounds();
        for (name, g, half) in self.fields() {
            if !(half > 0.0 && half.is_finite()) {
                return Err(CliError::Config(format!("bounds.{name} must be finite and > 0")));
            }
            spec.set(g, Bounds::symmetric(half));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub extrinsic_lr: f64,
    pub intrinsic_lr: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Rows of `history.csv` are this many iterations apart.
    pub log_interval: usize,
    pub precondition_samples_per_set: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let r = RefineConfig::default();
        ScheduleSection {
            extrinsic_lr: r.schedule.extrinsic_lr,
            intrinsic_lr: r.schedule.intrinsic_lr,
            max_iter: r.schedule.max_iter,
            momentum: r.momentum,
            t_start: r.t_start,
            t_end: r.t_end,
            log_interval: r.log_interval,
            precondition_samples_per_set: r.precondition_samples_per_set,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TogglesSection {
    pub intrinsics_learnable: bool,
    pub barrier_enabled: bool,
    pub precondition_enabled: bool,
    pub epipolar_enabled: bool,
    pub reproj_enabled: bool,
}

impl Default for TogglesSection {
    fn default() -> Self {
        Toggles::default().into()
    }
}

impl From<Toggles> for TogglesSection {
    fn from(t: Toggles) -> Self {
        TogglesSection {
            intrinsics_learnable: t.intrinsics_learnable,
            barrier_enabled: t.barrier_enabled,
            precondition_enabled: t.precondition_enabled,
            epipolar_enabled: t.epipolar_enabled,
            reproj_enabled: t.reproj_enabled,
        }
    }
}

impl From<TogglesSection> for Toggles {
    fn from(t: TogglesSection) -> Self {
        Toggles {
            intrinsics_learnable: t.intrinsics_learnable,
            barrier_enabled: t.barrier_enabled,
            precondition_enabled: t.precondition_enabled,
            epipolar_enabled: t.epipolar_enabled,
            reproj_enabled: t.reproj_enabled,
        }
    }
}

/// Scene generation for `simulate`; the seed comes from the top level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub num_frames: usize,
    pub num_cameras: usize,
    pub num_landmarks: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub baseline: f64,
    pub yaw_step_deg: f64,
    pub frame_spacing: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let c = SceneConfig::default();
        SceneSection {
            num_frames: c.num_frames,
            num_cameras: c.num_cameras,
            num_landmarks: c.num_landmarks,
            width: c.width,
            height: c.height,
            focal: c.focal,
            baseline: c.baseline,
            yaw_step_deg: c.yaw_step_deg,
            frame_spacing: c.frame_spacing,
            min_depth: c.min_depth,
            max_depth: c.max_depth,
        }
    }
}

/// Noise for `simulate`. `rotation_level_deg` picks the rotational
/// benchmark preset; any explicit sigma overrides the preset's value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub rotation_level_deg: f64,
    pub device_rot_sigma_deg: Option<f64>,
    pub device_trans_sigma_m: Option<f64>,
    pub rig_rot_sigma_deg: Option<f64>,
    pub point_sigma_m: Option<f64>,
    pub pixel_sigma_px: Option<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            rotation_level_deg: 0.5,
            device_rot_sigma_deg: None,
            device_trans_sigma_m: None,
            rig_rot_sigma_deg: None,
            point_sigma_m: None,
            pixel_sigma_px: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchesSection {
    pub offsets: Vec<usize>,
    pub max_per_set: usize,
}

impl Default for MatchesSection {
    fn default() -> Self {
        let m = MatchOptions::default();
        MatchesSection { offsets: m.offsets, max_per_set: m.max_per_set }
    }
}

fn section(name: &str) -> impl Fn(rigrefine_core::Error) -> CliError + '_ {
    move |e| match e {
        rigrefine_core::Error::InvalidInput(m) => CliError::Config(format!("[{name}] {m}")),
        e => CliError::Config(format!("[{name}] {e}")),
    }
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            paths: PathsSection::default(),
            weights: WeightsSection::default(),
            bounds: BoundsSection::default(),
            schedule: ScheduleSection::default(),
            toggles: TogglesSection::default(),
            scene: SceneSection::default(),
            noise: NoiseSection::default(),
            matches: MatchesSection::default(),
        }
    }

    pub fn parse(text: &str, json: bool) -> std::result::Result<RunConfig, String> {
        if json || text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }

    /// Reads and parses `path`, then resolves relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = read_text(path)?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = RunConfig::parse(&text, json).map_err(|m| CliError::Config(format!("{}: {m}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.rig,
            &mut p.trajectory,
            &mut p.matches,
            &mut p.output_dir,
            &mut p.ground_truth_rig,
            &mut p.ground_truth_trajectory,
        ] {
            if let Some(v) = slot.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let s = &self.scene;
        let c = SceneConfig {
            num_frames: s.num_frames,
            num_cameras: s.num_cameras,
            num_landmarks: s.num_landmarks,
            width: s.width,
            height: s.height,
            focal: s.focal,
            baseline: s.baseline,
            yaw_step_deg: s.yaw_step_deg,
            frame_spacing: s.frame_spacing,
            min_depth: s.min_depth,
            max_depth: s.max_depth,
            seed: self.seed,
        };
        c.validate().map_err(section("scene"))?;
        Ok(c)
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        let n = &self.noise;
        if !(n.rotation_level_deg >= 0.0 && n.rotation_level_deg.is_finite()) {
            return Err(CliError::Config("[noise] rotation_level_deg must be finite and >= 0".into()));
        }
        let mut spec = NoiseSpec::rotation_benchmark(n.rotation_level_deg, self.seed);
        if let Some(v) = n.device_rot_sigma_deg {
            spec.device_rot_sigma = v;
        }
        if let Some(v) = n.device_trans_sigma_m {
            spec.device_trans_sigma = v;
        }
        if let Some(v) = n.rig_rot_sigma_deg {
            spec.rig_rot_sigma = v;
        }
        if let Some(v) = n.point_sigma_m {
            spec.point_sigma = v;
        }
        if let Some(v) = n.pixel_sigma_px {
            spec.pixel_sigma = v;
        }
        spec.validate().map_err(section("noise"))?;
        Ok(spec)
    }

    pub fn match_options(&self) -> Result<MatchOptions> {
        let n = self.noise_spec()?;
        let m = &self.matches;
        if m.offsets.is_empty() || m.offsets.iter().any(|o| !(1..=3).contains(o)) {
            return Err(CliError::Config("[matches] offsets must be a non-empty list of values in 1..=3".into()));
        }
        if m.max_per_set < rigrefine_core::bench::MIN_MATCHES_PER_SET {
            return Err(CliError::Config(format!(
                "[matches] max_per_set must be >= {}",
                rigrefine_core::bench::MIN_MATCHES_PER_SET
            )));
        }
        Ok(MatchOptions { offsets: m.offsets.clone(), pixel_sigma: n.pixel_sigma, max_per_set: m.max_per_set, seed: self.seed })
    }

    pub fn refine_config(&self, threads: usize) -> Result<RefineConfig> {
        let w = &self.weights;
        let weights = LossWeights { lambda_barrier: w.lambda_barrier, lambda_epi: w.lambda_epi, lambda_reproj: w.lambda_reproj };
        weights.validate().map_err(section("weights"))?;
        let s = &self.schedule;
        let schedule = LRSchedule { extrinsic_lr: s.extrinsic_lr, intrinsic_lr: s.intrinsic_lr, max_iter: s.max_iter };
        let cfg = RefineConfig {
            weights,
            bounds: self.bounds.to_spec()?,
            t_start: s.t_start,
            t_end: s.t_end,
            schedule,
            momentum: s.momentum,
            toggles: self.toggles.into(),
            log_interval: s.log_interval,
            precondition_samples_per_set: s.precondition_samples_per_set,
            threads: threads.max(1),
        };
        cfg.validate().map_err(section("schedule"))?;
        Ok(cfg)
    }

    /// `paths.<name>`, which must be set and name an existing file.
    pub fn input_path(&self, name: &str) -> Result<PathBuf> {
        let p = match name {
            "rig" => &self.paths.rig,
            "trajectory" => &self.paths.trajectory,
            "matches" => &self.paths.matches,
            "ground_truth_rig" => &self.paths.ground_truth_rig,
            "ground_truth_trajectory" => &self.paths.ground_truth_trajectory,
            _ => unreachable!("unknown path key {name}"),
        };
        let p = p.as_ref().ok_or_else(|| CliError::Config(format!("paths.{name} is required")))?;
        if !p.is_file() {
            return Err(CliError::Config(format!("paths.{name}: {} does not exist", p.display())));
        }
        Ok(p.clone())
    }

    /// `override_dir` if given, otherwise `paths.output_dir`.
    pub fn output_dir(&self, override_dir: Option<&Path>) -> Result<PathBuf> {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.paths.output_dir.clone())
            .ok_or_else(|| CliError::Config("paths.output_dir is required (or pass --out-dir)".into()))
    }
}
