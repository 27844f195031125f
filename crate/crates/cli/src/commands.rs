//! The four subcommands. Each returns its report; `main` only handles
//! argument parsing, printing and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rigrefine_core::bench::{self, generate_scene, group_usage, perturb, pose_errors, synthesize_matches, MatchOptions, NoiseSpec, PoseErrors};
use rigrefine_core::exposure::{apply_compensation, fit_offset, luminance_residual, OffsetGrid};
use rigrefine_core::losses::{geometric_metrics, GeometricMetrics};
use rigrefine_core::{run_refinement, DeviceTrajectory, ParamGroupId, RigModel};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SceneSection};
use crate::formats::{self, read_text, write_text, RigFile};
use crate::report::{self, EvaluateReport, GroupReport, Metrics, RefineReport, SCHEMA_VERSION};
use crate::{CliError, Result};

pub const RIG_FILE: &str = "rig.json";
pub const TRAJECTORY_GT_FILE: &str = "trajectory_gt.txt";
pub const TRAJECTORY_NOISY_FILE: &str = "trajectory_noisy.txt";
pub const MATCHES_FILE: &str = "matches.csv";
pub const SCENE_FILE: &str = "scene.json";
pub const REFINED_TRAJECTORY_FILE: &str = "refined_trajectory.txt";
pub const REFINED_RIG_FILE: &str = "refined_rig.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const OFFSET_FILE: &str = "offset.json";
pub const COMPENSATED_FILE: &str = "compensated.png";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.display().to_string(), source })
}

/// Everything about a simulated dataset that the other files do not carry.
/// `rig.json` holds the perturbed rig; the unperturbed one lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema_version: u32,
    pub seed: u64,
    pub scene: SceneSection,
    pub noise: NoiseSpec,
    pub matches: MatchOptions,
    pub ground_truth_rig: RigFile,
    pub landmarks: Vec<[f64; 3]>,
    pub noisy_landmarks: Vec<[f64; 3]>,
}

/// Reads a rig file, or the ground-truth rig out of a `scene.json`.
pub fn read_ground_truth_rig(path: &Path) -> Result<RigModel> {
    let text = read_text(path)?;
    let bad = |m: String| CliError::Input { path: path.display().to_string(), message: m };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let file: RigFile = if value.get("ground_truth_rig").is_some() {
        serde_json::from_value::<SceneFile>(value).map_err(|e| bad(e.to_string()))?.ground_truth_rig
    } else {
        serde_json::from_value(value).map_err(|e| bad(e.to_string()))?
    };
    file.to_rig().map_err(bad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub files: Vec<PathBuf>,
    pub frames: usize,
    pub cameras: usize,
    pub landmarks: usize,
    pub match_sets: usize,
    pub matches: usize,
}

pub fn simulate(cfg: &RunConfig, out_override: Option<&Path>) -> Result<SimulateSummary> {
    let scene_cfg = cfg.scene_config()?;
    let noise = cfg.noise_spec()?;
    let options = cfg.match_options()?;
    let out = cfg.output_dir(out_override)?;

    let scene = generate_scene(&scene_cfg)?;
    let noisy = perturb(&scene, &noise)?;
    let sets = synthesize_matches(&scene, &options)?;

    create_dir(&out)?;
    let files: Vec<PathBuf> =
        [RIG_FILE, TRAJECTORY_GT_FILE, TRAJECTORY_NOISY_FILE, MATCHES_FILE, SCENE_FILE].iter().map(|f| out.join(f)).collect();
    formats::write_rig(&files[0], &noisy.rig)?;
    formats::write_trajectory(&files[1], &scene.trajectory)?;
    formats::write_trajectory(&files[2], &noisy.trajectory)?;
    formats::write_matches(&files[3], &sets)?;
    let scene_file = SceneFile {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        scene: cfg.scene,
        noise,
        matches: options,
        ground_truth_rig: RigFile::from_rig(&scene.rig),
        landmarks: scene.landmarks.iter().map(|p| [p.x, p.y, p.z]).collect(),
        noisy_landmarks: noisy.landmarks.iter().map(|p| [p.x, p.y, p.z]).collect(),
    };
    write_text(&files[4], &report::to_json(&scene_file))?;

    Ok(SimulateSummary {
        files,
        frames: scene.trajectory.len(),
        cameras: scene.rig.len(),
        landmarks: scene.landmarks.len(),
        match_sets: sets.len(),
        matches: sets.iter().map(|s| s.len()).sum(),
    })
}

fn metrics(m: &GeometricMetrics, pose: Option<PoseErrors>) -> Metrics {
    Metrics { ep_e: m.ep_e, rp_e: m.rp_e, matches: m.matches, rejected: m.rejected, pose }
}

/// Frame counts and timestamps must agree; the error names the first
/// offending frame.
fn check_compatible(traj: &DeviceTrajectory, gt: &DeviceTrajectory) -> Result<()> {
    for (k, (a, b)) in traj.frames().iter().zip(gt.frames()).enumerate() {
        if a.timestamp != b.timestamp {
            return Err(CliError::Mismatch(format!(
                "frame {k}: timestamp {} does not match ground truth {}",
                a.timestamp, b.timestamp
            )));
        }
    }
    if traj.len() != gt.len() {
        let (k, which) = if traj.len() < gt.len() { (traj.len(), "trajectory") } else { (gt.len(), "ground truth") };
        return Err(CliError::Mismatch(format!(
            "frame {k} missing from the {which} ({} frames vs {} in ground truth)",
            traj.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn check_cameras(rig: &RigModel, gt: &RigModel) -> Result<()> {
    let a: Vec<_> = rig.cameras().iter().map(|c| c.id).collect();
    let b: Vec<_> = gt.cameras().iter().map(|c| c.id).collect();
    if a != b {
        return Err(CliError::Mismatch(format!("camera ids {a:?} do not match ground truth {b:?}")));
    }
    Ok(())
}

pub fn refine(cfg: &RunConfig, out_override: Option<&Path>, threads: usize) -> Result<RefineReport> {
    let rcfg = cfg.refine_config(threads)?;
    let rig = formats::read_rig(&cfg.input_path("rig")?)?;
    let traj = formats::read_trajectory(&cfg.input_path("trajectory")?)?;
    let sets = formats::read_matches(&cfg.input_path("matches")?)?;
    let gt = match (&cfg.paths.ground_truth_rig, &cfg.paths.ground_truth_trajectory) {
        (None, None) => None,
        (Some(_), Some(_)) => {
            let gt_rig = read_ground_truth_rig(&cfg.input_path("ground_truth_rig")?)?;
            let gt_traj = formats::read_trajectory(&cfg.input_path("ground_truth_trajectory")?)?;
            check_compatible(&traj, &gt_traj)?;
            check_cameras(&rig, &gt_rig)?;
            Some((gt_traj, gt_rig))
        }
        _ => {
            return Err(CliError::Config(
                "paths.ground_truth_rig and paths.ground_truth_trajectory must be given together".into(),
            ))
        }
    };
    let out = cfg.output_dir(out_override)?;

    let start = Instant::now();
    let result = run_refinement(&traj, &rig, &sets, &rcfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();

    let (pose0, pose1) = match &gt {
        Some((gt_traj, gt_rig)) => (
            Some(pose_errors(&traj, &rig, gt_traj, gt_rig)?),
            Some(pose_errors(&result.trajectory, &result.rig, gt_traj, gt_rig)?),
        ),
        None => (None, None),
    };
    let usage = group_usage(&result.trajectory, &result.rig, &rcfg.bounds);
    let groups = ParamGroupId::ALL
        .iter()
        .zip(usage)
        .map(|(g, u)| GroupReport {
            group: *g,
            max_abs_delta: u.max_abs_delta,
            bound: u.bound,
            max_usage: result.max_usage[g.index()],
            lr_multiplier: result.rates.multiplier(*g),
        })
        .collect();
    let (m0, m1) = (&result.initial_metrics, &result.final_metrics);
    let report = RefineReport {
        schema_version: SCHEMA_VERSION,
        command: "refine".into(),
        seed: cfg.seed,
        threads: rcfg.threads,
        toggles: cfg.toggles,
        iterations: result.iterations,
        wall_time_s,
        initial: metrics(m0, pose0),
        final_: metrics(m1, pose1),
        ep_e_reduction_factor: ratio(m0.ep_e, m1.ep_e),
        rp_e_reduction_percent: ratio(m1.rp_e, m0.rp_e).map(|r| 100.0 * (1.0 - r)),
        groups,
        clamp_events: result.clamp_events,
        always_feasible: result.always_feasible,
    };

    create_dir(&out)?;
    formats::write_trajectory(&out.join(REFINED_TRAJECTORY_FILE), &result.trajectory)?;
    formats::write_rig(&out.join(REFINED_RIG_FILE), &result.rig)?;
    write_text(&out.join(HISTORY_FILE), &report::history_csv(&result.history))?;
    write_text(&out.join(REPORT_FILE), &report::to_json(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateArgs {
    pub rig: PathBuf,
    pub trajectory: PathBuf,
    /// Rig file or `scene.json`.
    pub gt_rig: PathBuf,
    pub gt_trajectory: PathBuf,
    pub matches: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvaluateReport> {
    let rig = formats::read_rig(&args.rig)?;
    let traj = formats::read_trajectory(&args.trajectory)?;
    let gt_rig = read_ground_truth_rig(&args.gt_rig)?;
    let gt_traj = formats::read_trajectory(&args.gt_trajectory)?;
    check_compatible(&traj, &gt_traj)?;
    check_cameras(&rig, &gt_rig)?;
    let pose = bench::pose_errors(&traj, &rig, &gt_traj, &gt_rig)?;
    let (ep_e, rp_e, matches) = match &args.matches {
        Some(p) => {
            let sets = formats::read_matches(p)?;
            let m = geometric_metrics(&traj, &rig, &sets)?;
            (Some(m.ep_e), Some(m.rp_e), Some(m.matches))
        }
        None => (None, None, None),
    };
    let report = EvaluateReport {
        schema_version: SCHEMA_VERSION,
        command: "evaluate".into(),
        frames: traj.len(),
        cameras: rig.len(),
        pose,
        ep_e,
        rp_e,
        matches,
    };
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_text(out, &report::to_json(&report))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposeSummary {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub grid: OffsetGrid,
    pub files: Vec<PathBuf>,
}

/// Fits the offset mapping `source` toward `target` and writes it with the
/// compensated source image.
pub fn expose(source: &Path, target: &Path, out_dir: &Path) -> Result<ExposeSummary> {
    let src = formats::read_image(source)?;
    let dst = formats::read_image(target)?;
    let grid = fit_offset(&src, &dst)?;
    let initial_residual = luminance_residual(&src, &dst, &OffsetGrid::identity(src.width, src.height))?;
    let final_residual = luminance_residual(&src, &dst, &grid)?;
    let compensated = apply_compensation(&src, &grid)?;
    create_dir(out_dir)?;
    let files = vec![out_dir.join(OFFSET_FILE), out_dir.join(COMPENSATED_FILE)];
    formats::write_offset(&files[0], &grid)?;
    formats::write_image(&files[1], &compensated)?;
    Ok(ExposeSummary { initial_residual, final_residual, grid, files })
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (num > 0.0 && den > 0.0).then(|| num / den)
}
