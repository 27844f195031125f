use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rigrefine::commands::SceneFile;
use rigrefine::formats::{read_image, read_offset, read_rig, read_trajectory, write_image};
use rigrefine::report::{EvaluateReport, RefineReport};
use rigrefine_core::exposure::{render_offset, rgb_to_ycbcr, ycbcr_to_rgb, RgbImage};

const DATA_FILES: [&str; 5] = ["rig.json", "trajectory_gt.txt", "trajectory_noisy.txt", "matches.csv", "scene.json"];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rigrefine")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SCENE: &str = "[scene]\nnum_frames = 10\nnum_landmarks = 200\n";

fn simulate(dir: &Path, extra: &str) -> PathBuf {
    let cfg = write(dir, "sim.toml", &format!("seed = 11\n[paths]\noutput_dir = \"data\"\n{SMALL_SCENE}{extra}"));
    let o = bin(&["simulate", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("data")
}

fn refine_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 11\n[paths]\nrig = \"data/rig.json\"\ntrajectory = \"data/trajectory_noisy.txt\"\nmatches = \"data/matches.csv\"\n\
         output_dir = \"out\"\nground_truth_rig = \"data/scene.json\"\nground_truth_trajectory = \"data/trajectory_gt.txt\"\n{extra}"
    );
    write(dir, "refine.toml", &text)
}

#[test]
fn simulate_writes_a_repeatable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "");
    let again = dir.path().join("again");
    let o = bin(&["simulate", "--config", p(&dir.path().join("sim.toml")), "--out-dir", p(&again)]);
    assert!(o.status.success());
    for f in DATA_FILES {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    let scene: SceneFile = serde_json::from_str(&fs::read_to_string(data.join("scene.json")).unwrap()).unwrap();
    assert_eq!(scene.seed, 11);
    assert_eq!(scene.landmarks.len(), 200);
    assert_eq!(read_trajectory(&data.join("trajectory_noisy.txt")).unwrap().len(), 10);
}

#[test]
fn zero_cameras_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "seed = 1\n[paths]\noutput_dir = \"d\"\n[scene]\nnum_cameras = 0\n");
    let o = bin(&["simulate", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("num_cameras"), "{}", stderr(&o));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = write(dir.path(), "a.toml", "[paths]\noutput_dir = \"d\"\n");
    let o = bin(&["simulate", "--config", p(&no_seed)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
    let json = write(dir.path(), "b.json", r#"{"seed": 1, "paths": {"output_dir": "d"}, "scene": {"num_frames": 1}}"#);
    let o = bin(&["simulate", "--config", p(&json)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("num_frames"), "{}", stderr(&o));
    let missing = refine_config(dir.path(), "");
    let o = bin(&["refine", "--config", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.rig"), "{}", stderr(&o));
    assert_eq!(bin(&["simulate"]).status.code(), Some(2));
    assert_eq!(bin(&["refine", "--config", "x.toml", "--threads", "0"]).status.code(), Some(2));
}

#[test]
fn noiseless_refinement_keeps_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "[noise]\nrotation_level_deg = 0.0\npixel_sigma_px = 0.0\n");
    let cfg = refine_config(dir.path(), "[schedule]\nmax_iter = 200\nlog_interval = 20\n");
    let o = bin(&["refine", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let r: RefineReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.schema_version, 1);
    assert_eq!(r.iterations, 200);
    let pose = r.final_.pose.unwrap();
    assert!(pose.rot_max_deg < 1e-4 && pose.trans_max < 1e-4, "{pose:?}");
    assert!(r.always_feasible);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    // header, iterations 0, 20, ..., 200
    assert_eq!(history.lines().count(), 12);
    assert!(history.starts_with("iteration,"));
    for f in ["refined_trajectory.txt", "refined_rig.json"] {
        assert!(out.join(f).is_file());
    }
}

#[test]
fn all_toggles_off_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "");
    let toggles = "[toggles]\nintrinsics_learnable = false\nbarrier_enabled = false\nprecondition_enabled = false\n\
                   epipolar_enabled = false\nreproj_enabled = false\n[schedule]\nmax_iter = 50\n";
    let o = bin(&["refine", "--config", p(&refine_config(dir.path(), toggles))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(read_rig(&out.join("refined_rig.json")).unwrap(), read_rig(&data.join("rig.json")).unwrap());
    let a = read_trajectory(&out.join("refined_trajectory.txt")).unwrap();
    let b = read_trajectory(&data.join("trajectory_noisy.txt")).unwrap();
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        assert_eq!(fa.timestamp, fb.timestamp);
        assert_eq!(fa.pose.translation, fb.pose.translation);
        assert!(fa.pose.rotation.angle_to(&fb.pose.rotation) < 1e-15);
    }
    let r: RefineReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.initial.pose, r.final_.pose);
    assert!(r.groups.iter().all(|g| g.max_abs_delta == 0.0));
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "");
    let cfg = refine_config(dir.path(), "[schedule]\nmax_iter = 5\n");
    fs::write(data.join("matches.csv"), "frame_i,cam_i,frame_j,cam_j,u_i,v_i,u_j,v_j\n0,0,1,0,1,2,3\n").unwrap();
    let o = bin(&["refine", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("matches.csv"), "{}", stderr(&o));

    // a match referencing a camera the rig does not have
    let rows: String = (0..8).map(|k| format!("0,7,1,7,{k},1,2,3\n")).collect();
    fs::write(data.join("matches.csv"), format!("frame_i,cam_i,frame_j,cam_j,u_i,v_i,u_j,v_j\n{rows}")).unwrap();
    let o = bin(&["refine", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("camera id 7"), "{}", stderr(&o));

    fs::write(data.join("rig.json"), "{\"cameras\": [}").unwrap();
    assert_eq!(bin(&["refine", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "");
    let cfg = refine_config(
        dir.path(),
        "[schedule]\nmax_iter = 50\nextrinsic_lr = 1e300\n[weights]\nlambda_barrier = 0.0\n[toggles]\nbarrier_enabled = false\n",
    );
    let o = bin(&["refine", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn evaluate_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "");
    let out = dir.path().join("eval/report.json");
    let (gt_rig, gt_traj) = (data.join("scene.json"), data.join("trajectory_gt.txt"));
    let o = bin(&[
        "evaluate",
        "--rig",
        p(&data.join("rig.json")),
        "--trajectory",
        p(&gt_traj),
        "--gt-rig",
        p(&data.join("rig.json")),
        "--gt-trajectory",
        p(&gt_traj),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: EvaluateReport = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!((r.pose.rot_mean_deg, r.pose.rot_max_deg, r.pose.trans_mean, r.pose.trans_max), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.ep_e, None);

    // the perturbed rig against the ground truth in scene.json is not zero
    let o = bin(&[
        "evaluate",
        "--rig",
        p(&data.join("rig.json")),
        "--trajectory",
        p(&gt_traj),
        "--gt-rig",
        p(&gt_rig),
        "--gt-trajectory",
        p(&gt_traj),
        "--matches",
        p(&data.join("matches.csv")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: EvaluateReport = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r.pose.rot_mean_deg > 0.01);
    assert!(r.ep_e.unwrap() > 0.0);
}

#[test]
fn evaluate_names_the_missing_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "");
    let gt = data.join("trajectory_gt.txt");
    let text = fs::read_to_string(&gt).unwrap();
    let short: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
    let cut = write(dir.path(), "short.txt", &short);
    let rig = data.join("rig.json");
    let o = bin(&["evaluate", "--rig", p(&rig), "--trajectory", p(&cut), "--gt-rig", p(&rig), "--gt-trajectory", p(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frame 9"), "{}", stderr(&o));
}

// Camera rotation error is |φ| for device-only noise, so its mean over many
// frames approaches E|x| for x ~ N(0, σ²I₃): σ·sqrt(8/π). Truncating each
// component at 3σ lowers that by well under 1%.
#[test]
fn evaluate_recovers_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    let noise = "[noise]\nrotation_level_deg = 0.0\ndevice_rot_sigma_deg = 0.2\ndevice_trans_sigma_m = 0.05\n";
    let cfg = write(
        dir.path(),
        "sim.toml",
        &format!("seed = 5\n[paths]\noutput_dir = \"data\"\n[scene]\nnum_frames = 400\nnum_cameras = 1\n{noise}"),
    );
    assert!(bin(&["simulate", "--config", p(&cfg)]).status.success());
    let data = dir.path().join("data");
    let o = bin(&[
        "evaluate",
        "--rig",
        p(&data.join("rig.json")),
        "--trajectory",
        p(&data.join("trajectory_noisy.txt")),
        "--gt-rig",
        p(&data.join("scene.json")),
        "--gt-trajectory",
        p(&data.join("trajectory_gt.txt")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: EvaluateReport = serde_json::from_slice(&o.stdout).unwrap();
    let chi3 = (8.0 / std::f64::consts::PI).sqrt();
    // standard error of the mean is about 2% here
    assert!((r.pose.rot_mean_deg / (0.2 * chi3) - 1.0).abs() < 0.08, "{}", r.pose.rot_mean_deg);
    assert!((r.pose.trans_mean / (0.05 * chi3) - 1.0).abs() < 0.08, "{}", r.pose.trans_mean);
    assert!(r.pose.rot_max_deg <= 0.2 * 3.0 * 3f64.sqrt());
}

fn textured(w: usize, h: usize) -> RgbImage {
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let s = (0.21 * x).sin() * (0.17 * y + 1.0).cos()
                + 0.6 * (0.37 * x + 2.0).cos() * (0.31 * y).sin()
                + 0.5 * (0.05 * x + 0.09 * y).sin();
            [0.45 + 0.17 * s, 0.4 + 0.15 * s, 0.42 - 0.1 * s]
        })
        .collect();
    RgbImage::new(w, h, data).unwrap()
}

fn scaled_luma(img: &RgbImage, gain: f64) -> RgbImage {
    let mut c = rgb_to_ycbcr(img);
    c.y.data.iter_mut().for_each(|v| *v *= gain);
    ycbcr_to_rgb(&c)
}

fn expose(dir: &Path, src: &RgbImage, dst: &RgbImage) -> Output {
    let (a, b) = (dir.join("src.png"), dir.join("dst.ppm"));
    write_image(&a, src).unwrap();
    write_image(&b, dst).unwrap();
    bin(&["expose", "--source", p(&a), "--target", p(&b), "--out-dir", p(&dir.join("out"))])
}

#[test]
fn expose_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let img = textured(96, 80);
    let o = expose(dir.path(), &img, &img);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = read_offset(&dir.path().join("out/offset.json")).unwrap();
    let maps = render_offset(&grid, 96, 80).unwrap();
    assert!(maps.gain.data.iter().all(|g| (g - 1.0).abs() < 1e-6));
    assert!(maps.bias.data.iter().all(|b| b.abs() < 1e-6));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("final residual 0.000000"), "{stdout}");
    let comp = read_image(&dir.path().join("out/compensated.png")).unwrap();
    let src = read_image(&dir.path().join("src.png")).unwrap();
    assert_eq!(comp, src);
}

#[test]
fn expose_recovers_a_gain() {
    let dir = tempfile::tempdir().unwrap();
    let img = textured(96, 80);
    let o = expose(dir.path(), &img, &scaled_luma(&img, 1.1));
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = read_offset(&dir.path().join("out/offset.json")).unwrap();
    let maps = render_offset(&grid, 96, 80).unwrap();
    let mut bias = 0.0;
    for y in 8..72 {
        for x in 8..88 {
            let g = maps.gain.at(x, y);
            assert!((g / 1.1 - 1.0).abs() < 0.01, "gain {g} at ({x}, {y})");
            bias += maps.bias.at(x, y);
        }
    }
    // 8-bit quantization lets gain and bias trade off locally
    assert!((bias / (64.0 * 80.0)).abs() < 0.002, "mean bias {}", bias / (64.0 * 80.0));
}

#[test]
fn expose_size_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = expose(dir.path(), &textured(96, 80), &textured(80, 96));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sizes differ"), "{}", stderr(&o));
}

#[test]
fn help_documents_every_flag() {
    let top = String::from_utf8(bin(&["--help"]).stdout).unwrap();
    for s in ["simulate", "refine", "evaluate", "expose", "--threads"] {
        assert!(top.contains(s), "{s} missing from --help");
    }
    let cases: [(&str, &[&str]); 4] = [
        ("simulate", &["--config", "--out-dir", "--threads"]),
        ("refine", &["--config", "--out-dir", "--threads"]),
        ("evaluate", &["--rig", "--trajectory", "--gt-rig", "--gt-trajectory", "--matches", "--out"]),
        ("expose", &["--source", "--target", "--out-dir"]),
    ];
    for (cmd, flags) in cases {
        let help = String::from_utf8(bin(&[cmd, "--help"]).stdout).unwrap();
        for f in flags.iter() {
            assert!(help.contains(f), "{f} missing from `{cmd} --help`");
        }
    }
}
