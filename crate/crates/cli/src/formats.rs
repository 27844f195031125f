//! On-disk formats: rig JSON, trajectory text, match CSV, offset JSON and
//! 8-bit PNG/PPM images.
//!
//! Floats are written with Rust's shortest round-trip formatting, so rig and
//! match files read back bit-exact. Trajectory rotations pass through a
//! quaternion and come back within about 1e-16 rad.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use rigrefine_core::exposure::{OffsetGrid, RgbImage};
use rigrefine_core::{CameraId, DeviceTrajectory, Frame, Intrinsics, MatchSet, PixelCoord, RigCamera, RigModel, Rotation, SE3Pose};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Tolerance on the rotation block of a rig extrinsic.
pub const ORTHONORMAL_TOL: f64 = 1e-6;
/// Trajectory quaternions further than this from unit norm are rejected.
pub const QUATERNION_NORM_TOL: f64 = 1e-3;

pub const MATCH_HEADER: [&str; 8] = ["frame_i", "cam_i", "frame_j", "cam_j", "u_i", "v_i", "u_j", "v_j"];

fn input(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Input { path: path.display().to_string(), message: message.into() }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    pub cameras: Vec<CameraEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub id: CameraId,
    /// Camera-to-device transform, 4×4 row-major.
    pub extrinsic: [f64; 16],
    pub intrinsics: IntrinsicsEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl RigFile {
    /// Effective extrinsics and intrinsics; any pending deltas are folded in.
    pub fn from_rig(rig: &RigModel) -> Self {
        let cameras = rig
            .baked()
            .cameras()
            .iter()
            .map(|c| {
                let m = c.extrinsic.to_homogeneous();
                let mut extrinsic = [0.0; 16];
                for r in 0..4 {
                    for k in 0..4 {
                        extrinsic[4 * r + k] = m[(r, k)];
                    }
                }
                let k = c.intrinsics;
                CameraEntry {
                    id: c.id,
                    extrinsic,
                    intrinsics: IntrinsicsEntry { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height },
                }
            })
            .collect();
        RigFile { cameras }
    }

    pub fn to_rig(&self) -> std::result::Result<RigModel, String> {
        let mut cams = Vec::with_capacity(self.cameras.len());
        for c in &self.cameras {
            let m = Matrix4::from_row_slice(&c.extrinsic);
            if m.iter().any(|v| !v.is_finite()) {
                return Err(format!("camera {}: extrinsic has non-finite entries", c.id));
            }
            let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
            if last != [0.0, 0.0, 0.0, 1.0] {
                return Err(format!("camera {}: extrinsic last row must be 0 0 0 1", c.id));
            }
            let pose = SE3Pose::from_homogeneous(&m, ORTHONORMAL_TOL)
                .ok_or_else(|| format!("camera {}: extrinsic rotation is not orthonormal", c.id))?;
            let k = c.intrinsics;
            let k = Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height).map_err(|e| format!("camera {}: {e}", c.id))?;
            cams.push(RigCamera::new(c.id, pose, k));
        }
        RigModel::new(cams).map_err(|e| e.to_string())
    }
}

pub fn rig_to_json(rig: &RigModel) -> String {
    let mut s = serde_json::to_string_pretty(&RigFile::from_rig(rig)).expect("rig serializes");
    s.push('\n');
    s
}

pub fn parse_rig(text: &str) -> std::result::Result<RigModel, String> {
    let file: RigFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    file.to_rig()
}

pub fn read_rig(path: &Path) -> Result<RigModel> {
    parse_rig(&read_text(path)?).map_err(|m| input(path, m))
}

pub fn write_rig(path: &Path, rig: &RigModel) -> Result<()> {
    write_text(path, &rig_to_json(rig))
}

/// One line per frame: `timestamp tx ty tz qx qy qz qw`, with `w ≥ 0`.
pub fn trajectory_to_string(traj: &DeviceTrajectory) -> String {
    let mut s = String::new();
    for f in traj.baked().frames() {
        let t = f.pose.translation;
        let mut q = f.pose.rotation.to_quaternion();
        if q[3] < 0.0 {
            q.iter_mut().for_each(|v| *v = -*v);
        }
        writeln!(s, "{} {} {} {} {} {} {} {}", f.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]).unwrap();
    }
    s
}

/// Blank lines and lines starting with `#` are skipped.
pub fn parse_trajectory(text: &str) -> std::result::Result<DeviceTrajectory, String> {
    let mut frames = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", n + 1))?;
        if vals.len() != 8 {
            return Err(format!("line {}: expected 8 values, found {}", n + 1, vals.len()));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(format!("line {}: non-finite value", n + 1));
        }
        let q = [vals[4], vals[5], vals[6], vals[7]];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(format!("line {}: quaternion norm {norm} is not 1", n + 1));
        }
        let rotation = Rotation::from_quaternion(q).ok_or_else(|| format!("line {}: degenerate quaternion", n + 1))?;
        let pose = SE3Pose::new(rotation, Vector3::new(vals[1], vals[2], vals[3]));
        frames.push(Frame::new(vals[0], pose));
    }
    if frames.is_empty() {
        return Err("no frames".into());
    }
    DeviceTrajectory::new(frames).map_err(|e| e.to_string())
}

pub fn read_trajectory(path: &Path) -> Result<DeviceTrajectory> {
    parse_trajectory(&read_text(path)?).map_err(|m| input(path, m))
}

pub fn write_trajectory(path: &Path, traj: &DeviceTrajectory) -> Result<()> {
    write_text(path, &trajectory_to_string(traj))
}

pub fn matches_to_string(sets: &[MatchSet]) -> String {
    let mut s = MATCH_HEADER.join(",");
    s.push('\n');
    for m in sets {
        for (a, b) in m.pixels_i.iter().zip(&m.pixels_j) {
            writeln!(s, "{},{},{},{},{},{},{},{}", m.frame_i, m.camera_i, m.frame_j, m.camera_j, a.u, a.v, b.u, b.v).unwrap();
        }
    }
    s
}

#[derive(Debug, Deserialize)]
struct MatchRow {
    frame_i: usize,
    cam_i: CameraId,
    frame_j: usize,
    cam_j: CameraId,
    u_i: f64,
    v_i: f64,
    u_j: f64,
    v_j: f64,
}

/// Rows sharing `(frame_i, cam_i, frame_j, cam_j)` form one set; sets keep
/// the order in which their key first appears.
pub fn parse_matches(text: &str) -> std::result::Result<Vec<MatchSet>, String> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| e.to_string())?.iter().map(str::to_owned).collect();
    if header != MATCH_HEADER {
        return Err(format!("header must be `{}`", MATCH_HEADER.join(",")));
    }
    type Key = (usize, CameraId, usize, CameraId);
    let mut index: HashMap<Key, usize> = HashMap::new();
    let mut groups: Vec<(Key, Vec<PixelCoord>, Vec<PixelCoord>)> = Vec::new();
    for (n, row) in rdr.deserialize::<MatchRow>().enumerate() {
        let r = row.map_err(|e| format!("row {}: {e}", n + 1))?;
        let key = (r.frame_i, r.cam_i, r.frame_j, r.cam_j);
        let g = *index.entry(key).or_insert_with(|| {
            groups.push((key, Vec::new(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(PixelCoord::new(r.u_i, r.v_i));
        groups[g].2.push(PixelCoord::new(r.u_j, r.v_j));
    }
    groups
        .into_iter()
        .map(|((fi, ci, fj, cj), a, b)| MatchSet::new(fi, ci, fj, cj, a, b).map_err(|e| e.to_string()))
        .collect()
}

pub fn read_matches(path: &Path) -> Result<Vec<MatchSet>> {
    parse_matches(&read_text(path)?).map_err(|m| input(path, m))
}

pub fn write_matches(path: &Path, sets: &[MatchSet]) -> Result<()> {
    write_text(path, &matches_to_string(sets))
}

pub fn read_offset(path: &Path) -> Result<OffsetGrid> {
    let grid: OffsetGrid = serde_json::from_str(&read_text(path)?).map_err(|e| input(path, e.to_string()))?;
    grid.validate().map_err(|e| input(path, e.to_string()))?;
    Ok(grid)
}

pub fn write_offset(path: &Path, grid: &OffsetGrid) -> Result<()> {
    let mut s = serde_json::to_string_pretty(grid).expect("grid serializes");
    s.push('\n');
    write_text(path, &s)
}

/// Any PNG or PPM/PGM the `image` crate reads, converted to RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| input(path, e.to_string()))?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    RgbImage::new(w, h, data).map_err(|e| input(path, e.to_string()))
}

/// 8-bit RGB; the format follows the extension. Values are clamped to
/// `[0, 1]` before quantizing.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .flat_map(|px| px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches size");
    buf.save(path).map_err(|e| input(path, e.to_string()))
}
