//! `report.json` schemas. Bump [`SCHEMA_VERSION`] on any field change.

use rigrefine_core::bench::PoseErrors;
use rigrefine_core::optimizer::HistoryEntry;
use rigrefine_core::ParamGroupId;
use serde::{Deserialize, Serialize};

use crate::config::TogglesSection;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean epipolar line distance, pixels.
    pub ep_e: f64,
    /// Mean line-intersection reprojection residual, pixels.
    pub rp_e: f64,
    pub matches: usize,
    /// Matches rejected by the triangulation gates.
    pub rejected: usize,
    /// Present when ground truth was supplied.
    pub pose: Option<PoseErrors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: ParamGroupId,
    /// Final largest `|δ|`; intrinsic groups as a fraction of the initial value.
    pub max_abs_delta: f64,
    /// Half-width of the box, same units.
    pub bound: f64,
    /// Largest `|δ| / bound` seen at any iteration.
    pub max_usage: f64,
    pub lr_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub toggles: TogglesSection,
    pub iterations: usize,
    /// Excluded from run-to-run comparisons.
    pub wall_time_s: f64,
    pub initial: Metrics,
    #[serde(rename = "final")]
    pub final_: Metrics,
    /// `initial.ep_e / final.ep_e`; null when either is zero.
    pub ep_e_reduction_factor: Option<f64>,
    /// `100·(1 − final.rp_e / initial.rp_e)`; null when the initial RP-e is zero.
    pub rp_e_reduction_percent: Option<f64>,
    pub groups: Vec<GroupReport>,
    pub clamp_events: usize,
    pub always_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub schema_version: u32,
    pub command: String,
    pub frames: usize,
    pub cameras: usize,
    pub pose: PoseErrors,
    /// Present when a match file was supplied.
    pub ep_e: Option<f64>,
    pub rp_e: Option<f64>,
    pub matches: Option<usize>,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub const HISTORY_HEADER: &str = "iteration,loss_total,loss_epipolar,loss_reproj,loss_barrier,ep_e,rp_e,temperature,lr_factor";

pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for h in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            h.iteration, h.loss.total, h.loss.epipolar, h.loss.reproj, h.loss.barrier, h.ep_e, h.rp_e, h.temperature, h.lr_factor
        ));
    }
    s
}
