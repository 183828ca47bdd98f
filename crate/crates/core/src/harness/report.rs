use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::geometry::RelPose4;
use crate::optimizer::TraceRecord;
use crate::protocol::BandwidthReport;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `T_{W_A W_G}` as reported: meters and degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw_deg: f64,
}

impl From<&RelPose4> for Estimate {
    fn from(p: &RelPose4) -> Self {
        Self {
            x: p.translation.x,
            y: p.translation.y,
            z: p.translation.z,
            yaw_deg: p.yaw().to_degrees(),
        }
    }
}

/// Wall-clock time per pipeline stage for one cycle, milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub association_ms: f64,
    pub optimization_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.preprocess_ms + self.association_ms + self.optimization_ms
    }

    fn add(&mut self, o: &StageTimings) {
        self.preprocess_ms += o.preprocess_ms;
        self.association_ms += o.association_ms;
        self.optimization_ms += o.optimization_ms;
    }

    fn scale(&mut self, f: f64) {
        self.preprocess_ms *= f;
        self.association_ms *= f;
        self.optimization_ms *= f;
    }
}

/// One localization cycle, triggered by a UGV keyframe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub ground_frame: u64,
    pub timestamp_ns: u64,
    /// Air-ground pairs that survived association.
    pub pairs: usize,
    pub estimate: Option<Estimate>,
    pub translation_error_m: Option<f64>,
    pub yaw_error_deg: Option<f64>,
    pub success: bool,
    /// Per-cycle wall time.
    pub timing: StageTimings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    /// Estimate after the final cycle.
    pub estimate: Option<Estimate>,
    pub translation_error_m: Option<f64>,
    pub yaw_error_deg: Option<f64>,
    pub success: bool,
    /// Mean per-cycle wall time.
    pub timing: StageTimings,
    pub cycles: Vec<CycleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub successes: usize,
    pub trials: usize,
    /// `successes/trials`.
    pub success_rate: String,
    /// Over trials that produced an estimate.
    pub mean_translation_error_m: Option<f64>,
    pub mean_yaw_error_deg: Option<f64>,
    /// Mean per-cycle wall time over all cycles of all trials.
    pub mean_cycle_timing: StageTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub success_threshold_m: f64,
    pub trials: Vec<TrialReport>,
    pub aggregate: Aggregate,
    pub bandwidth: BandwidthReport,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub(crate) fn mean_timing<'a>(records: impl Iterator<Item = &'a StageTimings>) -> StageTimings {
    let mut acc = StageTimings::default();
    let mut n = 0;
    for r in records {
        acc.add(r);
        n += 1;
    }
    if n > 0 {
        acc.scale(1.0 / n as f64);
    }
    acc
}

impl Aggregate {
    pub fn from_trials(trials: &[TrialReport]) -> Self {
        let successes = trials.iter().filter(|t| t.success).count();
        Self {
            successes,
            trials: trials.len(),
            success_rate: format!("{successes}/{}", trials.len()),
            mean_translation_error_m: mean(trials.iter().filter_map(|t| t.translation_error_m)),
            mean_yaw_error_deg: mean(trials.iter().filter_map(|t| t.yaw_error_deg)),
            mean_cycle_timing: mean_timing(trials.iter().flat_map(|t| t.cycles.iter().map(|c| &c.timing))),
        }
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// One JSON object per cycle, for line-oriented tools.
    pub fn cycle_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            for c in &t.cycles {
                let mut v = serde_json::to_value(c).expect("cycle serializes");
                v["trial"] = t.trial.into();
                out.push_str(&v.to_string());
                out.push('\n');
            }
        }
        out
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for t in &mut r.trials {
            t.timing = StageTimings::default();
            for c in &mut t.cycles {
                c.timing = StageTimings::default();
            }
        }
        r.aggregate.mean_cycle_timing = StageTimings::default();
        r
    }

    pub fn summary_table(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = String::new();
        let _ = writeln!(s, "mode: {:?}   success threshold: {} m", self.mode, self.success_threshold_m);
        let _ = writeln!(
            s,
            "{:>5} {:>10} {:>12} {:>10} {:>8} {:>16}",
            "trial", "seed", "trans [m]", "yaw [deg]", "success", "cycle time [ms]"
        );
        for t in &self.trials {
            let _ = writeln!(
                s,
                "{:>5} {:>10} {:>12} {:>10} {:>8} {:>16.3}",
                t.trial,
                t.seed,
                fmt(t.translation_error_m, 6),
                fmt(t.yaw_error_deg, 4),
                if t.success { "yes" } else { "no" },
                t.timing.total_ms()
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "SR {}   mean trans {} m   mean yaw {} deg",
            a.success_rate,
            fmt(a.mean_translation_error_m, 6),
            fmt(a.mean_yaw_error_deg, 4)
        );
        let _ = writeln!(
            s,
            "per-cycle time [ms]: preprocess {:.3}  association {:.3}  optimization {:.3}  total {:.3}",
            a.mean_cycle_timing.preprocess_ms,
            a.mean_cycle_timing.association_ms,
            a.mean_cycle_timing.optimization_ms,
            a.mean_cycle_timing.total_ms()
        );
        let b = &self.bandwidth;
        let _ = writeln!(
            s,
            "bandwidth: n = {} at {} fps -> {} bytes/frame, {:.2} Mbps",
            b.n, b.frames_per_second, b.payload_bytes, b.mbps
        );
        s
    }
}
