//! Pipeline runner and metrics.
//!
//! A trial replays one scenario as a stream of events (metadata, UGV cloud
//! increments, UAV and UGV packets). Every UGV packet triggers a
//! localization cycle: ray-cast its keypoints into the voxel map, slide the
//! UGV window, retrieve and verify air-ground pairs, then estimate
//! `T_{W_A W_G}` with the residual set selected by [`Mode`].

mod pipeline;
mod report;

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{Aggregate, CycleRecord, Estimate, MetricsReport, StageTimings, TrialReport, REPORT_SCHEMA_VERSION};

use crate::association::PairFilterConfig;
use crate::optimizer::{OptimError, SolverConfig};
use crate::place_index::HnswParams;
use crate::protocol::{bandwidth, FramePacket, LogReader, LogRecord, ProtocolError, Source};
use crate::simkit::{self, ScenarioMeta, SimConfig, SimError};
use crate::voxel_map::{decode_cloud, RayCastConfig, DEFAULT_VOXEL_SIZE};

use pipeline::Trial;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which residuals the estimator uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Median of the per-pair anchors; no iterative refinement.
    RegOnly,
    /// Regularizer plus air-ground reprojection, landmarks straight from the map.
    RegStage2,
    /// Window bundle adjustment first, then the air-ground stage.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::RegOnly, Mode::RegStage2, Mode::Full];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Input {
    /// Generate each trial's scenario in memory.
    Scenario(SimConfig),
    /// Replay recorded `AGLP` logs.
    Logs { uav: PathBuf, ugv: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Input,
    pub mode: Mode,
    pub trials: usize,
    /// Trial `i` uses scenario seed `base_seed + i`.
    pub base_seed: u64,
    /// Keypoints used per packet.
    pub keypoint_budget: usize,
    /// UGV keyframes kept in the sliding window.
    pub window: usize,
    pub voxel_size: f64,
    pub huber_delta: f64,
    /// Track members farther than this from the anchor's map point, once
    /// reprojected, are dropped before stage 1.
    pub track_gate_px: f64,
    pub success_threshold: f64,
    /// Packet rate used for the bandwidth line of the report.
    pub frames_per_second: f64,
    /// Run trials on separate threads.
    pub parallel: bool,
    /// Keep solver iteration traces in the report.
    pub trace: bool,
    pub raycast: RayCastConfig,
    pub pair_filter: PairFilterConfig,
    pub solver: SolverConfig,
    pub hnsw: HnswParams,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: Input::Scenario(SimConfig::default()),
            mode: Mode::Full,
            trials: 1,
            base_seed: 0,
            keypoint_budget: 256,
            window: 6,
            voxel_size: DEFAULT_VOXEL_SIZE,
            huber_delta: 2.0,
            track_gate_px: 10.0,
            success_threshold: 0.5,
            frames_per_second: 1.0,
            parallel: true,
            trace: false,
            raycast: RayCastConfig::default(),
            pair_filter: PairFilterConfig::default(),
            solver: SolverConfig::default(),
            hnsw: HnswParams::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(4..=4096).contains(&self.keypoint_budget) {
            return bad(format!("keypoint budget {} outside [4, 4096]", self.keypoint_budget));
        }
        if self.trials == 0 {
            return bad("trials must be > 0".into());
        }
        if self.window < 2 {
            return bad("window must hold at least two frames".into());
        }
        let positive = [
            self.voxel_size,
            self.huber_delta,
            self.track_gate_px,
            self.success_threshold,
            self.frames_per_second,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("voxel size, Huber threshold, track gate, success threshold and fps must be positive".into());
        }
        self.raycast.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.pair_filter.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.solver.validate()?;
        self.hnsw.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        match &self.input {
            Input::Scenario(s) => s.validate()?,
            Input::Logs { uav, ugv } => {
                for p in [uav, ugv] {
                    if !p.exists() {
                        return bad(format!("log {} does not exist", p.display()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Scenario config of trial `i`.
    pub fn trial_scenario(&self, i: usize) -> Option<SimConfig> {
        match &self.input {
            Input::Scenario(s) => Some(SimConfig {
                seed: self.base_seed.wrapping_add(i as u64),
                keypoint_budget: self.keypoint_budget,
                ..s.clone()
            }),
            Input::Logs { .. } => None,
        }
    }
}

/// Decoded log record.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Meta(ScenarioMeta),
    Cloud(Vec<Vector3<f64>>),
    Aerial(FramePacket),
    Ground(FramePacket),
}

fn decode(r: &LogRecord) -> Result<Event, HarnessError> {
    Ok(match r.source {
        Source::Meta => Event::Meta(serde_json::from_slice(&r.payload).map_err(|e| HarnessError::Input(e.to_string()))?),
        Source::Cloud => Event::Cloud(decode_cloud(&r.payload).map_err(|e| HarnessError::Input(e.to_string()))?),
        Source::Aerial => Event::Aerial(FramePacket::decode(&r.payload)?),
        Source::Ground => Event::Ground(FramePacket::decode(&r.payload)?),
    })
}

/// Merges the two agents' logs into processing order: the UGV log drives,
/// and every UAV packet stamped no later than a UGV packet is delivered
/// before it.
pub fn merge_logs(uav: &[LogRecord], ugv: &[LogRecord]) -> Result<Vec<Event>, HarnessError> {
    let mut aerial = uav.iter().map(decode).peekable();
    let mut out = Vec::with_capacity(uav.len() + ugv.len());
    for r in ugv {
        let e = decode(r)?;
        if let Event::Ground(p) = &e {
            while let Some(next) = aerial.peek() {
                match next {
                    Ok(Event::Aerial(a)) if a.timestamp_ns > p.timestamp_ns => break,
                    Ok(Event::Aerial(_)) => out.push(aerial.next().unwrap()?),
                    Ok(_) => return Err(HarnessError::Input("UAV log holds a non-aerial record".into())),
                    Err(_) => return Err(aerial.next().unwrap().unwrap_err()),
                }
            }
        }
        out.push(e);
    }
    for e in aerial {
        out.push(e?);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, HarnessError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(LogReader::new(f)?.read_all()?)
}

/// Writes a scenario as `uav.aglp` and `ugv.aglp` under `dir`.
pub fn export_scenario(cfg: &SimConfig, dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    let s = simkit::generate(cfg)?;
    let logs = simkit::scenario_logs(&s)?;
    std::fs::create_dir_all(dir)?;
    let uav = dir.join("uav.aglp");
    let ugv = dir.join("ugv.aglp");
    for (path, records) in [(&uav, &logs.uav), (&ugv, &logs.ugv)] {
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        simkit::write_log(records, w)?.into_inner().map_err(|e| e.into_error())?;
    }
    Ok((uav, ugv))
}

/// Event stream of trial `i`.
pub fn trial_events(cfg: &RunConfig, i: usize) -> Result<Vec<Event>, HarnessError> {
    match &cfg.input {
        Input::Scenario(_) => {
            let s = simkit::generate(&cfg.trial_scenario(i).expect("scenario input"))?;
            let logs = simkit::scenario_logs(&s)?;
            merge_logs(&logs.uav, &logs.ugv)
        }
        Input::Logs { uav, ugv } => merge_logs(&read_log(uav)?, &read_log(ugv)?),
    }
}

/// Runs one trial over an event stream. Errors inside a cycle are recorded
/// on that cycle; only malformed input aborts the trial.
pub fn run_events(cfg: &RunConfig, mode: Mode, trial: usize, seed: u64, events: &[Event]) -> TrialReport {
    let mut t = match Trial::new(cfg, mode) {
        Ok(t) => t,
        Err(e) => return failed_trial(trial, seed, e),
    };
    let mut error = None;
    for e in events {
        if let Err(err) = t.handle(e) {
            error = Some(err.to_string());
            break;
        }
    }
    let truth = t.truth();
    let final_estimate = t.cycles.last().and_then(|c| c.estimate.map(|_| ())).and(t.last_estimate);
    let te = final_estimate.zip(truth).map(|(e, g)| e.translation_error(&g));
    let ye = final_estimate.zip(truth).map(|(e, g)| e.yaw_error(&g).abs().to_degrees());
    TrialReport {
        trial,
        seed,
        estimate: final_estimate.as_ref().map(Estimate::from),
        translation_error_m: te,
        yaw_error_deg: ye,
        success: error.is_none() && t.cycles.last().is_some_and(|c| c.success),
        timing: report::mean_timing(t.cycles.iter().map(|c| &c.timing)),
        cycles: std::mem::take(&mut t.cycles),
        error,
        trace: std::mem::take(&mut t.trace),
    }
}

fn failed_trial(trial: usize, seed: u64, e: HarnessError) -> TrialReport {
    TrialReport {
        trial,
        seed,
        estimate: None,
        translation_error_m: None,
        yaw_error_deg: None,
        success: false,
        timing: StageTimings::default(),
        cycles: Vec::new(),
        error: Some(e.to_string()),
        trace: Vec::new(),
    }
}

fn run_trial(cfg: &RunConfig, mode: Mode, i: usize) -> TrialReport {
    let seed = cfg.trial_scenario(i).map_or(cfg.base_seed, |s| s.seed);
    match trial_events(cfg, i) {
        Ok(events) => run_events(cfg, mode, i, seed, &events),
        Err(e) => failed_trial(i, seed, e),
    }
}

pub fn assemble_report(cfg: &RunConfig, mode: Mode, trials: Vec<TrialReport>) -> MetricsReport {
    MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        success_threshold_m: cfg.success_threshold,
        aggregate: Aggregate::from_trials(&trials),
        trials,
        bandwidth: bandwidth(cfg.keypoint_budget as u32, cfg.frames_per_second),
    }
}

/// Runs every trial with the residual set of `mode`.
pub fn ablate(cfg: &RunConfig, mode: Mode) -> Result<MetricsReport, HarnessError> {
    cfg.validate()?;
    let trials: Vec<TrialReport> = if cfg.parallel && cfg.trials > 1 {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.trials);
        let mut slots: Vec<Option<TrialReport>> = vec![None; cfg.trials];
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        (w..cfg.trials)
                            .step_by(workers)
                            .map(|i| (i, run_trial(cfg, mode, i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("trial thread panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every trial ran")).collect()
    } else {
        (0..cfg.trials).map(|i| run_trial(cfg, mode, i)).collect()
    };
    let report = assemble_report(cfg, mode, trials);
    if let Some(dir) = &cfg.output_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Runs the configured mode.
pub fn run_pipeline(cfg: &RunConfig) -> Result<MetricsReport, HarnessError> {
    ablate(cfg, cfg.mode)
}

/// Writes `report-<mode>.json`, `cycles-<mode>.jsonl` and `summary-<mode>.txt`
/// (plus `trace-<mode>.jsonl` when traces were kept) under `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let stem = match report.mode {
        Mode::RegOnly => "reg-only",
        Mode::RegStage2 => "reg-stage2",
        Mode::Full => "full",
    };
    std::fs::write(dir.join(format!("report-{stem}.json")), report.to_json())?;
    std::fs::write(dir.join(format!("cycles-{stem}.jsonl")), report.cycle_lines())?;
    std::fs::write(dir.join(format!("summary-{stem}.txt")), report.summary_table())?;
    let trace: String = report
        .trials
        .iter()
        .flat_map(|t| t.trace.iter().map(|r| r.to_line() + "\n"))
        .collect();
    if !trace.is_empty() {
        std::fs::write(dir.join(format!("trace-{stem}.jsonl")), trace)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{NoiseModel, Preset};

    fn covisible(trials: usize) -> RunConfig {
        RunConfig {
            trials,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("mode = \"reg-only\"\ntrials = 3\n[solver]\nw_reg = 5.0\n").unwrap();
        assert_eq!(partial.mode, Mode::RegOnly);
        assert_eq!(partial.solver.w_reg, 5.0);
        assert_eq!(partial.solver.max_iterations, SolverConfig::default().max_iterations);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            RunConfig { keypoint_budget: 3, ..RunConfig::default() },
            RunConfig { keypoint_budget: 5000, ..RunConfig::default() },
            RunConfig { trials: 0, ..RunConfig::default() },
            RunConfig {
                input: Input::Logs { uav: "/nonexistent/a".into(), ugv: "/nonexistent/b".into() },
                ..RunConfig::default()
            },
        ] {
            assert!(matches!(ablate(&c, Mode::Full), Err(HarnessError::Config(_))));
        }
    }

    #[test]
    fn noiseless_full_mode_recovers_truth() {
        let r = run_pipeline(&covisible(2)).unwrap();
        assert_eq!(r.aggregate.successes, 2, "{}", r.summary_table());
        for t in &r.trials {
            assert!(t.translation_error_m.unwrap() < 1e-6, "{}", r.summary_table());
            assert!(t.yaw_error_deg.unwrap().to_radians() < 1e-6);
        }
    }

    #[test]
    fn identical_config_gives_identical_report() {
        let mut c = covisible(2);
        if let Input::Scenario(s) = &mut c.input {
            s.noise = NoiseModel::benchmark();
        }
        let a = run_pipeline(&c).unwrap().without_timings();
        let b = run_pipeline(&RunConfig { parallel: false, ..c }).unwrap().without_timings();
        assert_eq!(a, b);
    }

    #[test]
    fn merge_delivers_aerial_packets_first() {
        let s = simkit::generate(&SimConfig { preset: Preset::Covisible, frames: 3, ..SimConfig::default() }).unwrap();
        let logs = simkit::scenario_logs(&s).unwrap();
        let events = merge_logs(&logs.uav, &logs.ugv).unwrap();
        let kinds: Vec<char> = events
            .iter()
            .map(|e| match e {
                Event::Meta(_) => 'M',
                Event::Cloud(_) => 'C',
                Event::Aerial(_) => 'A',
                Event::Ground(_) => 'G',
            })
            .collect();
        assert_eq!(kinds.iter().collect::<String>(), "MCAGCAGCAG");
    }
}
