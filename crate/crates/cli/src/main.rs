use std::path::PathBuf;
use std::process::ExitCode;

use airground::harness::{export_scenario, Input};
use airground::place_index::measure_recall;
use airground::{ablate, bandwidth, Mode, NoiseModel, Preset, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "airground", version, about = "Air-ground relative localization toolkit")]
struct Cli {
    /// TOML run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for scenarios, trials and index construction.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scenario into `uav.aglp` and `ugv.aglp`.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Run the pipeline in one mode and print the summary.
    Run {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        run: RunArgs,
        /// Print the full report as JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run every mode (or the ones given) on identical trials.
    Ablate {
        #[arg(long, value_enum, value_delimiter = ',')]
        modes: Vec<ModeArg>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-second link load for a range of keypoint counts.
    Bandwidth {
        #[arg(long, default_value_t = 1.0)]
        fps: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [128u32, 256, 512, 1024])]
        n: Vec<u32>,
    },
    /// Recall and latency of the place index against exhaustive search.
    BenchIndex {
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long)]
        ef: Option<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Default)]
struct SceneArgs {
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    keypoints: Option<usize>,
    /// Replay a recorded UAV log; needs `--ugv` too.
    #[arg(long, requires = "ugv")]
    uav: Option<PathBuf>,
    #[arg(long, requires = "uav")]
    ugv: Option<PathBuf>,
    /// Directory for report, cycle and summary files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-cycle traces (needs `--out`).
    #[arg(long)]
    trace: bool,
    /// Run trials on one thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RegOnly,
    RegStage2,
    Full,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::RegOnly => Mode::RegOnly,
            ModeArg::RegStage2 => Mode::RegStage2,
            ModeArg::Full => Mode::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Covisible,
    DisjointStart,
    Plane,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Covisible => Preset::Covisible,
            PresetArg::DisjointStart => Preset::DisjointStart,
            PresetArg::Plane => Preset::Plane,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Zero,
    Benchmark,
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
        cfg.hnsw.seed = seed;
        if let Input::Scenario(s) = &mut cfg.input {
            s.seed = seed;
        }
    }
    Ok(cfg)
}

fn apply_scene(cfg: &mut RunConfig, a: &SceneArgs) -> Result<()> {
    let Input::Scenario(s) = &mut cfg.input else {
        if a.preset.is_some() || a.frames.is_some() || a.noise.is_some() {
            return Err("scenario flags conflict with log input".into());
        }
        return Ok(());
    };
    if let Some(p) = a.preset {
        s.preset = p.into();
    }
    if let Some(f) = a.frames {
        s.frames = f;
    }
    match a.noise {
        Some(NoiseArg::Zero) => s.noise = NoiseModel::zero(),
        Some(NoiseArg::Benchmark) => s.noise = NoiseModel::benchmark(),
        None => {}
    }
    Ok(())
}

fn apply_run(cfg: &mut RunConfig, a: &RunArgs) -> Result<()> {
    if let (Some(uav), Some(ugv)) = (&a.uav, &a.ugv) {
        cfg.input = Input::Logs { uav: uav.clone(), ugv: ugv.clone() };
    }
    apply_scene(cfg, &a.scene)?;
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(k) = a.keypoints {
        cfg.keypoint_budget = k;
        if let Input::Scenario(s) = &mut cfg.input {
            s.keypoint_budget = k;
        }
    }
    if a.out.is_some() {
        cfg.output_dir = a.out.clone();
    }
    cfg.trace |= a.trace;
    cfg.parallel &= !a.serial;
    Ok(())
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load(&cli)?;
    match &cli.command {
        Command::Generate { out, scene } => {
            apply_scene(&mut cfg, scene)?;
            let Input::Scenario(sim) = &cfg.input else {
                return Err("generate needs a scenario input".into());
            };
            let (uav, ugv) = export_scenario(sim, out)?;
            println!("{}\n{}", uav.display(), ugv.display());
        }
        Command::Run { mode, run, json } => {
            apply_run(&mut cfg, run)?;
            if let Some(m) = mode {
                cfg.mode = (*m).into();
            }
            let report = ablate(&cfg, cfg.mode)?;
            if *json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.summary_table());
            }
        }
        Command::Ablate { modes, run } => {
            apply_run(&mut cfg, run)?;
            let modes: Vec<Mode> =
                if modes.is_empty() { Mode::ALL.to_vec() } else { modes.iter().map(|&m| m.into()).collect() };
            println!("{:<12} {:>9} {:>12} {:>10} {:>10} {:>10}", "mode", "success", "trans (m)", "yaw (deg)", "opt (ms)", "cycle (ms)");
            for mode in modes {
                let r = ablate(&cfg, mode)?;
                let a = &r.aggregate;
                let name = serde_json::to_value(mode)?.as_str().unwrap_or_default().to_owned();
                println!(
                    "{:<12} {:>9} {:>12} {:>10} {:>10.3} {:>10.3}",
                    name,
                    a.success_rate,
                    opt(a.mean_translation_error_m, 4),
                    opt(a.mean_yaw_error_deg, 3),
                    a.mean_cycle_timing.optimization_ms,
                    a.mean_cycle_timing.total_ms(),
                );
            }
        }
        Command::Bandwidth { fps, n } => {
            if !(*fps > 0.0) {
                return Err("--fps must be positive".into());
            }
            println!("{:>6} {:>10} {:>10} {:>8}", "n", "payload", "framed", "Mbps");
            for &n in n {
                let b = bandwidth(n, *fps);
                println!("{:>6} {:>10} {:>10} {:>8.2}", b.n, b.payload_bytes, b.framed_bytes, b.mbps);
            }
        }
        Command::BenchIndex { size, queries, ef, json } => {
            let mut params = cfg.hnsw;
            if let Some(ef) = ef {
                params.ef_search = *ef;
            }
            let r = measure_recall(*size, *queries, params, params.seed)?;
            if *json {
                println!("{}", serde_json::to_string(&r)?);
            } else {
                println!("size {}  queries {}  ef_search {}", r.size, r.queries, r.ef_search);
                println!("recall@1 {:.3}", r.recall_at_1);
                println!("build {:.1} ms", r.build_ms);
                println!("query {:.1} us (hnsw) vs {:.1} us (brute force)", r.hnsw_mean_us, r.brute_mean_us);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
