//! Command line front end. Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::report::{write_reports, PlanFile, Timing};
use super::{
    build_protocol, fit_baselines, fit_checkpoint_with_stats, inject_segment, run_experiment, training_profiles, Config,
    Mode,
};
use crate::encoding::{calibrate_stats, coactivation_gap, StatsTable};
use crate::error::{Error, Result};
use crate::faults::{inject_all, profile_channels};
use crate::model::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::model::Checkpoint;
use crate::runtime::{run_stream, verdicts_csv, Baselines};
use crate::sensor::{default_origin, parse_trace, serialize_trace, HomeSchema, Trace};
use crate::synth::{generate_synthetic_trace, GroundTruthActivityLog};

pub const TRACE_FILE: &str = "trace.log";
pub const SCHEMA_FILE: &str = "schema.json";
pub const ACTIVITY_FILE: &str = "activity.json";
pub const STATS_FILE: &str = "stats.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const BASELINES_FILE: &str = "baselines.json";
pub const VERDICTS_FILE: &str = "verdicts.csv";

#[derive(Debug, Parser)]
#[command(name = "sensewatch", version, about = "Sensor failure detection and localization for smart homes")]
struct Cli {
    /// JSON configuration with optional "model", "protocol", "synth" and "faults" sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the simulated home, training and fault plans.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TraceArgs {
    /// Event log.
    #[arg(long)]
    trace: PathBuf,
    /// Sensor schema JSON; inferred from the log when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a home and write its trace, schema and occupancy log.
    GenTrace,
    /// Fit per-sensor encoding statistics.
    Calibrate(TraceArgs),
    /// Train the encoder on a whole trace.
    Train {
        #[command(flatten)]
        input: TraceArgs,
        /// Encoding statistics; fitted on the trace when omitted.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Per-sensor thresholds from a clean trace.
    CalibrateThresholds {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Apply an injection plan to a trace.
    Inject {
        #[command(flatten)]
        input: TraceArgs,
        #[arg(long)]
        plan: PathBuf,
        /// Cut this protocol segment out of the trace and inject its faults.
        #[arg(long)]
        segment: Option<usize>,
    },
    /// Stream a trace through the detector.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baselines: PathBuf,
        /// Value of the segment_id column.
        #[arg(long, default_value = "stream")]
        label: String,
    },
    /// Full protocol: train, calibrate and score every segment copy.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Mode::Single)]
        mode: Mode,
        /// Event log to evaluate on; a home is simulated when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, requires = "trace")]
        schema: Option<PathBuf>,
    },
    /// Co-activation gap for window lengths 1..=max-len.
    CoactivationGap {
        #[arg(long, requires = "activity")]
        trace: Option<PathBuf>,
        /// Room layout written by gen-trace.
        #[arg(long, requires = "trace")]
        activity: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        max_len: usize,
    },
    /// Compare analytic and finite-difference gradients on random models.
    Gradcheck {
        #[arg(long, default_value_t = 25)]
        models: usize,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn load_trace(args: &TraceArgs) -> Result<(Trace, HomeSchema)> {
    let schema = args.schema.as_deref().map(|p| HomeSchema::from_json(&read(p)?)).transpose()?;
    parse_trace(&read(&args.trace)?, schema.as_ref())
}

fn load_trace_for(path: &Path, schema: &HomeSchema) -> Result<Trace> {
    Ok(parse_trace(&read(path)?, Some(schema))?.0)
}

fn execute(cli: Cli) -> Result<i32> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match cli.command {
        Command::GenTrace => {
            let (trace, schema, activity) = generate_synthetic_trace(&config.synth)?;
            write(&out.join(TRACE_FILE), &serialize_trace(&trace, &schema, default_origin()))?;
            write(&out.join(SCHEMA_FILE), &schema.to_json()?)?;
            write_json(&out.join(ACTIVITY_FILE), &activity)?;
            println!("{} events over {} h", trace.events.len(), trace.duration / 3600.0);
        }
        Command::Calibrate(args) => {
            let (trace, schema) = load_trace(&args)?;
            write_json(&out.join(STATS_FILE), &calibrate_stats(&trace, &schema)?)?;
            write(&out.join(SCHEMA_FILE), &schema.to_json()?)?;
        }
        Command::Train { input, stats } => {
            let (trace, schema) = load_trace(&input)?;
            let stats: StatsTable = match stats {
                Some(p) => serde_json::from_str(&read(&p)?)?,
                None => calibrate_stats(&trace, &schema)?,
            };
            let (checkpoint, curve) = fit_checkpoint_with_stats(&trace, &schema, stats, &config.model)?;
            checkpoint.save(&out.join(CHECKPOINT_FILE))?;
            write_json(&out.join("loss.json"), &curve)?;
            println!("final epoch loss {:.6}", curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::CalibrateThresholds { trace, checkpoint } => {
            let checkpoint = Checkpoint::load(&checkpoint)?;
            let trace = load_trace_for(&trace, &checkpoint.schema)?;
            fit_baselines(&checkpoint, &trace)?.save(&out.join(BASELINES_FILE))?;
        }
        Command::Inject { input, plan, segment } => {
            let (trace, schema) = load_trace(&input)?;
            let plan_file = PlanFile::load(&plan)?;
            let injected = match segment {
                Some(i) => {
                    let protocol = build_protocol(trace.duration, &config.protocol)?;
                    let profiles = training_profiles(&trace, &schema, &protocol)?;
                    inject_segment(&trace, &schema, &protocol, i, &plan_file.faults, &profiles, &config.faults)?.0
                }
                None => {
                    let profiles = profile_channels(&trace, &schema)?;
                    inject_all(&trace, &schema, &plan_file.faults, &profiles, &config.faults)?.0
                }
            };
            write(&out.join(TRACE_FILE), &serialize_trace(&injected, &schema, default_origin()))?;
        }
        Command::Run {
            trace,
            checkpoint,
            baselines,
            label,
        } => {
            let checkpoint = Checkpoint::load(&checkpoint)?;
            let baselines = Baselines::load(&baselines)?;
            let trace = load_trace_for(&trace, &checkpoint.schema)?;
            let log = run_stream(&checkpoint, &baselines, &trace)?;
            write(&out.join(VERDICTS_FILE), &verdicts_csv([(label.as_str(), &log)]))?;
            println!("{} verdicts over {} intervals", log.verdicts.len(), log.num_intervals);
        }
        Command::Evaluate { mode, trace, schema } => {
            let (trace, schema) = match trace {
                Some(trace) => load_trace(&TraceArgs { trace, schema })?,
                None => {
                    let (trace, schema, _) = generate_synthetic_trace(&config.synth)?;
                    (trace, schema)
                }
            };
            let seed = config.model.seed;
            let (experiment, trained) = run_experiment(&trace, &schema, mode, seed, &config)?;
            trained.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
            trained.baselines.save(&out.join(BASELINES_FILE))?;
            write_reports(
                out,
                &experiment,
                Timing {
                    train_secs: trained.train_secs,
                    eval_secs: experiment.eval_secs,
                },
            )?;
            let m = &experiment.metrics;
            println!(
                "detection F1 {:.3}, localization F1 {:.3}, mean localization time {}",
                m.detection.f1,
                m.localization.f1,
                m.mean_localization_time_min.map_or("n/a".to_string(), |t| format!("{t:.2} min"))
            );
        }
        Command::CoactivationGap {
            trace,
            activity,
            max_len,
        } => {
            let (trace, activity) = match (trace, activity) {
                (Some(t), Some(a)) => {
                    let activity: GroundTruthActivityLog = serde_json::from_str(&read(&a)?)?;
                    (parse_trace(&read(&t)?, None)?.0, activity)
                }
                _ => {
                    let (trace, _, activity) = generate_synthetic_trace(&config.synth)?;
                    (trace, activity)
                }
            };
            let pairs = activity.sensor_pairs();
            let mut rows = Vec::with_capacity(max_len);
            for len in 1..=max_len {
                let gap = coactivation_gap(&trace, &pairs.correlated, &pairs.uncorrelated, len)?;
                println!("{len}\t{gap:.6}");
                rows.push(serde_json::json!({ "window_len": len, "gap": gap }));
            }
            write_json(&out.join("coactivation_gap.json"), &rows)?;
        }
        Command::Gradcheck { models } => {
            let cfg = GradcheckConfig {
                models,
                seed: cli.seed.unwrap_or(0),
                ..GradcheckConfig::default()
            };
            let report = run_gradcheck(&cfg)?;
            println!(
                "max relative error {:.3e} over {} models in {:.1} s",
                report.max_rel_error,
                report.models.len(),
                report.elapsed_secs
            );
            write_json(&out.join("gradcheck.json"), &report)?;
            return Ok(if report.passed { 0 } else { 2 });
        }
    }
    Ok(0)
}
