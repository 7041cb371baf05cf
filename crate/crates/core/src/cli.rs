//! Command-line front end: `run`, `generate`, `eval` and `sweep`.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags or config,
//! missing inputs), 1 for failures while processing.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, worlds, EvalError, SweepMode};
use crate::ingest::{self, GroundTruth, IngestError, StreamReader, SyntheticWorldConfig};
use crate::pipeline::{self, parse_seconds, Detector, PipelineConfig, PipelineError};
use crate::store::StoreOptions;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const LTM_FILE: &str = "ltm.db";
pub const PR_FILE: &str = "pr.csv";
pub const TIMING_FILE: &str = "timing.txt";
pub const STREAM_FILE: &str = "stream.lgds";
pub const GT_FILE: &str = "stream.gt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Usage(format!("invalid configuration: {m}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p.into(),
            EvalError::Threshold(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

/// Everything needed to repeat a run. Written before processing starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub input: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub clock: String,
    pub t_time: String,
    /// Full configuration in the `key = value` form.
    pub config: String,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("malformed manifest {}: {e}", path.display())))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        Ok(PipelineConfig::parse(&self.config)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "loopgraph", version, about = "Appearance-based loop closure detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Process a descriptor stream and write the run artifacts.
    Run(RunArgs),
    /// Write a synthetic descriptor stream and its ground truth.
    Generate(GenerateArgs),
    /// Score a finished run against ground truth.
    Eval(EvalArgs),
    /// Precision/recall over a range of loop thresholds.
    Sweep(SweepArgs),
}

/// Detector settings. Flags override keys of the config file.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Detector config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iteration time budget in seconds, or "inf".
    #[arg(long)]
    ttime: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// "wall" or "virtual".
    #[arg(long)]
    clock: Option<String>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::Usage(format!("config file not found: {}", p.display())));
                }
                PipelineConfig::load(p)?
            }
            None => PipelineConfig::default(),
        };
        let set = |cfg: &mut PipelineConfig, k: &str, v: &str| {
            cfg.set(k, v)
                .map_err(|m| CliError::Usage(format!("invalid configuration: {m}")))
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
            set(&mut cfg, k.trim(), v.trim())?;
        }
        if let Some(t) = &self.ttime {
            cfg.t_time = parse_seconds(t).map_err(|m| CliError::Usage(format!("--ttime: {m}")))?;
        }
        if let Some(seed) = self.seed {
            set(&mut cfg, "seed", &seed.to_string())?;
        }
        if let Some(c) = &self.clock {
            set(&mut cfg, "clock", c)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Descriptor stream (.lgds).
    #[arg(long)]
    input: PathBuf,
    /// Ground truth; when given the run is scored at the end.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Synthetic world config file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in world: benchmark, timing or retrieval.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for stream.lgds and stream.gt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory written by `run`.
    #[arg(long)]
    run: PathBuf,
    /// Ground truth; defaults to the one recorded in the run manifest.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Where to write pr.csv and timing.txt; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an SVG plot of the iteration times.
    #[arg(long)]
    plots: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma separated thresholds; "a,b,...,z" expands an arithmetic range.
    #[arg(long, default_value = worlds::BENCHMARK_THRESHOLDS)]
    thresholds: String,
    /// "replay" (one run, thresholds applied afterwards) or "rerun".
    #[arg(long, default_value = "replay")]
    mode: String,
    /// Also write an SVG precision/recall plot.
    #[arg(long)]
    plots: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_gt(path: &Path) -> Result<GroundTruth, CliError> {
    require_file(path, "ground truth file")?;
    GroundTruth::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| runtime(&format!("cannot create {}", path.display()), e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(&format!("cannot write {}", path.display()), e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(&format!("cannot write {}", path.display()), e))
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    require_file(&args.input, "input file")?;
    let gt = args.gt.as_deref().map(load_gt).transpose()?;
    let reader = StreamReader::open(&args.input)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.input.display())))?;
    create_dir(&args.out)?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        input: args.input.clone(),
        ground_truth: args.gt.clone(),
        output: args.out.clone(),
        seed: cfg.seed,
        clock: cfg.clock.to_string(),
        t_time: if cfg.t_time.is_finite() { cfg.t_time.to_string() } else { "inf".into() },
        config: cfg.to_text(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| runtime("manifest", e))?;
    write_file(&args.out.join(MANIFEST_FILE), json + "\n")?;

    let db = args.out.join(LTM_FILE);
    if db.exists() {
        fs::remove_file(&db).map_err(|e| runtime(&format!("cannot replace {}", db.display()), e))?;
    }
    let mut detector = Detector::with_store_path(cfg, &db, StoreOptions::default())?;
    let mut reports = Vec::new();
    for set in reader {
        let set = set.map_err(|e| runtime(&args.input.display().to_string(), e))?;
        reports.push(detector.process(&set)?);
    }
    detector.finish()?;

    let dets = pipeline::detections(&reports);
    let csv = args.out.join(ITERATIONS_FILE);
    pipeline::write_iterations_csv(create_file(&csv)?, &reports).map_err(|e| runtime("iterations", e))?;
    let log = args.out.join(DETECTIONS_FILE);
    pipeline::write_detection_log(create_file(&log)?, &dets).map_err(|e| runtime("detections", e))?;

    println!("processed {} images, {} loop closures", reports.len(), dets.len());
    if let Ok(t) = eval::timing_summary(&reports) {
        println!("{t}");
    }
    if let Some(gt) = gt {
        println!("{}", eval::score(&dets, &gt));
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut world = match (&args.config, &args.preset) {
        (Some(p), _) => {
            require_file(p, "synthetic config")?;
            SyntheticWorldConfig::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        (None, Some(name)) => worlds::preset(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown preset {name:?} (expected one of {})",
                worlds::PRESETS.join(", ")
            ))
        })?,
        (None, None) => return Err(CliError::Usage("--config or --preset is required".into())),
    };
    if let Some(seed) = args.seed {
        world.seed = seed;
    }
    world
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (stream, gt) = ingest::generate_synthetic(&world).map_err(|e| match e {
        IngestError::Config(_) => CliError::Usage(e.to_string()),
        other => runtime("generate", other),
    })?;
    create_dir(&args.out)?;
    let lgds = args.out.join(STREAM_FILE);
    ingest::write_stream(&lgds, world.dim, &stream).map_err(|e| runtime(&lgds.display().to_string(), e))?;
    let gt_path = args.out.join(GT_FILE);
    gt.save(&gt_path).map_err(|e| runtime(&gt_path.display().to_string(), e))?;
    println!(
        "wrote {} images and {} ground-truth pairs to {}",
        stream.len(),
        gt.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let manifest_path = args.run.join(MANIFEST_FILE);
    require_file(&manifest_path, "run manifest")?;
    let manifest = RunManifest::load(&manifest_path)?;
    let gt_path = args
        .gt
        .clone()
        .or_else(|| manifest.ground_truth.clone())
        .ok_or_else(|| CliError::Usage("no ground truth: pass --gt".into()))?;
    let gt = load_gt(&gt_path)?;

    let log_path = args.run.join(DETECTIONS_FILE);
    require_file(&log_path, "detection log")?;
    let text = fs::read_to_string(&log_path).map_err(|e| runtime(&log_path.display().to_string(), e))?;
    let dets = pipeline::parse_detection_log(&text)
        .map_err(|m| CliError::Usage(format!("{}: {m}", log_path.display())))?;
    let csv_path = args.run.join(ITERATIONS_FILE);
    require_file(&csv_path, "iteration log")?;
    let text = fs::read_to_string(&csv_path).map_err(|e| runtime(&csv_path.display().to_string(), e))?;
    let rows = pipeline::parse_iterations_csv(&text)
        .map_err(|m| CliError::Usage(format!("{}: {m}", csv_path.display())))?;

    let point = eval::score(&dets, &gt);
    let elapsed: Vec<f64> = rows.iter().map(|r| r.elapsed).collect();
    let timing = eval::summarize_timing(
        &elapsed,
        rows.iter().map(|r| r.wm_size).max().unwrap_or(0),
        rows.iter().map(|r| r.dict_size).max().unwrap_or(0),
    )?;
    println!("{point}");
    println!("{timing}");

    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    create_dir(&out)?;
    eval::write_pr_csv(create_file(&out.join(PR_FILE))?, std::slice::from_ref(&point))
        .map_err(|e| runtime("pr.csv", e))?;
    write_file(&out.join(TIMING_FILE), format!("{timing}\n"))?;
    if args.plots {
        let budget = manifest.pipeline_config()?.t_time;
        let budget = budget.is_finite().then_some(budget);
        write_file(&out.join("timing.svg"), eval::timing_svg(&elapsed, budget))?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let thresholds = eval::parse_thresholds(&args.thresholds)
        .map_err(|m| CliError::Usage(format!("--thresholds: {m}")))?;
    let mode: SweepMode = args.mode.parse().map_err(CliError::Usage)?;
    require_file(&args.input, "input file")?;
    let gt = load_gt(&args.gt)?;
    let stream = ingest::load_stream(&args.input)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.input.display())))?;
    create_dir(&args.out)?;

    let points = eval::pr_sweep(&stream, &gt, &cfg, &thresholds, mode, &args.out)?;
    for p in &points {
        println!("{p}");
    }
    match eval::recall_at_full_precision(&points) {
        Some(best) => println!("best at full precision: {best}"),
        None => println!("no threshold reaches full precision"),
    }
    eval::write_pr_csv(create_file(&args.out.join(PR_FILE))?, &points).map_err(|e| runtime("pr.csv", e))?;
    if args.plots {
        write_file(&args.out.join("pr.svg"), eval::pr_curve_svg(&points))?;
    }
    Ok(())
}
