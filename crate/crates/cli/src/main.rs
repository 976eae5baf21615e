use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use driftgmm::harness::{
    report_emit, run_prequential, sweep, write_rows_csv, write_table_csv, PruneMode, ReportFormat,
    RunConfig, SweepGrid, SweepStream,
};
use driftgmm::kd3::DetectorScope;
use driftgmm::streamgen::{generate, load_jsonl, save_jsonl, DriftStreamSpec, DriftType, Scenario};
use driftgmm::Error;

/// Drift-stream generation and prequential evaluation of adaptive mixture
/// classifiers.
#[derive(Debug, Parser)]
#[command(name = "driftgmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic drift stream as JSON lines.
    Gen(GenArgs),
    /// Run one prequential evaluation.
    Run(RunArgs),
    /// Run a hyperparameter grid over one or more streams.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// JSON stream spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "type")]
    drift_type: Option<DriftType>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output stream; the spec is written next to it as `<stem>.spec.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    no_prune: bool,
    /// One detector for all scenes instead of one per scene.
    #[arg(long)]
    shared_detector: bool,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau_merge: Option<f64>,
    #[arg(long)]
    tau_prune: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: PathBuf,
    /// Per-batch accuracy series.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PruneArg {
    Both,
    On,
    Off,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// JSON sweep config `{"base": RunConfig, "grid": SweepGrid}`; flags
    /// override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    streams: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    prune: Option<PruneArg>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Table with one column pair per scenario.
    #[arg(long)]
    out: PathBuf,
    /// One line per run.
    #[arg(long)]
    rows: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SweepFile {
    base: RunConfig,
    grid: Option<SweepGrid>,
}

/// Prefixes I/O errors with the path involved.
fn at_path<T>(path: &Path, r: Result<T, Error>) -> Result<T, Error> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = at_path(path, fs::read_to_string(path).map_err(Error::from))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_file(path: &Path, contents: String) -> Result<(), Error> {
    at_path(path, fs::write(path, contents).map_err(Error::from))
}

fn create(path: &Path) -> Result<fs::File, Error> {
    at_path(path, fs::File::create(path).map_err(Error::from))
}

fn spec_sidecar(stream: &Path) -> PathBuf {
    let stem = stream
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stream.with_file_name(format!("{stem}.spec.json"))
}

fn gen(args: GenArgs) -> Result<serde_json::Value, Error> {
    let mut spec: DriftStreamSpec = match &args.config {
        Some(p) => read_json(p)?,
        None => DriftStreamSpec::default(),
    };
    if let Some(v) = args.drift_type {
        spec.drift_type = v;
    }
    if let Some(v) = args.scenario {
        spec.scenario = v;
    }
    if let Some(v) = args.scenes {
        spec.n_scenes = v;
    }
    if let Some(v) = args.instances {
        spec.n_instances = v;
    }
    if let Some(v) = args.frames {
        spec.frames_per_instance = v;
    }
    if let Some(v) = args.dim {
        spec.dim = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let stream = generate(&spec)?;
    at_path(&args.out, save_jsonl(&stream.instances, &args.out))?;
    write_file(&spec_sidecar(&args.out), spec.to_json()? + "\n")?;
    if let Some(p) = &args.annotations {
        write_file(p, stream.annotations.to_json()? + "\n")?;
    }
    Ok(serde_json::json!({
        "instances": stream.instances.len(),
        "drifts": stream.annotations.drifts.len(),
        "out": args.out,
    }))
}

fn run(args: RunArgs) -> Result<serde_json::Value, Error> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.alpha {
        cfg.kd3.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.kd3.beta = v;
    }
    if let Some(v) = args.window {
        cfg.kd3.window = v;
    }
    if args.no_prune {
        cfg.adapt.pruning_enabled = false;
    }
    if args.shared_detector {
        cfg.kd3.scope = DetectorScope::Shared;
    }
    if let Some(v) = args.rho {
        cfg.adapt.rho = v;
    }
    if let Some(v) = args.tau_merge {
        cfg.adapt.tau_merge = v;
    }
    if let Some(v) = args.tau_prune {
        cfg.adapt.tau_prune = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let instances = at_path(&args.stream, load_jsonl(&args.stream))?;
    let report = run_prequential(&instances, &cfg)?;
    at_path(
        &args.report,
        report_emit(&report, ReportFormat::Json, &args.report),
    )?;
    if let Some(p) = &args.csv {
        at_path(p, report_emit(&report, ReportFormat::Csv, p))?;
    }
    Ok(serde_json::json!({
        "mean_accuracy": report.mean_accuracy,
        "adaptations": report.adaptations_total,
        "windows": report.window_accuracy.len(),
        "wall_time_secs": report.wall_time_secs,
    }))
}

fn sweep_cmd(args: SweepArgs) -> Result<serde_json::Value, Error> {
    let file: SweepFile = match &args.config {
        Some(p) => read_json(p)?,
        None => SweepFile::default(),
    };
    let defaults = RunConfig::default();
    let mut grid = file.grid.unwrap_or(SweepGrid {
        alphas: vec![defaults.kd3.alpha],
        betas: vec![defaults.kd3.beta],
        windows: vec![defaults.kd3.window],
        prune: PruneMode::On,
        seeds: vec![defaults.seed],
    });
    if let Some(v) = args.alphas {
        grid.alphas = v;
    }
    if let Some(v) = args.betas {
        grid.betas = v;
    }
    if let Some(v) = args.windows {
        grid.windows = v;
    }
    if let Some(v) = args.prune {
        grid.prune = match v {
            PruneArg::Both => PruneMode::Both,
            PruneArg::On => PruneMode::On,
            PruneArg::Off => PruneMode::Off,
        };
    }
    if let Some(v) = args.seeds {
        grid.seeds = v;
    }
    let mut streams = Vec::with_capacity(args.streams.len());
    for path in &args.streams {
        let sidecar = spec_sidecar(path);
        let spec: Option<DriftStreamSpec> = if sidecar.exists() {
            Some(read_json(&sidecar)?)
        } else {
            None
        };
        streams.push(SweepStream {
            name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            drift_type: spec.as_ref().map(|s| s.drift_type),
            scenario: spec.as_ref().map(|s| s.scenario),
            instances: at_path(path, load_jsonl(path))?,
        });
    }
    let rows = sweep(&streams, &grid, &file.base)?;
    write_table_csv(&rows, create(&args.out)?)?;
    if let Some(p) = &args.rows {
        write_rows_csv(&rows, create(p)?)?;
    }
    let failed: Vec<serde_json::Value> = rows
        .iter()
        .filter_map(|r| {
            r.outcome.as_ref().err().map(|e| {
                serde_json::json!({"stream": r.key.stream, "alpha": r.key.alpha, "beta": r.key.beta,
                    "window": r.key.window, "pruning": r.key.pruning, "seed": r.key.base_seed, "error": e})
            })
        })
        .collect();
    Ok(serde_json::json!({ "rows": rows.len(), "failed": failed }))
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(summary) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
