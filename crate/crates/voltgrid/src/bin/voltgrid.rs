//! Command-line front end: identify models, execute scenario files, batch
//! whole directories and summarize finished runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use voltgrid::grid::{NetworkModel, OperatingPoint, PerUnitNetwork};
use voltgrid::plant::PlantConfig;
use voltgrid::scenario::{self, ModelSource, RunResult, ScenarioError, ScenarioSpec};
use voltgrid::sysid::{self, Amplitudes, GridExperiment};
use voltgrid::{CONTROLLED_NODES, DISTURBANCE_GENERATORS};

#[derive(Parser)]
#[command(
    name = "voltgrid",
    about = "Voltage-control workbench for radial MV feeders with dispersed generation",
    version
)]
struct Cli {
    /// Network file; the bundled two-feeder benchmark when omitted.
    #[arg(long, global = true)]
    network: Option<PathBuf>,
    /// Seed for randomized utilities. Every bundled subcommand is
    /// deterministic, so this is accepted for fuzz harnesses only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pulse experiments at one operating point and cache the model.
    Identify(IdentifyArgs),
    /// Execute one scenario file and write its trace, summary and plot script.
    Run(RunArgs),
    /// Execute every scenario file in a directory.
    Batch(BatchArgs),
    /// Summarize finished runs from their summary files.
    Report(ReportArgs),
}

#[derive(Args)]
struct IdentifyArgs {
    /// Operating point label: 1am, 7am, 1pm or 7pm.
    #[arg(long)]
    op: String,
    /// Where to write the model file.
    #[arg(long)]
    out: PathBuf,
    /// Samples of impulse response to keep per channel.
    #[arg(long, default_value_t = sysid::DEFAULT_MODEL_MEMORY)]
    memory: usize,
    /// Control sample time, seconds.
    #[arg(long, default_value_t = 2.0)]
    t_sample: f64,
    /// AVR time constant, seconds.
    #[arg(long, default_value_t = 6.0)]
    tau: f64,
    /// Flow-solver convergence tolerance.
    #[arg(long, default_value_t = voltgrid::power_flow::TOLERANCE)]
    flow_tolerance: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file to execute.
    spec: PathBuf,
    /// Directory receiving <name>.csv, <name>.summary.txt and <name>.plot.py.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Use this cached model file instead of the spec's model source.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Override the spec's flow-solver tolerance.
    #[arg(long)]
    flow_tolerance: Option<f64>,
}

#[derive(Args)]
struct BatchArgs {
    /// Directory scanned for *.scn files.
    dir: PathBuf,
    /// Directory receiving the output files of every run.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Run the specs one after another instead of in parallel.
    #[arg(long)]
    serial: bool,
    /// Override every spec's flow-solver tolerance.
    #[arg(long)]
    flow_tolerance: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory scanned for *.summary.txt files.
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let net = load_network(cli.network.as_deref())?;
    match &cli.command {
        Command::Identify(args) => identify(&net, args),
        Command::Run(args) => run_one(&net, args),
        Command::Batch(args) => batch(&net, args),
        Command::Report(args) => report(args),
    }
}

fn load_network(path: Option<&Path>) -> Result<PerUnitNetwork, Box<dyn std::error::Error>> {
    let model = match path {
        Some(p) => NetworkModel::parse(&std::fs::read_to_string(p)?)?,
        None => NetworkModel::parse(voltgrid::BENCHMARK_NET)?,
    };
    Ok(model.to_per_unit()?)
}

fn parse_op(label: &str) -> Result<OperatingPoint, Box<dyn std::error::Error>> {
    OperatingPoint::from_label(label)
        .ok_or_else(|| format!("unknown operating point {label:?} (1am, 7am, 1pm, 7pm)").into())
}

fn identify(
    net: &PerUnitNetwork,
    args: &IdentifyArgs,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let config = PlantConfig {
        op: parse_op(&args.op)?,
        t_sample_s: args.t_sample,
        tau_avr_s: args.tau,
        flow_tolerance: args.flow_tolerance,
        ..PlantConfig::default()
    };
    let experiment = GridExperiment::new(net, config, &CONTROLLED_NODES, &DISTURBANCE_GENERATORS)?;
    let amplitudes = Amplitudes::uniform(net.gen_bus.len(), 2 * DISTURBANCE_GENERATORS.len());
    let model = sysid::identify(&experiment, &amplitudes, args.memory)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    model.save(&args.out)?;
    println!(
        "identified {} outputs x {} inputs x {} disturbances at {}, memory {} samples",
        model.ny(),
        model.nu(),
        model.nd(),
        model.operating_point,
        model.m
    );
    println!("exhaustion ratio {:.3e}", model.exhaustion_ratio());
    println!("saved {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_spec(
    path: &Path,
    model_override: Option<&Path>,
    flow_tolerance: Option<f64>,
) -> Result<ScenarioSpec, ScenarioError> {
    let mut spec = ScenarioSpec::load(path)?;
    if let Some(model) = model_override {
        spec.model = ModelSource::File(model.to_path_buf());
    }
    if let Some(tol) = flow_tolerance {
        spec.flow_tolerance = tol;
    }
    Ok(spec)
}

fn finish_run(result: &RunResult, out_dir: &Path) -> Result<bool, ScenarioError> {
    scenario::write_outputs(result, out_dir)?;
    let aborted = result.summary.aborted.is_some();
    println!("{}", one_line(result));
    Ok(aborted)
}

fn one_line(result: &RunResult) -> String {
    let s = &result.summary;
    let v_min = s.nodes.iter().map(|n| n.v_min).fold(f64::INFINITY, f64::min);
    let v_max = s.nodes.iter().map(|n| n.v_max).fold(f64::NEG_INFINITY, f64::max);
    let above: f64 = s.nodes.iter().map(|n| n.time_above_s).fold(0.0, f64::max);
    let below: f64 = s.nodes.iter().map(|n| n.time_below_s).fold(0.0, f64::max);
    let status = match &s.aborted {
        Some(reason) => format!("ABORTED: {reason}"),
        None => "ok".to_string(),
    };
    format!(
        "{}: {} steps, v [{v_min:.4}, {v_max:.4}], worst above/below band {above}/{below} s, \
         {} tap changes, max slacks ({:.2e}, {:.2e}), {status}",
        s.name, s.steps, s.tap_changes, s.max_slack_lower, s.max_slack_upper
    )
}

fn run_one(net: &PerUnitNetwork, args: &RunArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let spec = load_spec(&args.spec, args.model.as_deref(), args.flow_tolerance)?;
    let result = scenario::run_spec(net, &spec)?;
    let aborted = finish_run(&result, &args.out_dir)?;
    Ok(if aborted {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn batch(net: &PerUnitNetwork, args: &BatchArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut spec_paths: Vec<PathBuf> = std::fs::read_dir(&args.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    spec_paths.sort();
    if spec_paths.is_empty() {
        return Err(format!("no .scn files in {}", args.dir.display()).into());
    }
    let specs: Vec<ScenarioSpec> = spec_paths
        .iter()
        .map(|p| load_spec(p, None, args.flow_tolerance))
        .collect::<Result<_, _>>()?;
    let results = if args.serial {
        scenario::run_batch_serial(net, &specs)
    } else {
        scenario::run_batch(net, &specs)
    };
    let mut failed = false;
    for (path, result) in spec_paths.iter().zip(results) {
        match result {
            Ok(result) => failed |= finish_run(&result, &args.out_dir)?,
            Err(e) => {
                eprintln!("{}: error: {e}", path.display());
                failed = true;
            }
        }
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn report(args: &ReportArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".summary.txt"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("no .summary.txt files in {}", args.dir.display()).into());
    }
    println!(
        "{:<24} {:>6} {:>9} {:>9} {:>12} {:>6} {:>10}  status",
        "run", "steps", "v_min", "v_max", "above_band_s", "taps", "max_eps2"
    );
    let mut failed = false;
    for path in &paths {
        let text = std::fs::read_to_string(path)?;
        match summarize_file(&text) {
            Ok(line) => {
                failed |= line.aborted;
                println!(
                    "{:<24} {:>6} {:>9.4} {:>9.4} {:>12} {:>6} {:>10.2e}  {}",
                    line.name,
                    line.steps,
                    line.v_min,
                    line.v_max,
                    line.above_s,
                    line.taps,
                    line.max_eps2,
                    if line.aborted { "ABORTED" } else { "ok" }
                );
            }
            Err(e) => {
                eprintln!("{}: unreadable summary: {e}", path.display());
                failed = true;
            }
        }
    }
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

struct ReportLine {
    name: String,
    steps: String,
    v_min: f64,
    v_max: f64,
    above_s: f64,
    taps: String,
    max_eps2: f64,
    aborted: bool,
}

fn summarize_file(text: &str) -> Result<ReportLine, Box<dyn std::error::Error>> {
    let summary = scenario::parse_summary(text)?;
    Ok(ReportLine {
        name: summary.name.clone(),
        steps: summary.steps.to_string(),
        v_min: summary.nodes.iter().map(|n| n.v_min).fold(f64::INFINITY, f64::min),
        v_max: summary
            .nodes
            .iter()
            .map(|n| n.v_max)
            .fold(f64::NEG_INFINITY, f64::max),
        above_s: summary
            .nodes
            .iter()
            .map(|n| n.time_above_s)
            .fold(0.0, f64::max),
        taps: summary.tap_changes.to_string(),
        max_eps2: summary.max_slack_upper,
        aborted: summary.aborted.is_some(),
    })
}
