//! `partlab`: generate interference setups, run them, and report slowdowns.
//!
//! Exit codes: 0 on full success, 1 on partial failure (some setup did not
//! complete), 2 on usage or configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use partlab_core::config::{emit_platform, load_experiment, load_platform, load_sim_params, parse_platform};
use partlab_core::genspace::{self, MANIFEST_FILE, enumerate_setups, manifest_json, read_manifest};
use partlab_core::logmon::emit_stream;
use partlab_core::orchestrator::{
    self, Backend, OrchestratorError, ReplayBackend, SerialBackend, SimBackend, SweepOptions, load_records,
};
use partlab_core::report::{self, DEFAULT_EPSILON, Format, build_report, diminishing_returns, plot_series};
use partlab_core::sim::{SimError, simulate};
use partlab_core::{BackendKind, Setup, SimParams};

const PLATFORM_FILE: &str = "platform.json";
const SIMPARAMS_FILE: &str = "simparams.json";

#[derive(Parser)]
#[command(name = "partlab", version, about = "Interference analysis for statically partitioned multi-core platforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate setups from an experiment into a manifest directory.
    Gen(GenArgs),
    /// Execute every setup of a manifest and record the results.
    Run(RunArgs),
    /// Simulate one setup and print its metric lines.
    Sim(SimArgs),
    /// Compute slowdowns from recorded results.
    Report(ReportArgs),
    /// Check an experiment (and its platform) without generating anything.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    experiment: PathBuf,
    /// Platform file; defaults to the one the experiment names.
    #[arg(long)]
    platform: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Replace a different manifest already in `--out`.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    setups: PathBuf,
    /// sim, replay or serial.
    #[arg(long, default_value = "sim")]
    backend: String,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Re-run setups that already completed.
    #[arg(long)]
    force: bool,
    /// Recorded logs for the replay backend.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    /// `{"<vm>": "<device or file>"}` for the serial backend.
    #[arg(long)]
    serial_map: Option<PathBuf>,
    /// Timing model for the sim backend; defaults to `<setups>/simparams.json`.
    #[arg(long)]
    simparams: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// A `setup_<id>.json` written by `gen`.
    #[arg(long)]
    setup: PathBuf,
    /// Defaults to `platform.json` next to the setup.
    #[arg(long)]
    platform: Option<PathBuf>,
    /// Defaults to `simparams.json` next to the setup, if present.
    #[arg(long)]
    simparams: Option<PathBuf>,
    /// Defaults to the setup's repetition count.
    #[arg(long)]
    repetitions: Option<u32>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    /// csv, json or plotdata.
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Output file (csv, json) or directory (plotdata); defaults to
    /// `report.csv`, `report.json` or `plotdata/` under the results.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Knee threshold for the color-count series.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    experiment: Option<PathBuf>,
    #[arg(long)]
    platform: Option<PathBuf>,
    #[arg(long)]
    simparams: Option<PathBuf>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Sim(a) => sim(a),
        Command::Report(a) => report_cmd(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn gen(a: GenArgs) -> CmdResult {
    let (exp, plat) = load_experiment(&a.experiment, a.platform.as_deref()).map_err(Failure::usage)?;
    let manifest = enumerate_setups(&exp, &plat).map_err(Failure::usage)?;
    let params = sibling(&a.experiment, SIMPARAMS_FILE);
    if let Some(p) = &params {
        load_sim_params(p).map_err(Failure::usage)?;
    }

    let existing = a.out.join(MANIFEST_FILE);
    if !a.force && existing.exists() {
        let old = fs::read_to_string(&existing).with_context(|| existing.display().to_string())?;
        if old != manifest_json(&manifest) {
            return Err(Failure::usage(anyhow::anyhow!(
                "{} holds a different manifest; pass --force to replace it",
                a.out.display()
            )));
        }
    }
    genspace::write_manifest(&manifest, &a.out).with_context(|| a.out.display().to_string())?;
    write_text(&a.out.join(PLATFORM_FILE), &(emit_platform(&plat) + "\n"))?;
    if let Some(p) = &params {
        let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
        write_text(&a.out.join(SIMPARAMS_FILE), &text)?;
    }
    println!(
        "{} interference setups + {} baselines",
        manifest.meta.interference_setups, manifest.meta.baselines
    );
    Ok(ExitCode::SUCCESS)
}

fn run(a: RunArgs) -> CmdResult {
    let kind: BackendKind = a.backend.parse().map_err(|e: String| Failure::usage(anyhow::anyhow!(e)))?;
    let manifest = read_manifest(&a.setups)
        .with_context(|| format!("no manifest in {}", a.setups.display()))
        .map_err(Failure::usage)?;
    let backend: Box<dyn Backend> = match kind {
        BackendKind::Sim => {
            let plat = load_platform(&a.setups.join(PLATFORM_FILE)).map_err(Failure::usage)?;
            let params = sim_params(a.simparams.as_deref(), &a.setups)?;
            Box::new(SimBackend::new(plat, params))
        }
        BackendKind::Replay => {
            let dir = a.replay_dir.ok_or_else(|| Failure::usage(anyhow::anyhow!("--replay-dir is required for replay")))?;
            Box::new(ReplayBackend::new(dir))
        }
        BackendKind::Serial => {
            // Rejected before the map is opened: consoles are live devices.
            if a.jobs > 1 {
                return Err(Failure::usage(OrchestratorError::NotParallelizable));
            }
            let map = a.serial_map.ok_or_else(|| Failure::usage(anyhow::anyhow!("--serial-map is required for serial")))?;
            Box::new(SerialBackend::from_map_file(&map).map_err(Failure::usage)?)
        }
    };
    let opts = SweepOptions {
        jobs: a.jobs,
        force: a.force,
    };
    let summary = match orchestrator::run_sweep(&manifest, backend.as_ref(), &a.out, &opts) {
        Ok(s) => s,
        Err(e @ OrchestratorError::NotParallelizable) => return Err(Failure::usage(e)),
        Err(e) => return Err(anyhow::Error::from(e).into()),
    };
    for f in &summary.start_failures {
        eprintln!("setup {} ({}): {}", f.setup_id, f.setup_name, f.error);
    }
    println!("{}", summary.status_line());
    println!("executed {}, skipped {}", summary.executed, summary.skipped);
    Ok(if summary.all_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn sim(a: SimArgs) -> CmdResult {
    let text = fs::read_to_string(&a.setup)
        .with_context(|| a.setup.display().to_string())
        .map_err(Failure::usage)?;
    let setup: Setup = serde_json::from_str(&text)
        .with_context(|| a.setup.display().to_string())
        .map_err(Failure::usage)?;
    let dir = a.setup.parent().unwrap_or(Path::new("."));
    let plat_path = a.platform.unwrap_or_else(|| dir.join(PLATFORM_FILE));
    let plat = load_platform(&plat_path).map_err(Failure::usage)?;
    let params = sim_params(a.simparams.as_deref(), dir)?;
    let samples = match simulate(&setup, &plat, &params, a.repetitions.unwrap_or(setup.repetitions)) {
        Ok(s) => s,
        Err(e @ (SimError::InvalidSetup(_) | SimError::Memory { .. })) => return Err(Failure::usage(e)),
        Err(e) => return Err(anyhow::Error::from(e).into()),
    };
    for line in emit_stream(&orchestrator::run_id_for(&setup), &samples) {
        println!("{line}");
    }
    Ok(ExitCode::SUCCESS)
}

fn report_cmd(a: ReportArgs) -> CmdResult {
    if !a.results.is_dir() {
        return Err(Failure::usage(anyhow::anyhow!("{} is not a directory", a.results.display())));
    }
    let records = load_records(&a.results).with_context(|| a.results.display().to_string())?;
    if records.is_empty() {
        return Err(Failure::usage(anyhow::anyhow!("no run records in {}", a.results.display())));
    }
    let report = build_report(&records).map_err(Failure::usage)?;
    if report.rows.is_empty() {
        return Err(Failure::usage(anyhow::anyhow!(
            "no complete runs in {}",
            a.results.display()
        )));
    }
    let out = a.out.unwrap_or_else(|| {
        a.results.join(match a.format {
            Format::Csv => "report.csv",
            Format::Json => "report.json",
            Format::Plotdata => "plotdata",
        })
    });
    let written = report::export(&report, a.format, &out).map_err(|e| Failure::from(anyhow::Error::from(e)))?;

    for skipped in &report.skipped {
        eprintln!("skipped incomplete run: {skipped}");
    }
    for (bench, setup, slowdown) in report.worst_per_bench() {
        println!("{bench}: worst {slowdown:.2}x ({setup})");
    }
    // Knee of every color-count series, ordered by access type then size.
    let mut knees: BTreeMap<String, BTreeMap<(String, u64), String>> = BTreeMap::new();
    for s in plot_series(&report).iter().filter(|s| s.figure.starts_with("colors_")) {
        let label = &s.figure["colors_".len()..];
        let (access, size) = label.split_once('_').unwrap_or((label, ""));
        let series: Option<Vec<(u32, f64)>> = s.points.iter().map(|(x, y)| x.parse().ok().map(|k| (k, *y))).collect();
        if let Some(Ok(k)) = series.map(|p| diminishing_returns(&p, a.epsilon)) {
            let key = (access.to_string(), genspace::parse_size(size).unwrap_or(u64::MAX));
            knees.entry(s.bench.clone()).or_default().insert(key, format!("{label}={k}"));
        }
    }
    for (bench, ks) in knees {
        println!("{bench}: knee {}", ks.into_values().collect::<Vec<_>>().join(" "));
    }
    println!("wrote {} file(s) to {}", written.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> CmdResult {
    if a.experiment.is_none() && a.platform.is_none() && a.simparams.is_none() {
        return Err(Failure::usage(anyhow::anyhow!(
            "nothing to validate; pass --experiment, --platform or --simparams"
        )));
    }
    if let Some(path) = &a.experiment {
        let (exp, plat) = load_experiment(path, a.platform.as_deref()).map_err(Failure::usage)?;
        let manifest = enumerate_setups(&exp, &plat).map_err(Failure::usage)?;
        println!(
            "{}: ok ({} guests, {} setups)",
            path.display(),
            exp.guests.len(),
            manifest.setups.len()
        );
    } else if let Some(path) = &a.platform {
        let text = fs::read_to_string(path)
            .with_context(|| path.display().to_string())
            .map_err(Failure::usage)?;
        let plat = parse_platform(&text).map_err(Failure::usage)?;
        println!("{}: ok ({}, {} colors)", path.display(), plat.name, plat.color_count);
    }
    if let Some(path) = &a.simparams {
        load_sim_params(path).map_err(Failure::usage)?;
        println!("{}: ok", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// `--simparams` if given, else `simparams.json` in `dir`, else defaults.
fn sim_params(explicit: Option<&Path>, dir: &Path) -> Result<SimParams, Failure> {
    let path = explicit.map(Path::to_path_buf).or_else(|| {
        let p = dir.join(SIMPARAMS_FILE);
        p.exists().then_some(p)
    });
    match path {
        Some(p) => load_sim_params(&p).map_err(Failure::usage),
        None => Ok(SimParams::default()),
    }
}

fn sibling(file: &Path, name: &str) -> Option<PathBuf> {
    let p = file.parent().unwrap_or(Path::new(".")).join(name);
    p.exists().then_some(p)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| path.display().to_string())
}
