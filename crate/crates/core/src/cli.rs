//! The `ensemble` command line. `server` and `simulate` are the worker
//! processes `run-study` spawns; the other commands are for users.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::client::{ClientConfig, ClientSession, FieldSpec};
use crate::export::{
    encode_stat_field, inter_percentile_range, load_manifest, probe, read_statistic, write_csv, ExportError,
    StatField, StatFileReader,
};
use crate::field_stats::Statistic;
use crate::launcher::{
    launch_study, parameter_set, ConfigError, ParameterSet, StudyConfig, StudyPaths, StudyReport,
    INJECTED_CRASH_EXIT,
};
use crate::server::{run_server, ExitReason, HeartbeatTarget};
use crate::sim_dye::{run_simulation, DYE_FIELD};
use crate::stats::StepSchedule;
use crate::validation::{
    calibrate, robustness_verdict, run_distribution_study, summarize, EstimatorSpec,
    OracleAccumulator, OracleReport, TargetDistribution,
};

/// Overrides the study output directory.
pub const ENV_OUTPUT_DIR: &str = "ENSEMBLE_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STUDY_FAILED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Percentiles compared with the oracle when none are requested.
pub const ORACLE_DEFAULT_ALPHAS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("study failed: {0}")]
    StudyFailed(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Read { .. }) | CliError::Io(_) => EXIT_IO,
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::StudyFailed(_) => EXIT_STUDY_FAILED,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io { .. } | ExportError::Format { .. } | ExportError::Missing(_) => CliError::Io(e.to_string()),
            ExportError::Incomplete { .. } => CliError::StudyFailed(e.to_string()),
            ExportError::UnknownField(_) | ExportError::UnknownCell { .. } | ExportError::UnknownTimestep { .. } => {
                CliError::Usage(e.to_string())
            }
            ExportError::Statistics(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return CliError::Io(io::Error::from(io::ErrorKind::BrokenPipe).to_string());
        }
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ensemble", version, about = "In-transit ensemble statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a full study: server, simulations, exports and report.
    RunStudy(RunStudyArgs),
    /// Compare quantile estimators on synthetic distributions.
    Validate(ValidateArgs),
    /// Every exported quantile at one cell, per timestep.
    Probe(ProbeArgs),
    /// Upper minus lower percentile field at one timestep.
    ExportRange(RangeArgs),
    /// Every statistic of a field as `cell,timestep,statistic,value` rows.
    ExportCsv(CsvArgs),
    /// Compare a study's streamed quantiles with its stored raw samples.
    OracleCheck(OracleArgs),
    /// Statistics server process (spawned by run-study).
    #[command(hide = true)]
    Server(ServerArgs),
    /// Simulation process (spawned by run-study).
    #[command(hide = true)]
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct RunStudyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of simulations (overrides the config).
    #[arg(long)]
    sims: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = ENV_OUTPUT_DIR)]
    output: Option<PathBuf>,
    /// Keep every raw sample for oracle comparison (desk scale only).
    #[arg(long)]
    store_raw: bool,
    #[arg(long)]
    max_concurrent: Option<usize>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long, default_value = "gaussian", conflicts_with = "all_dists")]
    dist: String,
    #[arg(long)]
    all_dists: bool,
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the constant exponent 0.6.
    #[arg(long)]
    with_gamma_06: bool,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    export: PathBuf,
    #[arg(long)]
    cell: u64,
    #[arg(long, default_value = DYE_FIELD)]
    field: String,
}

#[derive(Debug, Args)]
struct RangeArgs {
    #[arg(long)]
    export: PathBuf,
    #[arg(long)]
    lower: f64,
    #[arg(long)]
    upper: f64,
    #[arg(long)]
    timestep: u32,
    #[arg(long, default_value = DYE_FIELD)]
    field: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CsvArgs {
    #[arg(long)]
    export: PathBuf,
    #[arg(long, default_value = DYE_FIELD)]
    field: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Study output directory (run with --store-raw).
    #[arg(long)]
    study: PathBuf,
    /// Comma-separated orders; defaults to 0.05,0.25,0.5,0.75,0.95.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
}

#[derive(Debug, Args)]
struct ServerArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    work_dir: PathBuf,
    #[arg(long)]
    restore: bool,
    #[arg(long)]
    heartbeat: Option<SocketAddr>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Parameter set; derived from the study seed and simulation id when
    /// absent.
    #[arg(long)]
    params: Option<String>,
    /// Exit abruptly before computing this timestep.
    #[arg(long)]
    crash_at_step: Option<u32>,
    #[arg(long)]
    raw_dir: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::RunStudy(a) => cmd_run_study(a, &mut out),
        Command::Validate(a) => cmd_validate(a, &mut out),
        Command::Probe(a) => cmd_probe(a, &mut out),
        Command::ExportRange(a) => cmd_export_range(a, &mut out),
        Command::ExportCsv(a) => cmd_export_csv(a, &mut out),
        Command::OracleCheck(a) => cmd_oracle_check(a, &mut out),
        Command::Server(a) => cmd_server(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    let _ = out.flush();
    match result {
        Ok(()) => EXIT_OK,
        // downstream closed early, as with `| head`
        Err(CliError::Io(m)) if m == io::Error::from(io::ErrorKind::BrokenPipe).to_string() => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_run_study(a: RunStudyArgs, out: &mut impl Write) -> Result<(), CliError> {
    let mut cfg = StudyConfig::load(&a.config)?;
    if let Some(n) = a.sims {
        cfg.n_sims = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.output {
        cfg.output_dir = o;
    }
    if let Some(m) = a.max_concurrent {
        cfg.launcher.max_concurrent = m;
    }
    cfg.store_raw |= a.store_raw;
    cfg.validate()?;
    let exe = match &cfg.launcher.executable {
        Some(p) => p.clone(),
        None => std::env::current_exe()?,
    };
    let report = launch_study(cfg, &exe).map_err(|e| CliError::Io(e.to_string()))?;
    write_report_summary(&report, out)?;
    match report.failure {
        None => Ok(()),
        Some(f) => Err(CliError::StudyFailed(f)),
    }
}

fn write_report_summary(r: &StudyReport, out: &mut impl Write) -> io::Result<()> {
    writeln!(
        out,
        "study {}: {} in {:.1} s, {} simulations, {} failed attempts, {} server restarts, peak concurrency {}",
        r.study_id,
        if r.success { "complete" } else { "FAILED" },
        r.wall_time_secs,
        r.sims.len(),
        r.total_failures,
        r.server_restarts,
        r.max_running
    )?;
    if r.success {
        writeln!(out, "statistics exported to {}", r.export_dir.display())?;
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs, out: &mut impl Write) -> Result<(), CliError> {
    let dists = if a.all_dists {
        TargetDistribution::ALL.to_vec()
    } else {
        vec![TargetDistribution::parse(&a.dist).ok_or_else(|| {
            CliError::Usage(format!("unknown distribution {:?} (gaussian, uniform, triangular, exponential)", a.dist))
        })?]
    };
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let mut specs = EstimatorSpec::study_set();
    if a.with_gamma_06 {
        specs.insert(4, EstimatorSpec::rm(StepSchedule::Constant(0.6)));
    }
    let mut studies = Vec::new();
    for &d in &dists {
        studies.push(
            run_distribution_study(d, a.alpha, a.n, a.repeats, a.seed, &specs)
                .map_err(|e| CliError::Usage(e.to_string()))?,
        );
    }
    if a.repeats == 1 {
        writeln!(out, "distribution,estimator,estimate,exact,error")?;
        for s in &studies {
            for r in &s.runs {
                let e = r.estimates[0];
                writeln!(out, "{},{},{e:.6},{:.6},{:.6}", s.distribution.name(), r.spec.label(), s.exact, e - s.exact)?;
            }
        }
        return Ok(());
    }
    writeln!(out, "distribution,estimator,mean,bias,std,rmse,band_lo,band_hi,rmse_ratio,calibrated")?;
    for s in &studies {
        for r in &s.runs {
            let sm = summarize(&r.estimates, s.exact).map_err(|e| CliError::Other(e.to_string()))?;
            let (ratio, ok) = match calibrate(s, &r.spec) {
                Some(c) => (format!("{:.3}", c.rmse_ratio), (c.bias_ok && c.rmse_ok).to_string()),
                None => ("1.000".into(), "reference".into()),
            };
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{ratio},{ok}",
                s.distribution.name(),
                r.spec.label(),
                sm.mean,
                sm.bias,
                sm.std,
                sm.rmse,
                sm.band.0,
                sm.band.1
            )?;
        }
    }
    if studies.len() > 1 {
        let v = robustness_verdict(&studies);
        writeln!(out)?;
        writeln!(out, "robust on every distribution: {}", v.robust.join(" "))?;
        writeln!(out, "constant exponents failing somewhere: {}", v.fragile_constant.join(" "))?;
        writeln!(out, "linear profile uniquely robust: {}", v.linear_uniquely_robust)?;
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs, out: &mut impl Write) -> Result<(), CliError> {
    let rows = probe(&a.export, &a.field, a.cell)?;
    writeln!(out, "timestep,alpha,value")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.timestep, r.alpha, r.value)?;
    }
    Ok(())
}

fn open_out(path: &Option<PathBuf>) -> Result<Option<BufWriter<fs::File>>, CliError> {
    Ok(match path {
        Some(p) => Some(BufWriter::new(fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?)),
        None => None,
    })
}

fn cmd_export_range(a: RangeArgs, out: &mut impl Write) -> Result<(), CliError> {
    let v = inter_percentile_range(&a.export, &a.field, a.lower, a.upper, a.timestep)?;
    let mut file = open_out(&a.out)?;
    let w: &mut dyn Write = match file.as_mut() {
        Some(f) => f,
        None => out,
    };
    writeln!(w, "cell,value")?;
    for (cell, x) in v.iter().enumerate() {
        writeln!(w, "{cell},{x}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_export_csv(a: CsvArgs, out: &mut impl Write) -> Result<(), CliError> {
    let mut file = open_out(&a.out)?;
    let rows = match file.as_mut() {
        Some(f) => write_csv(&a.export, &a.field, f)?,
        None => write_csv(&a.export, &a.field, out)?,
    };
    if let Some(mut f) = file {
        f.flush()?;
        eprintln!("{rows} rows written");
    }
    Ok(())
}

/// Outcome of comparing a stored-raw study with its streamed statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub n_sims: u64,
    /// Every position's count equals the number of simulations.
    pub counts_exact: bool,
    pub report: OracleReport,
}

/// Raw sample file written by a simulation run with `--raw-dir`.
pub fn raw_path(raw_dir: &Path, sim: u64) -> PathBuf {
    raw_dir.join(format!("sim-{sim}.bin"))
}

/// Reads a finished study directory and compares its exported quantiles at
/// `alphas` with the empirical oracle over the stored raw samples, one
/// timestep at a time.
pub fn oracle_check_study(root: &Path, alphas: &[f64]) -> Result<OracleCheck, CliError> {
    let paths = StudyPaths::new(root);
    let cfg = StudyConfig::load(&paths.config())?;
    let export = paths.export_dir();
    let manifest = load_manifest(&export)?;
    if !manifest.complete {
        return Err(CliError::StudyFailed("export is incomplete".into()));
    }
    let field = DYE_FIELD;
    let count = read_statistic(&export, field, Statistic::Count)?;
    let counts_exact = count.values.iter().all(|&c| c == cfg.n_sims as f64);
    let estimates: Vec<StatField> = alphas
        .iter()
        .map(|&a| read_statistic(&export, field, Statistic::Quantile(a)))
        .collect::<Result<_, _>>()?;
    let mut readers: Vec<StatFileReader> = (0..cfg.n_sims)
        .map(|s| StatFileReader::open(&raw_path(&paths.raw_dir(), s)))
        .collect::<Result<_, _>>()?;
    let n_cells = cfg.n_cells() as usize;
    if readers.iter().any(|r| r.n_cells as usize != n_cells || r.n_timesteps != cfg.n_timesteps) {
        return Err(CliError::Io("raw sample files do not match the study layout".into()));
    }
    let mut acc = OracleAccumulator::new(cfg.n_sims as usize, alphas).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut columns = vec![Vec::with_capacity(readers.len()); n_cells];
    for t in 0..cfg.n_timesteps {
        columns.iter_mut().for_each(Vec::clear);
        for r in &mut readers {
            for (col, v) in columns.iter_mut().zip(r.read_timestep(t)?) {
                col.push(v);
            }
        }
        let est: Vec<&[f64]> = estimates.iter().map(|e| e.at(t)).collect();
        acc.add(&columns, &est).map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(OracleCheck {
        n_sims: cfg.n_sims,
        counts_exact,
        report: acc.finish().map_err(|e| CliError::Other(e.to_string()))?,
    })
}

/// Human-readable oracle table, one line per order plus the pooled line.
pub fn format_oracle_report(r: &OracleReport) -> String {
    let mut s = String::from("alpha,positions,median_abs_deviation,median_bootstrap_se,zero_se_fraction,within_1.5se\n");
    for row in r.per_alpha.iter().chain([&r.pooled]) {
        s += &format!(
            "{},{},{:.4e},{:.4e},{:.3},{}\n",
            row.alpha.map_or("pooled".to_string(), |a| a.to_string()),
            row.positions,
            row.median_deviation,
            row.median_std_error,
            row.zero_se_fraction,
            row.passes()
        );
    }
    s
}

fn cmd_oracle_check(a: OracleArgs, out: &mut impl Write) -> Result<(), CliError> {
    let alphas = if a.alphas.is_empty() { ORACLE_DEFAULT_ALPHAS.to_vec() } else { a.alphas };
    let c = oracle_check_study(&a.study, &alphas)?;
    write!(out, "{}", format_oracle_report(&c.report))?;
    writeln!(out, "counts all equal {}: {}", c.n_sims, c.counts_exact)?;
    if c.report.pooled.passes() && c.counts_exact {
        Ok(())
    } else {
        Err(CliError::Other("streamed quantiles outside the oracle tolerance".into()))
    }
}

fn cmd_server(a: ServerArgs) -> Result<(), CliError> {
    let cfg = StudyConfig::load(&a.config)?;
    let mut sc = cfg.server_config(a.work_dir);
    sc.restore = a.restore;
    sc.heartbeat = a.heartbeat.map(|addr| HeartbeatTarget {
        addr,
        period: Duration::from_secs_f64(cfg.server.heartbeat_period_secs),
    });
    let outcome = run_server(sc).map_err(|e| CliError::Other(e.to_string()))?;
    match outcome.reason {
        ExitReason::Complete => Ok(()),
        r => Err(CliError::StudyFailed(format!("server stopped before completion ({r:?})"))),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let cfg = StudyConfig::load(&a.config)?;
    let client = ClientConfig::from_env(cfg.n_cells()).map_err(|e| CliError::Usage(e.to_string()))?;
    let sim = client.simulation_id;
    let params = match &a.params {
        Some(p) => ParameterSet::parse_arg(p).map_err(CliError::Usage)?,
        None => parameter_set(cfg.seed, sim),
    };
    let flow = cfg.simulation.build_flow().map_err(|e| CliError::Usage(e.to_string()))?;
    let fields = vec![FieldSpec { name: DYE_FIELD.into(), cells: 0..cfg.n_cells() }];
    let mut session = ClientSession::initialize(client, fields).map_err(|e| CliError::Other(e.to_string()))?;
    let delay = Duration::from_millis(cfg.launcher.step_delay_ms);
    let mut raw = a.raw_dir.as_ref().map(|_| Vec::with_capacity(cfg.n_cells() as usize * cfg.n_timesteps as usize));
    let mut sink = |t: u32, name: &str, values: &[f64]| {
        if let Some(r) = raw.as_mut() {
            r.extend_from_slice(values);
        }
        session.send(t, name, values)
    };
    run_simulation(&params, &cfg.simulation, &flow, cfg.n_timesteps, &mut sink, |t| {
        if a.crash_at_step == Some(t) {
            eprintln!("simulation {sim}: injected crash before timestep {t}");
            std::process::exit(INJECTED_CRASH_EXIT);
        }
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
    })
    .map_err(|e| CliError::Other(e.to_string()))?;
    session.finalize().map_err(|e| CliError::Other(e.to_string()))?;
    if let (Some(dir), Some(values)) = (a.raw_dir, raw) {
        fs::create_dir_all(&dir)?;
        let f = StatField { name: DYE_FIELD.into(), n_cells: cfg.n_cells(), n_timesteps: cfg.n_timesteps, values };
        let path = raw_path(&dir, sim);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, encode_stat_field(&f))?;
        fs::rename(tmp, path)?;
    }
    Ok(())
}
