//! Command-line front end. Machine-readable JSON goes to stdout, a short
//! human summary to stderr.
//!
//! Exit codes: 0 ok, 1 I/O, 2 usage or bad input, 3 estimation failure,
//! 4 variance failure.

mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_dataset, write_dataset, ColumnSelect, CsvSchema, TrialDataset};
use crate::error::Error;
use crate::estimators::{
    estimate_hypothetical, estimate_treatment_policy, fit_balanced, BalancedOptions, EstimateResult,
};
use crate::numeric::{format_g17, to_json_g17};
use crate::rng::substream;
use crate::simulate::{generate_with_rng, toy_estimands, PotentialOutcomeTable, ScenarioConfig};
use crate::study::{
    run_mc_study, sensitivity_sweep, StudyOptions, DEFAULT_TRUTH_MC, DEFAULT_TRUTH_SEED,
};
use crate::tilt::Variant;
use crate::variance::{bootstrap, influence_se_balanced, EstimatorSpec};

pub use report::{InputDigest, RunReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ESTIMATION: i32 = 3;
pub const EXIT_VARIANCE: i32 = 4;

const SEED_ENV: &str = "RESCUE_IPW_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "rescue-ipw",
    version,
    about = "Balanced-estimand IPW for trials with rescue-medication switching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trial dataset from a scenario.
    Simulate(SimulateArgs),
    /// Estimate an effect from a dataset.
    Estimate(EstimateArgs),
    /// Balanced estimates over a grid of dilution factors.
    Sweep(SweepArgs),
    /// Monte-Carlo replication study on simulated trials.
    Study(StudyArgs),
    /// Exact estimands of a potential-outcome table.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Built-in scenario.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3), conflicts_with = "config")]
    scenario: Option<u8>,
    /// Scenario JSON with the ScenarioConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<(ScenarioConfig, Option<u8>), Failure> {
        match (self.scenario, &self.config) {
            (Some(s), _) => Ok((ScenarioConfig::preset(s).map_err(Failure::input)?, Some(s))),
            (None, Some(p)) => Ok((ScenarioConfig::load(p).map_err(Failure::input)?, None)),
            (None, None) => Err(Failure::usage("one of --scenario or --config is required")),
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, env = SEED_ENV)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Keep post-treatment covariates on control rows (for the hypothetical estimand).
    #[arg(long)]
    retain_l: bool,
}

#[derive(Debug, Args)]
struct SchemaArgs {
    #[arg(long, default_value = "R")]
    col_r: String,
    #[arg(long, default_value = "S")]
    col_s: String,
    #[arg(long, default_value = "Y")]
    col_y: String,
    /// Post-treatment covariates: comma-separated names, or `PREFIX*`.
    #[arg(long, default_value = "L_*")]
    cols_l: String,
    /// Baseline covariates: comma-separated names, or `PREFIX*`.
    #[arg(long, default_value = "C_*")]
    cols_c: String,
    /// Column of stratum labels for the bootstrap.
    #[arg(long, alias = "col-stratum")]
    strata_col: Option<String>,
}

fn column_select(spec: &str) -> ColumnSelect {
    match spec.strip_suffix('*') {
        Some(prefix) => ColumnSelect::Prefix(prefix.to_string()),
        None => ColumnSelect::Names(split_list(spec)),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}

impl SchemaArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            col_r: self.col_r.clone(),
            col_s: self.col_s.clone(),
            col_y: self.col_y.clone(),
            cols_l: column_select(&self.cols_l),
            cols_c: column_select(&self.cols_c),
            col_stratum: self.strata_col.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimandArg {
    Balanced,
    Policy,
    Hypothetical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SeArg {
    Influence,
    Bootstrap(usize),
    None,
}

fn parse_se(s: &str) -> Result<SeArg, String> {
    match s {
        "influence" => Ok(SeArg::Influence),
        "none" => Ok(SeArg::None),
        other => match other.strip_prefix("bootstrap:") {
            Some(b) => b
                .parse::<usize>()
                .ok()
                .filter(|&b| b >= 2)
                .map(SeArg::Bootstrap)
                .ok_or_else(|| format!("bootstrap replicate count `{b}` must be an integer >= 2")),
            None => Err(format!(
                "expected influence, bootstrap:B or none, got `{other}`"
            )),
        },
    }
}

fn parse_truncation(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|_| format!("bad percentile `{lo}`"))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|_| format!("bad percentile `{hi}`"))?;
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err("percentiles must satisfy 0 <= lo < hi <= 100".into());
    }
    Ok((lo, hi))
}

fn parse_rho(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad rho `{s}`"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("rho = {v} outside (0, 1]"))
    }
}

/// A parsed `lo:hi:step` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoGrid(pub Vec<f64>);

fn parse_grid_arg(s: &str) -> Result<RhoGrid, String> {
    parse_rho_grid(s).map(RhoGrid)
}

/// `lo:hi:step`, inclusive of `hi` within 1e-12.
pub fn parse_rho_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("expected lo:hi:step, got `{s}`"));
    };
    let num = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad number `{x}`"))
    };
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !lo.is_finite() || !hi.is_finite() || !step.is_finite() || step <= 0.0 || lo > hi {
        return Err("grid needs finite lo <= hi and step > 0".into());
    }
    let mut grid = Vec::new();
    let mut k = 0usize;
    loop {
        let raw = lo + k as f64 * step;
        if raw > hi + 1e-12 {
            break;
        }
        let v = if (raw - hi).abs() <= 1e-12 {
            hi
        } else {
            (raw * 1e12).round() / 1e12
        };
        grid.push(v);
        k += 1;
        if grid.len() > 100_000 {
            return Err("grid too long".into());
        }
    }
    if let Some(bad) = grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(format!("grid value {bad} outside (0, 1]"));
    }
    Ok(grid)
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    estimand: EstimandArg,
    /// Dilution factor in (0, 1]; required for the balanced estimand.
    #[arg(long, value_parser = parse_rho)]
    rho: Option<f64>,
    /// influence, bootstrap:B or none.
    #[arg(long, value_parser = parse_se, default_value = "none")]
    se: SeArg,
    /// Interchange the arms (target E(Y1 - Y0S1)).
    #[arg(long)]
    flip: bool,
    /// Clamp treated weights at these percentiles, e.g. `1,99`.
    #[arg(long, value_parser = parse_truncation)]
    truncate: Option<(f64, f64)>,
    #[arg(long, default_value = "non-switcher")]
    variant: Variant,
    /// Baseline covariates for the propensity model (comma-separated).
    #[arg(long, default_value = "")]
    propensity_covariates: String,
    #[arg(long, env = SEED_ENV, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    /// `lo:hi:step`, endpoints inclusive.
    #[arg(long, value_parser = parse_grid_arg)]
    rho_grid: RhoGrid,
    #[arg(long)]
    flip: bool,
    #[arg(long, value_parser = parse_truncation)]
    truncate: Option<(f64, f64)>,
    #[arg(long, default_value = "non-switcher")]
    variant: Variant,
    #[arg(long, default_value = "")]
    propensity_covariates: String,
    /// Also write one CSV row per grid point here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    reps: usize,
    #[arg(long, value_parser = parse_rho)]
    rho: f64,
    #[arg(long, value_parser = parse_truncation)]
    truncate: Option<(f64, f64)>,
    #[arg(long, default_value = "non-switcher")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 1)]
    seed: u64,
    /// Monte-Carlo size of the truth oracle.
    #[arg(long, default_value_t = DEFAULT_TRUTH_MC)]
    truth_mc: usize,
    #[arg(long, default_value_t = DEFAULT_TRUTH_SEED)]
    truth_seed: u64,
    /// Directory caching truth values between runs.
    #[arg(long)]
    truth_cache: Option<PathBuf>,
    /// Summary CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON echo of the full result.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-replicate estimates CSV.
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// CSV with header S0,S1,Y00,Y01,Y10,Y11; defaults to the built-in five-patient table.
    #[arg(long)]
    table: Option<PathBuf>,
}

/// A failed command: exit code plus message.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    /// Input and estimation stages.
    fn input(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => EXIT_IO,
            Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
            Error::NonConvergence { .. }
            | Error::RankDeficientDesign(_)
            | Error::DegenerateArm(_)
            | Error::AllSwitchers { .. }
            | Error::EmptyStratum
            | Error::TooManyFailures { .. } => EXIT_ESTIMATION,
            Error::TruncationUnsupported | Error::InfluenceUnavailable(_) => EXIT_VARIANCE,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }

    /// Standard-error stage: any failure is a variance failure unless it is I/O.
    fn variance(e: Error) -> Self {
        let mut f = Failure::input(e);
        if f.code != EXIT_IO {
            f.code = EXIT_VARIANCE;
        }
        f
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let command_line = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let started = Instant::now();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a, command_line, started),
        Command::Estimate(a) => cmd_estimate(a, command_line, started),
        Command::Sweep(a) => cmd_sweep(a, command_line, started),
        Command::Study(a) => cmd_study(a, command_line, started),
        Command::Toy(a) => cmd_toy(a, command_line, started),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::input(Error::io(path, e)))
}

fn emit(report: &RunReport, out: Option<&Path>) -> Result<(), Failure> {
    let json = to_json_g17(report).map_err(Failure::input)?;
    println!("{json}");
    if let Some(p) = out {
        write_file(p, &(json + "\n"))?;
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, command: String, started: Instant) -> Result<(), Failure> {
    let (config, _) = a.scenario.resolve()?;
    let mut rng = substream(a.seed, 0);
    let data = generate_with_rng(&config, a.n, &mut rng, a.retain_l).map_err(Failure::input)?;
    write_dataset(&data, &a.out).map_err(Failure::input)?;
    let digest = InputDigest::of(&data);
    eprintln!("wrote {} rows to {}", data.len(), a.out.display());
    eprint!("{}", digest.table());
    let mut report = RunReport::new("simulate", command, started);
    report.digest = Some(digest);
    report.finish(started);
    emit(&report, None)
}

fn load(path: &Path, schema: &SchemaArgs) -> Result<TrialDataset, Failure> {
    load_dataset(path, &schema.schema()).map_err(Failure::input)
}

fn cmd_estimate(a: EstimateArgs, command: String, started: Instant) -> Result<(), Failure> {
    let data = load(&a.input, &a.schema)?;
    let covariates = split_list(&a.propensity_covariates);
    let mut report = RunReport::new("estimate", command, started);
    report.digest = Some(InputDigest::of(&data));

    let (mut result, spec) = match a.estimand {
        EstimandArg::Balanced => {
            let rho = a
                .rho
                .ok_or_else(|| Failure::usage("--estimand balanced requires --rho"))?;
            let opts = BalancedOptions {
                variant: a.variant,
                truncation: a.truncate,
                propensity_covariates: covariates.clone(),
                flip: a.flip,
                ..BalancedOptions::default()
            };
            let fit = fit_balanced(&data, rho, &opts).map_err(|e| {
                if let Error::DegenerateArm(msg) = &e {
                    eprintln!("warning: {msg}");
                }
                Failure::input(e)
            })?;
            let mut result = fit.result.clone();
            if a.se == SeArg::Influence {
                result.se = Some(influence_se_balanced(&fit).map_err(Failure::variance)?);
            }
            (result, EstimatorSpec::Balanced { rho, options: opts })
        }
        EstimandArg::Policy | EstimandArg::Hypothetical => {
            if a.flip || a.truncate.is_some() {
                return Err(Failure::usage(
                    "--flip and --truncate apply only to the balanced estimand",
                ));
            }
            let (result, spec) = if matches!(a.estimand, EstimandArg::Policy) {
                (
                    estimate_treatment_policy(&data, &covariates),
                    EstimatorSpec::TreatmentPolicy {
                        propensity_covariates: covariates.clone(),
                    },
                )
            } else {
                (
                    estimate_hypothetical(&data, &covariates),
                    EstimatorSpec::Hypothetical {
                        propensity_covariates: covariates.clone(),
                    },
                )
            };
            let result = result.map_err(Failure::input)?;
            if a.se == SeArg::Influence {
                return Err(Failure::variance(Error::InfluenceUnavailable(
                    "influence-function SEs are implemented for the balanced estimand only; use bootstrap:B".into(),
                )));
            }
            (result, spec)
        }
    };
    if let SeArg::Bootstrap(b) = a.se {
        let boot =
            bootstrap(&data, &spec, b, a.seed, data.strata(), a.jobs).map_err(Failure::variance)?;
        if boot.failed > 0 {
            result.warnings.push(format!(
                "{} of {} bootstrap replicates failed and were dropped",
                boot.failed, b
            ));
        }
        result.se = Some(boot.standard_errors());
        result.ci = Some(boot.ci);
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    eprint!("{}", report::estimate_table(std::slice::from_ref(&result)));
    report.warnings.extend(result.warnings.iter().cloned());
    report.estimates.push(result);
    report.finish(started);
    emit(&report, a.out.as_deref())
}

fn cmd_sweep(a: SweepArgs, command: String, started: Instant) -> Result<(), Failure> {
    let data = load(&a.input, &a.schema)?;
    let grid = a.rho_grid.0;
    let opts = BalancedOptions {
        variant: a.variant,
        truncation: a.truncate,
        propensity_covariates: split_list(&a.propensity_covariates),
        flip: a.flip,
        ..BalancedOptions::default()
    };
    let results = sensitivity_sweep(&data, &grid, &opts).map_err(Failure::input)?;
    let mut report = RunReport::new("sweep", command, started);
    report.digest = Some(InputDigest::of(&data));
    for r in &results {
        for w in &r.warnings {
            if !report.warnings.contains(w) {
                report.warnings.push(w.clone());
            }
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprint!("{}", report::estimate_table(&results));
    if let Some(p) = &a.out {
        write_file(p, &sweep_csv(&results))?;
    }
    report.estimates = results;
    report.finish(started);
    emit(&report, None)
}

fn sweep_csv(results: &[EstimateResult]) -> String {
    let mut out = String::from("rho,mu1,mu0,mu,w_p5,w_p95\n");
    let opt = |v: Option<f64>| v.map(format_g17).unwrap_or_default();
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            opt(r.options.rho),
            format_g17(r.mu1),
            format_g17(r.mu0),
            format_g17(r.mu),
            opt(r.weight_p5),
            opt(r.weight_p95)
        ));
    }
    out
}

fn cmd_study(a: StudyArgs, command: String, started: Instant) -> Result<(), Failure> {
    let (config, scenario) = a.scenario.resolve()?;
    let options = StudyOptions {
        variant: a.variant,
        truncation: a.truncate,
        jobs: a.jobs,
        truth: None,
        truth_mc: a.truth_mc,
        truth_seed: a.truth_seed,
        truth_cache: a.truth_cache.clone(),
        scenario,
    };
    let result =
        run_mc_study(&config, a.n, a.reps, a.rho, &options, a.seed).map_err(Failure::input)?;
    let csv = result.to_csv();
    if let Some(p) = &a.out {
        write_file(p, &csv)?;
    }
    if let Some(p) = &a.json {
        write_file(p, &(to_json_g17(&result).map_err(Failure::input)? + "\n"))?;
    }
    if let Some(p) = &a.plot_data {
        write_file(p, &result.plot_csv())?;
    }
    eprint!("{}", report::study_table(&result));
    let mut report = RunReport::new("study", command, started);
    if result.reps_failed > 0 {
        report.warnings.push(format!(
            "{} of {} replicates failed and were excluded",
            result.reps_failed, result.echo.reps
        ));
    }
    report.study = Some(result);
    report.finish(started);
    emit(&report, None)
}

fn cmd_toy(a: ToyArgs, command: String, started: Instant) -> Result<(), Failure> {
    let table = match &a.table {
        Some(p) => PotentialOutcomeTable::load(p).map_err(Failure::input)?,
        None => PotentialOutcomeTable::toy(),
    };
    let e = toy_estimands(&table);
    let principal = e
        .principal
        .map_or("undefined".to_string(), |v| format!("{v:?}"));
    eprintln!(
        "(policy, hypothetical, principal, balanced) = ({:?}, {:?}, {}, {:?})",
        e.policy, e.hypothetical, principal, e.balanced
    );
    let mut report = RunReport::new("toy", command, started);
    if e.principal.is_none() {
        report
            .warnings
            .push("principal stratum S0 = S1 = 0 is empty".into());
    }
    report.toy = Some(e);
    report.finish(started);
    emit(&report, None)
}
