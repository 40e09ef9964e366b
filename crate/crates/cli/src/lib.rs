//! The `twfe` command-line tool. `run` is the whole program; `main` only
//! forwards the process arguments and exit code.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use twfe_core::diagnostics::{
    weight_report_with_bins, HomogeneityTest, WeightReport, DEFAULT_BANDWIDTH, DEFAULT_GRID_POINTS,
    DEFAULT_HISTOGRAM_BINS,
};
use twfe_core::lsq::t_critical;
use twfe_core::panel::{
    apply_adoption_schedule_with, read_panel_csv, read_panel_rows, read_schedule_csv, validate_observations,
    write_panel_csv, AdoptionCoding, AdoptionSchedule, ColumnSchema, PanelDataset,
};
use twfe_core::robustness::{RobustnessSweep, SweepOptions};
use twfe_core::{
    fit_twfe, generate_panel, homogeneity_test, leave_one_unit_out, residual_scatter, sweep_end_year,
    sweep_post_horizon, weight_grid, Inference, SyntheticSpec, TwfeFit,
};

pub mod output;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "twfe",
    version,
    about = "Two-way fixed-effects estimation and weight diagnostics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and write a JSON report with weight and homogeneity summaries.
    Estimate(EstimateArgs),
    /// Write the weight histogram, per-observation weights and unit × period grid.
    Weights(WeightsArgs),
    /// Write residualized scatter points, group lines and smoothed curves.
    Scatter(ScatterArgs),
    /// Re-estimate on samples ending at each period in a range.
    SweepEndyear(EndYearArgs),
    /// Re-estimate keeping a fixed number of periods after each unit's adoption.
    SweepHorizon(HorizonArgs),
    /// Re-estimate with each unit left out in turn.
    Jackknife(JackknifeArgs),
    /// Generate a synthetic panel from a JSON spec.
    Simulate(SimulateArgs),
    /// Check panel structure and write a JSON validation report.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Cluster {
    Unit,
    None,
}

impl Cluster {
    fn inference(self) -> Inference {
        match self {
            Cluster::Unit => Inference::ClusterByUnit,
            Cluster::None => Inference::Classical,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    /// The adoption period itself is treated.
    AdoptionPeriod,
    /// Treatment starts the period after adoption.
    AfterAdoption,
}

impl Coding {
    fn adoption_coding(self) -> AdoptionCoding {
        match self {
            Coding::AdoptionPeriod => AdoptionCoding::AdoptionPeriodTreated,
            Coding::AfterAdoption => AdoptionCoding::AfterAdoptionPeriod,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Long-format panel CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "unit")]
    pub unit: String,
    #[arg(long, default_value = "period")]
    pub time: String,
    #[arg(long, default_value = "outcome")]
    pub outcome: String,
    /// 0/1 treatment column; ignored when --adoption is given.
    #[arg(long, default_value = "treated")]
    pub treatment: String,
    /// Adoption schedule CSV (`unit,adoption_period`); builds treatment from it.
    #[arg(long)]
    pub adoption: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "adoption-period")]
    pub coding: Coding,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferenceArgs {
    #[arg(long, value_enum, default_value = "unit")]
    pub cluster: Cluster,
    /// Confidence level for intervals.
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    pub level: f64,
}

fn parse_level(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("level must lie in (0, 1), found {v}"))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Clustering for the homogeneity regression.
    #[arg(long, value_enum, default_value = "none")]
    pub homogeneity_cluster: Cluster,
    #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
    pub bins: usize,
    /// Report path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Leave the timestamp out of the report.
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
    pub bins: usize,
    /// Directory for histogram.csv, weights.csv and grid.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ScatterArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Smoothing window as a fraction of each group's residualized-treatment range.
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    pub grid: usize,
    /// Directory for scatter_points.csv, scatter_lines.csv and scatter_smooth.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EndYearArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// First end period; defaults to the earliest period.
    #[arg(long)]
    pub first: Option<i64>,
    /// Last end period; defaults to the latest period.
    #[arg(long)]
    pub last: Option<i64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HorizonArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Comma-separated non-negative horizons.
    #[arg(long, value_delimiter = ',', required = true)]
    pub horizons: Vec<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct JackknifeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// JSON synthetic spec.
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs one command. Returns the
/// process exit code: 0 success, 1 data or validation failure, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Estimate(a) => estimate(&a).map(|_| 0),
        Command::Weights(a) => weights(&a).map(|_| 0),
        Command::Scatter(a) => scatter(&a).map(|_| 0),
        Command::SweepEndyear(a) => sweep_endyear(&a).map(|_| 0),
        Command::SweepHorizon(a) => sweep_horizon(&a).map(|_| 0),
        Command::Jackknife(a) => jackknife(&a).map(|_| 0),
        Command::Simulate(a) => simulate(&a).map(|_| 0),
        Command::Validate(a) => validate(&a),
    }
}

/// A panel as loaded from disk, with the digest of the raw panel bytes.
pub struct LoadedPanel {
    pub dataset: PanelDataset,
    pub schedule: Option<AdoptionSchedule>,
    pub digest: String,
}

impl LoadedPanel {
    /// The explicit schedule if one was given, else the one implied by treatment.
    pub fn schedule(&self) -> AdoptionSchedule {
        self.schedule.clone().unwrap_or_else(|| self.dataset.implied_schedule())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn schema(args: &DataArgs) -> ColumnSchema {
    let schema = ColumnSchema::new(&args.unit, &args.time, &args.outcome);
    if args.adoption.is_some() {
        schema
    } else {
        schema.with_treatment(&args.treatment)
    }
}

pub fn load_panel(args: &DataArgs) -> Result<LoadedPanel> {
    let bytes = read_bytes(&args.data)?;
    let digest = sha256_hex(&bytes);
    let raw =
        read_panel_csv(bytes.as_slice(), &schema(args)).with_context(|| format!("loading {}", args.data.display()))?;
    let (dataset, schedule) = match &args.adoption {
        Some(path) => {
            let schedule = read_schedule_csv(read_bytes(path)?.as_slice())
                .with_context(|| format!("loading {}", path.display()))?;
            let ds = apply_adoption_schedule_with(&raw, &schedule, args.coding.adoption_coding())?;
            (ds, Some(schedule))
        }
        None => (raw, None),
    };
    Ok(LoadedPanel {
        dataset,
        schedule,
        digest,
    })
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fmt2(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

fn summarize_fit(fit: &TwfeFit, report: &WeightReport) {
    eprintln!(
        "beta {} ({}) [{}]  dof {}  n {}  treated {}",
        fmt2(Some(fit.beta)),
        fmt2(fit.se),
        fmt2(fit.p_value),
        fit.dof,
        fit.n_obs,
        fit.n_treated
    );
    eprintln!(
        "negative treated weights {} of {} ({:.2})",
        report.n_treated_negative, report.n_treated, report.share_treated_negative
    );
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub beta: f64,
    pub se: Option<f64>,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub dof: usize,
    pub n_obs: usize,
    pub n_treated: usize,
    pub clusters: usize,
    pub inference: Inference,
    pub dropped_regressors: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct WeightSummary {
    pub n_treated: usize,
    pub n_treated_negative: usize,
    pub share_treated_negative: f64,
    pub n_control_positive: usize,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum HomogeneitySummary {
    Test(HomogeneityTest),
    Unavailable { error: String },
}

#[derive(Debug, Serialize)]
pub struct ReportConfig {
    pub command: &'static str,
    #[serde(flatten)]
    pub args: EstimateArgs,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adoption_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub config: ReportConfig,
    pub fit: FitSummary,
    pub weights: WeightSummary,
    pub homogeneity: HomogeneitySummary,
    pub version: &'static str,
    pub input_digest: String,
}

pub fn build_report(args: &EstimateArgs, timestamp: Option<String>) -> Result<AnalysisReport> {
    let panel = load_panel(&args.data)?;
    let fit = fit_twfe(&panel.dataset, args.inference.cluster.inference())?;
    let report = weight_report_with_bins(&fit, args.bins)?;
    summarize_fit(&fit, &report);
    let (ci_low, ci_high) = match fit.se {
        Some(se) if fit.dof > 0 => {
            let half = t_critical(args.inference.level, fit.dof)? * se;
            (Some(fit.beta - half), Some(fit.beta + half))
        }
        _ => (None, None),
    };
    let homogeneity = match homogeneity_test(&fit, args.homogeneity_cluster.inference()) {
        Ok(h) => {
            eprintln!(
                "homogeneity: resid {} ({})  group {} ({})  interaction {} ({}) [{}]",
                fmt2(Some(h.resid_treatment.estimate)),
                fmt2(Some(h.resid_treatment.se)),
                fmt2(Some(h.treat_group.estimate)),
                fmt2(Some(h.treat_group.se)),
                fmt2(Some(h.interaction.estimate)),
                fmt2(Some(h.interaction.se)),
                fmt2(h.interaction.p_value)
            );
            HomogeneitySummary::Test(h)
        }
        Err(e) => {
            eprintln!("homogeneity test unavailable: {e}");
            HomogeneitySummary::Unavailable { error: e.to_string() }
        }
    };
    let adoption_digest = match &args.data.adoption {
        Some(p) => Some(sha256_hex(&read_bytes(p)?)),
        None => None,
    };
    Ok(AnalysisReport {
        config: ReportConfig {
            command: "estimate",
            args: args.clone(),
            adoption_digest,
            timestamp,
        },
        fit: FitSummary {
            beta: fit.beta,
            se: fit.se,
            t_stat: fit.t_stat,
            p_value: fit.p_value,
            ci_low,
            ci_high,
            dof: fit.dof,
            n_obs: fit.n_obs,
            n_treated: fit.n_treated,
            clusters: fit.clusters,
            inference: fit.inference,
            dropped_regressors: fit.dropped_regressors.clone(),
        },
        weights: WeightSummary {
            n_treated: report.n_treated,
            n_treated_negative: report.n_treated_negative,
            share_treated_negative: report.share_treated_negative,
            n_control_positive: report.n_control_positive,
        },
        homogeneity,
        version: VERSION,
        input_digest: panel.digest,
    })
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let timestamp = (!args.no_timestamp).then(|| chrono::Utc::now().to_rfc3339());
    let report = build_report(args, timestamp)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_output(args.out.as_deref(), json.as_bytes())
}

fn weights(args: &WeightsArgs) -> Result<()> {
    let panel = load_panel(&args.data)?;
    let fit = fit_twfe(&panel.dataset, Inference::Classical)?;
    let report = weight_report_with_bins(&fit, args.bins)?;
    let grid = weight_grid(&fit, &panel.schedule())?;
    summarize_fit(&fit, &report);
    create_dir(&args.out_dir)?;
    output::write_histogram(&args.out_dir.join("histogram.csv"), &report)?;
    output::write_weights(&args.out_dir.join("weights.csv"), &report)?;
    output::write_grid(&args.out_dir.join("grid.csv"), &grid)?;
    if let Some(p) = grid.first_negative_treated_period() {
        eprintln!("earliest negatively weighted treated period: {p}");
    }
    Ok(())
}

fn scatter(args: &ScatterArgs) -> Result<()> {
    let panel = load_panel(&args.data)?;
    let fit = fit_twfe(&panel.dataset, Inference::Classical)?;
    let sc = residual_scatter(&fit, args.bandwidth, args.grid)?;
    create_dir(&args.out_dir)?;
    output::write_scatter_points(&args.out_dir.join("scatter_points.csv"), &sc)?;
    output::write_scatter_lines(&args.out_dir.join("scatter_lines.csv"), &sc)?;
    output::write_scatter_smooth(&args.out_dir.join("scatter_smooth.csv"), &sc)?;
    for line in &sc.lines {
        eprintln!("{} slope {:.2} intercept {:.2}", line.group, line.slope, line.intercept);
    }
    Ok(())
}

fn sweep_options(args: &InferenceArgs) -> SweepOptions {
    SweepOptions::new(args.cluster.inference()).with_level(args.level)
}

fn finish_sweep(sweep: &RobustnessSweep, out: Option<&Path>) -> Result<()> {
    for s in &sweep.skipped {
        eprintln!("skipped {}: {}", s.label, s.reason);
    }
    eprintln!(
        "baseline beta {} ({}), {} point(s)",
        fmt2(Some(sweep.baseline.beta)),
        fmt2(sweep.baseline.se),
        sweep.points.len()
    );
    write_output(out, &output::sweep_csv(sweep)?)
}

fn sweep_endyear(args: &EndYearArgs) -> Result<()> {
    let panel = load_panel(&args.data)?;
    let periods = panel.dataset.periods();
    let (Some(&lo), Some(&hi)) = (periods.first(), periods.last()) else {
        bail!("panel has no periods");
    };
    let sweep = sweep_end_year(
        &panel.dataset,
        args.first.unwrap_or(lo),
        args.last.unwrap_or(hi),
        &sweep_options(&args.inference),
    )?;
    finish_sweep(&sweep, args.out.as_deref())
}

fn sweep_horizon(args: &HorizonArgs) -> Result<()> {
    let panel = load_panel(&args.data)?;
    let sweep = sweep_post_horizon(
        &panel.dataset,
        &panel.schedule(),
        &args.horizons,
        &sweep_options(&args.inference),
    )?;
    finish_sweep(&sweep, args.out.as_deref())
}

fn jackknife(args: &JackknifeArgs) -> Result<()> {
    let panel = load_panel(&args.data)?;
    let sweep = leave_one_unit_out(&panel.dataset, &sweep_options(&args.inference))?;
    finish_sweep(&sweep, args.out.as_deref())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: SyntheticSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let ds = generate_panel(&spec)?;
    let mut buf = Vec::new();
    write_panel_csv(&ds, &mut buf, &ColumnSchema::default())?;
    eprintln!(
        "{} units × {} periods, seed {}",
        ds.units().len(),
        ds.periods().len(),
        spec.seed
    );
    write_output(args.out.as_deref(), &buf)
}

fn validate(args: &ValidateArgs) -> Result<i32> {
    let bytes = read_bytes(&args.data.data)?;
    let rows = read_panel_rows(bytes.as_slice(), &schema(&args.data))
        .with_context(|| format!("loading {}", args.data.data.display()))?;
    let rows = match &args.data.adoption {
        Some(path) => {
            let schedule = read_schedule_csv(read_bytes(path)?.as_slice())
                .with_context(|| format!("loading {}", path.display()))?;
            let coding = args.data.coding.adoption_coding();
            rows.into_iter()
                .map(|mut o| {
                    let a = schedule
                        .get(&o.unit)
                        .with_context(|| format!("unit `{}` is not in the adoption schedule", o.unit))?;
                    o.treated = coding.is_treated(o.period, a);
                    Ok(o)
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => rows,
    };
    let report = validate_observations(&rows);
    for v in &report.violations {
        eprintln!("{:?}: {}", v.code, v.message);
    }
    eprintln!(
        "{} ({:?}, {} timing group(s))",
        if report.is_valid { "valid" } else { "invalid" },
        report.balance,
        report.timing_groups.len()
    );
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_output(args.out.as_deref(), json.as_bytes())?;
    Ok(if report.is_valid { 0 } else { 1 })
}
