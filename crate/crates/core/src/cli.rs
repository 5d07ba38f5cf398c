//! The `alohastab` command-line frontend.
//!
//! Inputs come from flags or from a JSON file given with `--config`; flags
//! override file values. Results are printed with five significant digits and,
//! when an output directory is known (`--out` or `ALOHASTAB_OUT`), written in
//! full precision as JSON (and CSV for tabular results). Every file embeds the
//! resolved configuration.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::{self, ExperimentError, SimBudget, SweepCsvRow, SweepResult};
use crate::meanfield::{self, ClassModel, ClassSpec, IntegrateOptions, MeanFieldError, MeanFieldState, ModulationSpeed};
use crate::region::{self, AttemptVector, CsmaParams, Direction, RegionError};
use crate::sim::{self, EstimateOptions, FiniteSystemSpec, SimError};

pub const OUT_ENV: &str = "ALOHASTAB_OUT";
const DEFAULT_OUT: &str = "alohastab-out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) | Self::Io(_) => 1,
            Self::Numerical(_) => 2,
        }
    }
}

impl From<RegionError> for CliError {
    fn from(e: RegionError) -> Self {
        match e {
            RegionError::NonConvergence(_) => Self::Numerical(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<MeanFieldError> for CliError {
    fn from(e: MeanFieldError) -> Self {
        match e {
            MeanFieldError::MassDrift { .. } | MeanFieldError::TailMass { .. } | MeanFieldError::Singular(_) => {
                Self::Numerical(e.to_string())
            }
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::BracketInvalid { .. } => Self::Numerical(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Region(e) => e.into(),
            ExperimentError::MeanField(e) => e.into(),
            ExperimentError::Sim(e) => e.into(),
            ExperimentError::Precondition(m) => Self::Invalid(m),
            ExperimentError::Output { .. } => Self::Io(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser, Serialize)]
#[command(name = "alohastab", version, about = "Stability regions of buffered Aloha and CSMA systems")]
pub struct Cli {
    /// Output directory (defaults to $ALOHASTAB_OUT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Stability and capacity regions.
    #[command(subcommand)]
    Region(RegionCmd),
    /// Mean-field roots, classification, integration and fixed points.
    #[command(subcommand)]
    Meanfield(MeanfieldCmd),
    /// Slot-level simulation.
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Scripted sweeps.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Debug, Subcommand, Serialize)]
pub enum RegionCmd {
    /// Largest total rate along a direction inside the approximate region.
    Sstar(RegionArgs),
    /// Membership of a rate vector in the approximate region.
    Contains(RegionArgs),
    /// Membership in the exact two-user region.
    Exact2(RegionArgs),
    /// Attempt probabilities placing a rate vector on the capacity boundary.
    Capacity(RegionArgs),
    /// Largest total rate along a direction for CSMA.
    Csma(RegionArgs),
    /// Closed form for k-homogeneous directions.
    Khom(RegionArgs),
}

#[derive(Debug, Args, Serialize, Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct RegionArgs {
    /// Attempt probabilities, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(default)]
    pub p: Option<Vec<f64>>,
    /// Traffic direction, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    /// Arrival rates, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    /// CSMA holding time in slots.
    #[arg(long)]
    #[serde(default)]
    pub sigma: Option<u32>,
    /// JSON file with any of the fields above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl RegionArgs {
    fn resolve(&self) -> Result<Self> {
        let mut base: Self = match &self.config {
            Some(path) => read_json(path)?,
            None => Self::default(),
        };
        if self.p.is_some() {
            base.p = self.p.clone();
        }
        if self.alpha.is_some() {
            base.alpha = self.alpha.clone();
        }
        if self.lambda.is_some() {
            base.lambda = self.lambda.clone();
        }
        if self.sigma.is_some() {
            base.sigma = self.sigma;
        }
        Ok(base)
    }

    fn p(&self) -> Result<AttemptVector> {
        let p = self.p.clone().ok_or_else(|| CliError::Invalid("--p is required".into()))?;
        Ok(AttemptVector::new(p)?)
    }

    fn alpha(&self) -> Result<Direction> {
        let a = self.alpha.as_ref().ok_or_else(|| CliError::Invalid("--alpha is required".into()))?;
        Ok(Direction::new(a)?)
    }

    fn lambda(&self) -> Result<&[f64]> {
        self.lambda.as_deref().ok_or_else(|| CliError::Invalid("--lambda is required".into()))
    }
}

#[derive(Debug, Subcommand, Serialize)]
pub enum MeanfieldCmd {
    /// Roots of gamma * exp(-gamma) = lambda / b.
    Roots {
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        b: f64,
    },
    /// Global stability verdict.
    Classify(ModelArgs),
    /// Integrate the mean-field equations.
    Integrate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 200.0)]
        tau_end: f64,
        #[arg(long, default_value_t = meanfield::DEFAULT_DT)]
        dt: f64,
        #[arg(long, default_value_t = meanfield::DEFAULT_K_MAX)]
        k_max: usize,
        /// Initial buffer level of every user.
        #[arg(long, default_value_t = 0)]
        start_level: usize,
        #[arg(long, default_value_t = 1.0)]
        sample_interval: f64,
    },
    /// Stationary points of the mean-field dynamics.
    FixedPoints {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = meanfield::DEFAULT_K_MAX)]
        k_max: usize,
    },
}

/// A class model from a JSON file, or unmodulated classes from flags.
#[derive(Debug, Args, Serialize, Clone, Default)]
pub struct ModelArgs {
    /// JSON class model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Class fractions (default: equal).
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    /// Scaled attempt rates per class.
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    /// Scaled arrival rates per class.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Slot availability.
    #[arg(long)]
    pub b: Option<f64>,
}

impl ModelArgs {
    fn with_defaults(p: f64, lambda: f64) -> Self {
        Self { p: Some(vec![p]), lambda: Some(vec![lambda]), ..Self::default() }
    }

    fn resolve(&self) -> Result<ClassModel> {
        if let Some(path) = &self.config {
            let model: ClassModel = read_json(path)?;
            return Ok(match self.b {
                Some(b) => ClassModel::new(model.classes().to_vec(), model.speed(), b)?,
                None => model,
            });
        }
        let p = self.p.as_ref().ok_or_else(|| CliError::Invalid("--p or --config is required".into()))?;
        let lambda = self.lambda.as_ref().ok_or_else(|| CliError::Invalid("--lambda is required".into()))?;
        if p.len() != lambda.len() {
            return Err(CliError::Invalid("--p and --lambda must have the same length".into()));
        }
        let v = p.len();
        let beta = self.beta.clone().unwrap_or_else(|| vec![1.0 / v as f64; v]);
        if beta.len() != v {
            return Err(CliError::Invalid("--beta must have one entry per class".into()));
        }
        let classes = (0..v).map(|i| ClassSpec::plain(beta[i], p[i], lambda[i])).collect();
        Ok(ClassModel::new(classes, ModulationSpeed::Fast, self.b.unwrap_or(1.0))?)
    }
}

#[derive(Debug, Subcommand, Serialize)]
pub enum SimulateCmd {
    /// One simulation run.
    Run {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 1_000_000)]
        slots: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        checkpoint: u64,
    },
    /// Bisection for the simulated stability limit along a direction.
    EstimateSstar {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long)]
        low: f64,
        #[arg(long)]
        high: f64,
        #[arg(long, default_value_t = 10_000_000)]
        slots: u64,
        #[arg(long, default_value_t = 3)]
        replications: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        resolution: f64,
    },
}

/// A finite system from a JSON file, or Bernoulli users from flags.
#[derive(Debug, Args, Serialize, Clone)]
pub struct SystemArgs {
    /// JSON system description.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    /// Bernoulli arrival rates (ignored by estimate-sstar).
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long)]
    pub sigma: Option<u32>,
    #[arg(long)]
    pub b: Option<f64>,
}

impl SystemArgs {
    fn resolve(&self) -> Result<FiniteSystemSpec> {
        let mut spec = match &self.config {
            Some(path) => read_json::<FiniteSystemSpec>(path)?,
            None => {
                let p = self.p.as_ref().ok_or_else(|| CliError::Invalid("--p or --config is required".into()))?;
                let lambda = self.lambda.clone().unwrap_or_else(|| vec![0.0; p.len()]);
                if lambda.len() != p.len() {
                    return Err(CliError::Invalid("--p and --lambda must have the same length".into()));
                }
                FiniteSystemSpec::bernoulli(p, &lambda)
            }
        };
        if let Some(s) = self.sigma {
            spec.sigma = s;
        }
        if let Some(b) = self.b {
            spec.b = b;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Subcommand, Serialize)]
pub enum ExperimentCmd {
    /// Three users, p = 1/3, rates (1, (1 + 1/x)/2, 1/x).
    Example1 {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,50")]
        x: Vec<f64>,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// As example1 with p = (0.6, 0.3, 0.1).
    Example2 {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2,5,6.714285714285714,8,10")]
        x: Vec<f64>,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// N users, p = 1/N, linearly decreasing traffic.
    Example3 {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8,9,10")]
        n: Vec<usize>,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Finite-N approximate region versus its mean-field limit.
    FiniteRegion {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "10,20,50,100,200,500,1000")]
        n: Vec<usize>,
    },
    /// Two coexisting attractors of a model that is not globally stable.
    Bistability {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = meanfield::DEFAULT_K_MAX)]
        k_max: usize,
        #[arg(long, default_value_t = 100.0)]
        tau_end: f64,
    },
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct BudgetArgs {
    /// Also estimate the limit by simulation.
    #[arg(long)]
    pub simulate: bool,
    #[arg(long, default_value_t = 10_000_000)]
    pub slots: u64,
    #[arg(long, default_value_t = 3)]
    pub replications: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl BudgetArgs {
    fn budget(&self) -> Option<SimBudget> {
        self.simulate.then(|| SimBudget {
            slots: self.slots,
            replications: self.replications,
            seed: self.seed,
            ..SimBudget::default()
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Formats with five significant digits.
pub fn sig5(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = 4 - magnitude;
    if (0..=10).contains(&decimals) {
        format!("{x:.*}", decimals as usize)
    } else {
        format!("{x:.4e}")
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| sig5(x)).collect();
    format!("[{}]", parts.join(", "))
}

struct Output {
    dir: Option<PathBuf>,
    config: serde_json::Value,
}

#[derive(Serialize)]
struct Record<'a, T: Serialize> {
    command: &'a str,
    config: &'a serde_json::Value,
    result: &'a T,
}

impl Output {
    fn json<T: Serialize>(&self, name: &str, result: &T) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let record = Record { command: name, config: &self.config, result };
        experiments::write_json(&dir.join(format!("{name}.json")), &record).map_err(CliError::from)
    }

    fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        experiments::write_csv_with_config(&dir.join(format!("{name}.csv")), &self.config, rows).map_err(CliError::from)
    }
}

fn output_dir(cli: &Cli, always: bool) -> Result<Option<PathBuf>> {
    let dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| always.then(|| PathBuf::from(DEFAULT_OUT)));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| CliError::Io(format!("cannot create {}: {e}", d.display())))?;
    }
    Ok(dir)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Region(cmd) => region_cmd(cli, cmd),
        Command::Meanfield(cmd) => meanfield_cmd(cli, cmd),
        Command::Simulate(cmd) => simulate_cmd(cli, cmd),
        Command::Experiment(cmd) => experiment_cmd(cli, cmd),
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn region_cmd(cli: &Cli, cmd: &RegionCmd) -> Result<()> {
    let (name, args) = match cmd {
        RegionCmd::Sstar(a) => ("region-sstar", a),
        RegionCmd::Contains(a) => ("region-contains", a),
        RegionCmd::Exact2(a) => ("region-exact2", a),
        RegionCmd::Capacity(a) => ("region-capacity", a),
        RegionCmd::Csma(a) => ("region-csma", a),
        RegionCmd::Khom(a) => ("region-khom", a),
    };
    let args = args.resolve()?;
    let out = Output { dir: output_dir(cli, false)?, config: to_value(&args) };
    match cmd {
        RegionCmd::Sstar(_) => {
            let r = region::shat_star(&args.alpha()?, &args.p()?)?;
            println!("s_star = {}  i_star = {}", sig5(r.s_star), r.i_star + 1);
            println!("rho = {}", fmt_vec(r.rho_star.as_slice()));
            out.json(name, &r)
        }
        RegionCmd::Contains(_) => {
            let inside = region::approx_region_contains(args.lambda()?, &args.p()?)?;
            println!("contains = {inside}");
            out.json(name, &inside)
        }
        RegionCmd::Exact2(_) => {
            let inside = region::exact_region2_contains(args.lambda()?, &args.p()?)?;
            println!("contains = {inside}");
            out.json(name, &inside)
        }
        RegionCmd::Capacity(_) => {
            let sol = region::capacity_region_solve(args.lambda()?)?;
            println!("status = {:?}  iterations = {}", sol.status, sol.iterations);
            if let Some(p) = &sol.p {
                println!("p = {}", fmt_vec(p.as_slice()));
            }
            out.json(name, &sol)
        }
        RegionCmd::Csma(_) => {
            let sigma = CsmaParams::new(args.sigma.unwrap_or(1))?;
            let s = region::csma_shat_star(&args.alpha()?, &args.p()?, sigma)?;
            println!("s_star = {}  sigma = {}", sig5(s), sigma.sigma());
            out.json(name, &s)
        }
        RegionCmd::Khom(_) => {
            let s = region::k_homogeneous_sstar(&args.alpha()?, &args.p()?)?;
            println!("s_star = {}", sig5(s));
            out.json(name, &s)
        }
    }
}

fn meanfield_cmd(cli: &Cli, cmd: &MeanfieldCmd) -> Result<()> {
    match cmd {
        MeanfieldCmd::Roots { lambda, b } => {
            let out = Output { dir: output_dir(cli, false)?, config: to_value(cmd) };
            let (lo, hi) = meanfield::gamma_roots(*lambda, *b)?;
            println!("gamma_lower = {}  gamma_upper = {}", sig5(lo), sig5(hi));
            out.json("meanfield-roots", &(lo, hi))
        }
        MeanfieldCmd::Classify(m) => {
            let model = m.resolve()?;
            let out = Output { dir: output_dir(cli, false)?, config: to_value(&model) };
            let v = meanfield::classify_stability(&model);
            println!("verdict = {:?}", v.verdict);
            println!(
                "zeta = {}  gamma_lower = {}  gamma_upper = {}",
                sig5(v.zeta),
                v.gamma_lower.map_or("-".into(), sig5),
                v.gamma_upper.map_or("-".into(), sig5)
            );
            println!("margins = {}", fmt_vec(&v.witnesses));
            out.json("meanfield-classify", &v)
        }
        MeanfieldCmd::Integrate { model, tau_end, dt, k_max, start_level, sample_interval } => {
            let m = model.resolve()?;
            let config = serde_json::json!({
                "model": to_value(&m), "tau_end": tau_end, "dt": dt, "k_max": k_max,
                "start_level": start_level, "sample_interval": sample_interval,
            });
            let out = Output { dir: output_dir(cli, true)?, config };
            let q0 = MeanFieldState::point_mass(&m, *k_max, *start_level)?;
            let opts = IntegrateOptions::new(*tau_end).dt(*dt).sample_interval(*sample_interval);
            let tr = meanfield::mf_integrate(&q0, &m, &opts)?;
            let last = tr.samples.last().expect("at least one sample");
            println!("tau = {}  gamma = {}  W = {}", sig5(last.tau), sig5(last.gamma), sig5(last.workload));
            println!("max workload residual = {}", sig5(tr.max_workload_residual));
            #[derive(Serialize)]
            struct Row {
                tau: f64,
                gamma: f64,
                w: f64,
                q0: String,
            }
            let rows: Vec<Row> = tr
                .samples
                .iter()
                .map(|s| Row {
                    tau: s.tau,
                    gamma: s.gamma,
                    w: s.workload,
                    q0: s.empty_prob.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(";"),
                })
                .collect();
            out.csv("meanfield-trajectory", &rows)?;
            out.json("meanfield-integrate", &serde_json::json!({
                "final_gamma": last.gamma,
                "final_workload": last.workload,
                "max_workload_residual": tr.max_workload_residual,
                "max_mass_drift": tr.max_mass_drift,
                "tail_mass": tr.final_state.tail_mass(),
            }))
        }
        MeanfieldCmd::FixedPoints { model, k_max } => {
            let m = model.resolve()?;
            let out = Output { dir: output_dir(cli, false)?, config: serde_json::json!({"model": to_value(&m), "k_max": k_max}) };
            let points = meanfield::fixed_points(&m, *k_max)?;
            if points.is_empty() {
                println!("no fixed points");
            }
            let mut summary = Vec::new();
            for fp in &points {
                let residual = meanfield::mf_derivative(&fp.state, &m)?.sup_norm();
                println!("{:?}: gamma = {}  W = {}  residual = {}", fp.kind, sig5(fp.gamma), sig5(fp.state.workload(&m)), sig5(residual));
                summary.push(serde_json::json!({
                    "kind": fp.kind, "gamma": fp.gamma, "workload": fp.state.workload(&m), "derivative_sup_norm": residual,
                    "empty_prob": (0..fp.state.class_count()).map(|v| fp.state.empty_prob(v)).collect::<Vec<_>>(),
                }));
            }
            out.json("meanfield-fixed-points", &summary)
        }
    }
}

fn simulate_cmd(cli: &Cli, cmd: &SimulateCmd) -> Result<()> {
    match cmd {
        SimulateCmd::Run { system, slots, seed, checkpoint } => {
            let spec = system.resolve()?;
            let config = serde_json::json!({"system": to_value(&spec), "slots": slots, "seed": seed, "checkpoint": checkpoint});
            let out = Output { dir: output_dir(cli, true)?, config };
            let report = sim::run_sim(&spec, *slots, *seed, *checkpoint)?;
            let throughput: Vec<f64> = (0..spec.users.len()).map(|i| report.throughput(i)).collect();
            println!("throughput = {}", fmt_vec(&throughput));
            println!("final backlog = {:?}", report.final_backlog);
            if report.trace.len() >= sim::MIN_CHECKPOINTS {
                let d = sim::drift_test(&report.trace, spec.total_rate())?;
                println!("drift slope = {} ± {}  verdict = {:?}", sig5(d.slope), sig5(d.std_error), d.verdict);
            }
            if let Some(dir) = &out.dir {
                let path = dir.join("simulate-trace.csv");
                let mut buf = format!("# config: {}\n", out.config).into_bytes();
                report.trace.write_csv(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
                std::fs::write(&path, buf).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            out.json("simulate-run", &report)
        }
        SimulateCmd::EstimateSstar { system, alpha, low, high, slots, replications, seed, resolution } => {
            let spec = system.resolve()?;
            let alpha = Direction::new(alpha)?;
            let config = serde_json::json!({
                "system": to_value(&spec), "alpha": alpha.as_slice(), "bracket": [low, high], "slots": slots,
                "replications": replications, "seed": seed, "resolution": resolution,
            });
            let out = Output { dir: output_dir(cli, true)?, config };
            let mut opts = EstimateOptions::new(*slots, *replications, *seed);
            opts.resolution = *resolution;
            let est = sim::estimate_sstar_sim(&alpha, &spec, (*low, *high), &opts)?;
            println!("s_hat = {} ± {}{}", sig5(est.s_hat), sig5(est.half_width), if est.inconclusive { " (inconclusive)" } else { "" });
            out.json("simulate-estimate", &est)
        }
    }
}

fn print_sweep(result: &SweepResult) {
    for r in &result.rows {
        match r.s_simulated {
            None => println!(
                "{} = {}  s_star = {}  closed form = {}  saturated user = {}",
                if result.name == "example3" { "N" } else { "x" },
                sig5(r.param),
                sig5(r.s_analytic),
                sig5(r.s_closed_form),
                r.saturated_user
            ),
            Some(s) => println!(
                "  simulated ({:?}) at {} = {} ± {}",
                r.arrival_model.expect("simulated rows carry a model"),
                sig5(r.param),
                sig5(s),
                sig5(r.half_width.unwrap_or(f64::NAN))
            ),
        }
    }
}

fn write_sweep(out: &Output, result: &SweepResult, budget: Option<SimBudget>) -> Result<()> {
    let rows: Vec<SweepCsvRow> = result.rows.iter().map(SweepCsvRow::from).collect();
    out.csv(&result.name, &rows)?;
    let Some(dir) = &out.dir else { return Ok(()) };
    let manifest = experiments::Manifest {
        experiment: result.name.clone(),
        config: out.config.clone(),
        budget,
        tolerances: serde_json::json!({ "closed_form": experiments::CLOSED_FORM_TOL }),
        files: vec![format!("{}.csv", result.name)],
    };
    experiments::write_json(&dir.join(format!("{}-manifest.json", result.name)), &manifest)?;
    Ok(())
}

fn experiment_cmd(cli: &Cli, cmd: &ExperimentCmd) -> Result<()> {
    let out = Output { dir: output_dir(cli, true)?, config: to_value(cmd) };
    match cmd {
        ExperimentCmd::Example1 { x, budget } => {
            let r = experiments::example1(x, budget.budget().as_ref())?;
            print_sweep(&r);
            write_sweep(&out, &r, budget.budget())
        }
        ExperimentCmd::Example2 { x, budget } => {
            let r = experiments::example2(x, budget.budget().as_ref())?;
            print_sweep(&r);
            println!("saturated user switches at 47/7: {}", experiments::example2_switch_holds()?);
            write_sweep(&out, &r, budget.budget())
        }
        ExperimentCmd::Example3 { n, budget } => {
            let r = experiments::example3(n, budget.budget().as_ref())?;
            print_sweep(&r);
            write_sweep(&out, &r, budget.budget())
        }
        ExperimentCmd::FiniteRegion { model, n } => {
            let model = if model.p.is_none() && model.config.is_none() { ModelArgs::with_defaults(1.0, 0.2) } else { model.clone() };
            let m = model.resolve()?;
            let out = Output { config: serde_json::json!({"model": to_value(&m), "n": n}), ..out };
            let t = experiments::finite_region_check(&m, n)?;
            for r in &t.rows {
                println!("N = {}  s_N = {}  s_inf = {}  (s_N - s_inf) N = {}", r.n, sig5(r.s_finite), sig5(r.s_limit), sig5(r.scaled_gap));
            }
            out.csv("finite-region", &t.rows)?;
            out.json("finite-region", &t)
        }
        ExperimentCmd::Bistability { model, k_max, tau_end } => {
            let model = if model.p.is_none() && model.config.is_none() { ModelArgs::with_defaults(3.0, 0.2) } else { model.clone() };
            let m = model.resolve()?;
            let out = Output { config: serde_json::json!({"model": to_value(&m), "k_max": k_max, "tau_end": tau_end}), ..out };
            let r = experiments::bistability_demo(&m, *k_max, *tau_end)?;
            println!("from empty: gamma -> {}  (lower root {})", sig5(r.from_empty), sig5(r.gamma_lower));
            println!("from upper fixed point: gamma -> {}  (upper root {})", sig5(r.from_upper), sig5(r.gamma_upper));
            println!("gap = {}", sig5(r.gap));
            out.json("bistability", &r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_significant_digits() {
        assert_eq!(sig5(4.0 / 9.0), "0.44444");
        assert_eq!(sig5(2.542641357773), "2.5426");
        assert_eq!(sig5(0.25917110181907), "0.25917");
        assert_eq!(sig5(1234567.0), "1.2346e6");
        assert_eq!(sig5(0.0), "0");
    }

    #[test]
    fn missing_config_is_a_validation_error() {
        let code = run(["alohastab", "simulate", "run", "--config", "/nonexistent/missing.json"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn unknown_flag_is_a_validation_error() {
        assert_eq!(run(["alohastab", "region", "sstar", "--bogus"]), 1);
    }

    #[test]
    fn supercritical_roots_rejected() {
        assert_eq!(run(["alohastab", "meanfield", "roots", "--lambda", "0.5"]), 1);
    }
}
