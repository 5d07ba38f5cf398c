//! Scripted sweeps: the three worked examples, the finite-N versus mean-field
//! region comparison and the bistability demonstration.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::meanfield::{
    classify_stability, fixed_points, mf_integrate, ClassModel, FixedPointKind, IntegrateOptions, MeanFieldError,
    MeanFieldState, Verdict,
};
use crate::region::{shat_star, AttemptVector, Direction, RegionError};
use crate::sim::{estimate_sstar_sim, ArrivalModel, EstimateOptions, FiniteSystemSpec, SimError, UserSpec};

/// Agreement required between a closed form and the generic solver.
pub const CLOSED_FORM_TOL: f64 = 1e-10;
/// Mixture parameter of the bursty arrival model.
pub const MIXTURE_A: f64 = 0.2;
/// Attempt-probability switch point of the skewed three-user example.
pub const EXAMPLE2_BREAK: f64 = 47.0 / 7.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Simulation budget for the simulated column of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SimBudget {
    pub slots: u64,
    pub replications: u32,
    pub seed: u64,
    /// Relative bracket around the analytic value used to start the bisection.
    pub bracket: f64,
}

impl Default for SimBudget {
    fn default() -> Self {
        Self { slots: 10_000_000, replications: 3, seed: 1, bracket: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalTag {
    Bernoulli,
    HyperGeometric,
}

impl ArrivalTag {
    fn model(self) -> ArrivalModel {
        match self {
            Self::Bernoulli => ArrivalModel::Bernoulli { lambda: 0.0 },
            Self::HyperGeometric => ArrivalModel::HyperGeometric { lambda: 0.0, a: MIXTURE_A },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// `x` for the first two examples, `N` for the third.
    pub param: f64,
    pub s_analytic: f64,
    pub s_closed_form: f64,
    /// Saturated user at the boundary, 1-based.
    pub saturated_user: usize,
    pub arrival_model: Option<ArrivalTag>,
    pub s_simulated: Option<f64>,
    pub half_width: Option<f64>,
    pub inconclusive: bool,
    /// Base seed of the simulated estimate; replication `r` used `seed + r`.
    pub seed: Option<u64>,
}

impl SweepRow {
    pub fn closed_form_gap(&self) -> f64 {
        (self.s_analytic - self.s_closed_form).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub name: String,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Largest closed-form discrepancy over the analytic rows.
    pub fn max_closed_form_gap(&self) -> f64 {
        self.rows.iter().map(SweepRow::closed_form_gap).fold(0.0, f64::max)
    }
}

/// Rates `(1, (1 + 1/x)/2, 1/x)`, normalized.
pub fn example1_direction(x: f64) -> Result<Direction> {
    Ok(Direction::new(&[1.0, (1.0 + 1.0 / x) / 2.0, 1.0 / x])?)
}

pub fn example1_closed_form(x: f64) -> f64 {
    4.0 * x * (x + 1.0) / ((2.0 * x + 1.0) * (5.0 * x + 1.0))
}

pub fn example1_attempts() -> AttemptVector {
    AttemptVector::uniform(3, 1.0 / 3.0).expect("valid probability")
}

pub fn example2_attempts() -> AttemptVector {
    AttemptVector::new(vec![0.6, 0.3, 0.1]).expect("valid probabilities")
}

/// Reference piecewise expression for the skewed-attempt example. Its lower
/// branch does not match the computed boundary; the upper one does.
pub fn example2_closed_form(x: f64) -> f64 {
    if x < EXAMPLE2_BREAK {
        7.2 * x * (x + 1.0) / ((7.0 * x + 3.0) * (2.0 * x + 3.0))
    } else {
        44.1 * (x + 1.0).powi(2) / ((13.0 * x + 7.0) * (7.0 * x + 13.0))
    }
}

/// Linearly decreasing traffic shares `alpha_i ∝ N + 1 - i`.
pub fn example3_direction(n: usize) -> Result<Direction> {
    let raw: Vec<f64> = (1..=n).map(|i| (n + 1 - i) as f64).collect();
    Ok(Direction::new(&raw)?)
}

pub fn example3_attempts(n: usize) -> Result<AttemptVector> {
    Ok(AttemptVector::uniform(n, 1.0 / n as f64)?)
}

pub fn example3_closed_form(alpha: &[f64]) -> f64 {
    let n = alpha.len() as f64;
    let a1 = alpha[0];
    let product: f64 = alpha[1..].iter().map(|a| 1.0 - a / (a + (n - 1.0) * a1)).product();
    product / (n * a1)
}

fn spec_for(p: &AttemptVector, tag: ArrivalTag) -> FiniteSystemSpec {
    FiniteSystemSpec {
        users: p.as_slice().iter().map(|&p| UserSpec { p, arrivals: tag.model() }).collect(),
        b: 1.0,
        sigma: 1,
        saturated: Default::default(),
        initial_backlog: Vec::new(),
    }
}

/// Simulated boundary along `alpha`; retries once with a doubled bracket.
fn simulate_point(
    alpha: &Direction,
    p: &AttemptVector,
    tag: ArrivalTag,
    s_analytic: f64,
    budget: &SimBudget,
    seed: u64,
) -> Result<(f64, f64, bool)> {
    let template = spec_for(p, tag);
    let opts = EstimateOptions::new(budget.slots, budget.replications, seed);
    let mut width = budget.bracket;
    loop {
        let bracket = (s_analytic * (1.0 - width), s_analytic * (1.0 + width));
        match estimate_sstar_sim(alpha, &template, bracket, &opts) {
            Ok(est) => return Ok((est.s_hat, est.half_width, est.inconclusive)),
            Err(SimError::BracketInvalid { .. }) if width < 2.0 * budget.bracket => width *= 2.0,
            Err(e) => return Err(e.into()),
        }
    }
}

struct Point {
    param: f64,
    alpha: Direction,
    p: AttemptVector,
    closed: f64,
}

fn sweep(name: &str, points: Vec<Point>, budget: Option<&SimBudget>, models: &[ArrivalTag]) -> Result<SweepResult> {
    let mut rows = Vec::new();
    let mut jobs = Vec::new();
    for (k, pt) in points.iter().enumerate() {
        let r = shat_star(&pt.alpha, &pt.p)?;
        let base = SweepRow {
            param: pt.param,
            s_analytic: r.s_star,
            s_closed_form: pt.closed,
            saturated_user: r.i_star + 1,
            arrival_model: None,
            s_simulated: None,
            half_width: None,
            inconclusive: false,
            seed: None,
        };
        if let Some(budget) = budget {
            // same seed for every arrival model at a point: common random numbers
            let seed = budget.seed.wrapping_add(1000 * k as u64);
            for &tag in models {
                jobs.push((k, tag, seed, base.clone()));
            }
        }
        rows.push(base);
    }
    if let Some(budget) = budget {
        let simulated: Vec<SweepRow> = jobs
            .into_par_iter()
            .map(|(k, tag, seed, mut row)| {
                let pt = &points[k];
                let (s, hw, inconclusive) = simulate_point(&pt.alpha, &pt.p, tag, row.s_analytic, budget, seed)?;
                row.arrival_model = Some(tag);
                row.s_simulated = Some(s);
                row.half_width = Some(hw);
                row.inconclusive = inconclusive;
                row.seed = Some(seed);
                Ok(row)
            })
            .collect::<Result<_>>()?;
        rows.extend(simulated);
    }
    Ok(SweepResult { name: name.to_string(), rows })
}

/// Three users with `p_i = 1/3` and rates `lambda (1, (1 + 1/x)/2, 1/x)`.
pub fn example1(x_values: &[f64], budget: Option<&SimBudget>) -> Result<SweepResult> {
    let points = x_values
        .iter()
        .map(|&x| {
            if !(x >= 1.0) {
                return Err(ExperimentError::Precondition(format!("x = {x} must be at least 1")));
            }
            Ok(Point { param: x, alpha: example1_direction(x)?, p: example1_attempts(), closed: example1_closed_form(x) })
        })
        .collect::<Result<Vec<_>>>()?;
    sweep("example1", points, budget, &[ArrivalTag::Bernoulli, ArrivalTag::HyperGeometric])
}

/// Same rates as [`example1`] with attempt probabilities `(0.6, 0.3, 0.1)`.
pub fn example2(x_values: &[f64], budget: Option<&SimBudget>) -> Result<SweepResult> {
    let points = x_values
        .iter()
        .map(|&x| {
            if !(0.1..=10.0).contains(&x) {
                return Err(ExperimentError::Precondition(format!("x = {x} outside [0.1, 10]")));
            }
            Ok(Point { param: x, alpha: example1_direction(x)?, p: example2_attempts(), closed: example2_closed_form(x) })
        })
        .collect::<Result<Vec<_>>>()?;
    sweep("example2", points, budget, &[ArrivalTag::Bernoulli, ArrivalTag::HyperGeometric])
}

/// `N` users with `p_i = 1/N` and linearly decreasing traffic shares.
pub fn example3(n_values: &[usize], budget: Option<&SimBudget>) -> Result<SweepResult> {
    let points = n_values
        .iter()
        .map(|&n| {
            if n < 2 {
                return Err(ExperimentError::Precondition(format!("N = {n} must be at least 2")));
            }
            let alpha = example3_direction(n)?;
            let closed = example3_closed_form(alpha.as_slice());
            Ok(Point { param: n as f64, alpha, p: example3_attempts(n)?, closed })
        })
        .collect::<Result<Vec<_>>>()?;
    sweep("example3", points, budget, &[ArrivalTag::Bernoulli])
}

/// Whether the saturated user switches from user 3 to user 2 exactly at `47/7`.
pub fn example2_switch_holds() -> Result<bool> {
    let p = example2_attempts();
    let below = shat_star(&example1_direction(EXAMPLE2_BREAK * (1.0 - 1e-9))?, &p)?;
    let above = shat_star(&example1_direction(EXAMPLE2_BREAK * (1.0 + 1e-9))?, &p)?;
    Ok(below.i_star == 2 && above.i_star == 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub s_finite: f64,
    pub s_limit: f64,
    /// `(s_finite - s_limit) * N`.
    pub scaled_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub max_scaled_gap: f64,
    pub min_scaled_gap: f64,
}

/// Total rate `sum_v beta_v lambda_v` at the boundary of the mean-field region
/// along the ray through the model's own class rates.
pub fn meanfield_ray_limit(model: &ClassModel) -> Result<f64> {
    let d = class_direction(model)?;
    let classes = model.classes();
    let key = |v: usize| d[v] / classes[v].p;
    let star = (0..classes.len())
        .filter(|&v| d[v] > 0.0)
        .max_by(|&a, &b| key(a).total_cmp(&key(b)))
        .ok_or_else(|| ExperimentError::Precondition("all class rates are zero".into()))?;
    let top = key(star);
    let exponent: f64 = classes.iter().enumerate().map(|(v, c)| c.beta * c.p * key(v) / top).sum();
    Ok(model.b() * classes[star].p * (-exponent).exp() / d[star])
}

fn class_direction(model: &ClassModel) -> Result<Vec<f64>> {
    let load = model.load();
    if !(load > 0.0) {
        return Err(ExperimentError::Precondition("model has zero load; the ray is undefined".into()));
    }
    Ok(model.classes().iter().map(|c| c.lambda / load).collect())
}

/// Same quantity for the explicit system of `n` users, `round(beta_v n)` in
/// class `v`, each attempting with probability `p_v / n`.
pub fn finite_ray_limit(model: &ClassModel, n: usize) -> Result<f64> {
    let d = class_direction(model)?;
    let mut p = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for (v, c) in model.classes().iter().enumerate() {
        let count = c.beta * n as f64;
        if (count - count.round()).abs() > 1e-9 {
            return Err(ExperimentError::Precondition(format!("beta_{} * N = {count} is not an integer", v + 1)));
        }
        if c.p >= n as f64 {
            return Err(ExperimentError::Precondition(format!("N = {n} too small for p = {}", c.p)));
        }
        for _ in 0..count.round() as usize {
            p.push(c.p / n as f64);
            alpha.push(d[v]);
        }
    }
    // total slot rate equals sum_v beta_v lambda_v, so no rescaling is needed
    let r = shat_star(&Direction::new(&alpha)?, &AttemptVector::new(p)?)?;
    Ok(model.b() * r.s_star)
}

pub fn finite_region_check(model: &ClassModel, n_values: &[usize]) -> Result<ConvergenceTable> {
    let s_limit = meanfield_ray_limit(model)?;
    let rows = n_values
        .par_iter()
        .map(|&n| {
            let s_finite = finite_ray_limit(model, n)?;
            Ok(ConvergenceRow { n, s_finite, s_limit, scaled_gap: (s_finite - s_limit) * n as f64 })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_scaled_gap = rows.iter().map(|r| r.scaled_gap).fold(f64::NEG_INFINITY, f64::max);
    let min_scaled_gap = rows.iter().map(|r| r.scaled_gap).fold(f64::INFINITY, f64::min);
    Ok(ConvergenceTable { rows, max_scaled_gap, min_scaled_gap })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BistabilityReport {
    pub gamma_lower: f64,
    pub gamma_upper: f64,
    /// Limit of the trajectory started from empty buffers.
    pub from_empty: f64,
    /// Limit of the trajectory started at the upper fixed point.
    pub from_upper: f64,
    pub gap: f64,
    pub tau_end: f64,
}

/// Integrates from the empty state and from the upper fixed point of a model
/// that is not globally stable, and reports both limits.
pub fn bistability_demo(model: &ClassModel, k_max: usize, tau_end: f64) -> Result<BistabilityReport> {
    let verdict = classify_stability(model);
    if verdict.verdict != Verdict::NotGloballyStable {
        return Err(ExperimentError::Precondition(format!(
            "model is classified {:?}, not NotGloballyStable",
            verdict.verdict
        )));
    }
    let points = fixed_points(model, k_max)?;
    let upper = points
        .iter()
        .find(|f| f.kind == FixedPointKind::Upper)
        .ok_or_else(|| ExperimentError::Precondition("no upper fixed point exists".into()))?;
    let lower = points
        .iter()
        .find(|f| f.kind == FixedPointKind::Lower)
        .ok_or_else(|| ExperimentError::Precondition("no lower fixed point exists".into()))?;
    let opts = IntegrateOptions::new(tau_end);
    let from_empty = mf_integrate(&MeanFieldState::empty(model, k_max), model, &opts)?.final_gamma();
    let from_upper = mf_integrate(&upper.state, model, &opts)?.final_gamma();
    Ok(BistabilityReport {
        gamma_lower: lower.gamma,
        gamma_upper: upper.gamma,
        from_empty,
        from_upper,
        gap: (from_upper - from_empty).abs(),
        tau_end,
    })
}

/// Writes a CSV whose first line is `# config: <json>`.
pub fn write_csv_with_config<S: Serialize>(path: &Path, config: &serde_json::Value, rows: &[S]) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| ExperimentError::Output { path: path.to_path_buf(), message: e.to_string() };
    let mut file = std::fs::File::create(path).map_err(|e| fail(&e))?;
    writeln!(file, "# config: {config}").map_err(|e| fail(&e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| fail(&e))?;
    }
    w.flush().map_err(|e| fail(&e))?;
    Ok(())
}

/// Serializes `value` as pretty JSON.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| ExperimentError::Output { path: path.to_path_buf(), message: e.to_string() };
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(&e))?;
    std::fs::write(path, text + "\n").map_err(|e| fail(&e))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub config: serde_json::Value,
    pub budget: Option<SimBudget>,
    pub tolerances: serde_json::Value,
    pub files: Vec<String>,
}

/// Flat CSV view of a sweep row.
#[derive(Debug, Serialize)]
pub struct SweepCsvRow {
    pub param: f64,
    pub s_analytic: f64,
    pub s_closed_form: f64,
    pub saturated_user: usize,
    pub arrival_model: String,
    pub s_simulated: Option<f64>,
    pub half_width: Option<f64>,
    pub inconclusive: bool,
    pub seed: Option<u64>,
}

impl From<&SweepRow> for SweepCsvRow {
    fn from(r: &SweepRow) -> Self {
        Self {
            param: r.param,
            s_analytic: r.s_analytic,
            s_closed_form: r.s_closed_form,
            saturated_user: r.saturated_user,
            arrival_model: match r.arrival_model {
                None => "analytic".into(),
                Some(ArrivalTag::Bernoulli) => "bernoulli".into(),
                Some(ArrivalTag::HyperGeometric) => "hypergeometric".into(),
            },
            s_simulated: r.s_simulated,
            half_width: r.half_width,
            inconclusive: r.inconclusive,
            seed: r.seed,
        }
    }
}
