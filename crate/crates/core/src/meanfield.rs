//! Mean-field limit of a large buffered Aloha system.
//!
//! Users are grouped in classes. In the limit each class-`v` queue behaves like
//! an M/M/1 queue (or a Markov-modulated one) whose service rate
//! `b * p_v * exp(-gamma)` depends on the aggregate attempt intensity
//! `gamma = sum_v beta_v p_v (1 - Q_{v,0})`. This module integrates the
//! resulting Kolmogorov equations, computes their fixed points, and classifies
//! global stability from the roots of `gamma * exp(-gamma) = lambda / b`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used by the classifier to call a comparison an equality.
pub const CLASSIFY_TOL: f64 = 1e-9;

/// Residual target of the root bisection.
pub const ROOT_TOL: f64 = 1e-12;

pub const DEFAULT_K_MAX: usize = 200;
pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_TAIL_LIMIT: f64 = 1e-4;
pub const DEFAULT_MASS_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanFieldError {
    #[error("supercritical load: lambda / b = {0} exceeds 1/e")]
    Supercritical(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("queue load {0} is not below one")]
    Overloaded(f64),
    #[error("state layout does not match the model")]
    LayoutMismatch,
    #[error("mass drift {drift:.3e} in class {class} exceeds {limit:.1e}; decrease dt")]
    MassDrift { class: usize, drift: f64, limit: f64 },
    #[error("truncation leakage {mass:.3e} in class {class} exceeds {limit:.1e}; increase k_max")]
    TailMass { class: usize, mass: f64, limit: f64 },
    #[error("linear solve failed: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, MeanFieldError>;

/// `x * exp(-x)`; maps `[0, inf)` onto `[0, 1/e]` with its maximum at `x = 1`.
pub fn xi(x: f64) -> f64 {
    x * (-x).exp()
}

/// How the arrival-modulating chain evolves relative to the users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationSpeed {
    /// The environment mixes within a slot; only its mean rate matters.
    Fast,
    /// The environment evolves on the users' time scale and is part of the state.
    Slow,
}

/// One class of users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub beta: f64,
    pub p: f64,
    pub lambda: f64,
    /// Modulating kernel. Off-diagonal entries are jump rates (slow) or one-step
    /// transition probabilities (fast); the diagonal is ignored.
    #[serde(default = "single_env_kernel")]
    pub kernel: Vec<Vec<f64>>,
    /// Arrival-rate multipliers per environment state.
    #[serde(default = "single_env_weights")]
    pub g: Vec<f64>,
}

fn single_env_kernel() -> Vec<Vec<f64>> {
    vec![vec![0.0]]
}

fn single_env_weights() -> Vec<f64> {
    vec![1.0]
}

impl ClassSpec {
    /// A class with unmodulated (Poisson) arrivals.
    pub fn plain(beta: f64, p: f64, lambda: f64) -> Self {
        Self {
            beta,
            p,
            lambda,
            kernel: single_env_kernel(),
            g: single_env_weights(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    classes: Vec<ClassSpec>,
    #[serde(default = "default_speed")]
    speed: ModulationSpeed,
    #[serde(default = "default_b")]
    b: f64,
}

fn default_speed() -> ModulationSpeed {
    ModulationSpeed::Fast
}

fn default_b() -> f64 {
    1.0
}

/// Validated mean-field description of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct ClassModel {
    classes: Vec<ClassSpec>,
    speed: ModulationSpeed,
    b: f64,
    pi: Vec<Vec<f64>>,
}

impl TryFrom<RawModel> for ClassModel {
    type Error = MeanFieldError;
    fn try_from(raw: RawModel) -> Result<Self> {
        ClassModel::new(raw.classes, raw.speed, raw.b)
    }
}

impl From<ClassModel> for RawModel {
    fn from(m: ClassModel) -> Self {
        RawModel {
            classes: m.classes,
            speed: m.speed,
            b: m.b,
        }
    }
}

fn invalid(msg: impl Into<String>) -> MeanFieldError {
    MeanFieldError::InvalidParameter(msg.into())
}

impl ClassModel {
    pub fn new(classes: Vec<ClassSpec>, speed: ModulationSpeed, b: f64) -> Result<Self> {
        if classes.is_empty() {
            return Err(invalid("at least one class is required"));
        }
        if !(b > 0.0 && b <= 1.0) {
            return Err(invalid(format!("slot availability b = {b} outside (0, 1]")));
        }
        let total_beta: f64 = classes.iter().map(|c| c.beta).sum();
        if (total_beta - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("class fractions sum to {total_beta}, not 1")));
        }
        let mut pi = Vec::with_capacity(classes.len());
        for (v, c) in classes.iter().enumerate() {
            if !(c.beta >= 0.0 && c.p > 0.0 && c.lambda >= 0.0)
                || !(c.p.is_finite() && c.lambda.is_finite())
            {
                return Err(invalid(format!("class {v}: need beta >= 0, p > 0, lambda >= 0")));
            }
            let a = c.g.len();
            if a == 0 || c.kernel.len() != a || c.kernel.iter().any(|row| row.len() != a) {
                return Err(invalid(format!("class {v}: kernel must be {a}x{a} to match g")));
            }
            if c.g.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(invalid(format!("class {v}: modulation weights must be nonnegative")));
            }
            for (i, row) in c.kernel.iter().enumerate() {
                for (j, &x) in row.iter().enumerate() {
                    if i != j && !(x >= 0.0 && x.is_finite()) {
                        return Err(invalid(format!("class {v}: negative kernel entry ({i},{j})")));
                    }
                }
            }
            let stationary = stationary_distribution(&c.kernel)?;
            let mean: f64 = stationary.iter().zip(&c.g).map(|(p, g)| p * g).sum();
            if (mean - 1.0).abs() > 1e-9 {
                return Err(invalid(format!(
                    "class {v}: stationary mean of g is {mean}, must be 1"
                )));
            }
            pi.push(stationary);
        }
        Ok(Self { classes, speed, b, pi })
    }

    /// Classes with unmodulated arrivals.
    pub fn plain(classes: &[(f64, f64, f64)], b: f64) -> Result<Self> {
        let specs = classes
            .iter()
            .map(|&(beta, p, lambda)| ClassSpec::plain(beta, p, lambda))
            .collect();
        Self::new(specs, ModulationSpeed::Fast, b)
    }

    /// A single class holding every user.
    pub fn single(p: f64, lambda: f64) -> Result<Self> {
        Self::plain(&[(1.0, p, lambda)], 1.0)
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn speed(&self) -> ModulationSpeed {
        self.speed
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn stationary(&self, v: usize) -> &[f64] {
        &self.pi[v]
    }

    /// `zeta = sum_v beta_v p_v`.
    pub fn zeta(&self) -> f64 {
        self.classes.iter().map(|c| c.beta * c.p).sum()
    }

    /// Total arrival intensity `sum_v beta_v lambda_v`.
    pub fn load(&self) -> f64 {
        self.classes.iter().map(|c| c.beta * c.lambda).sum()
    }

    fn env_count(&self, v: usize) -> usize {
        match self.speed {
            ModulationSpeed::Fast => 1,
            ModulationSpeed::Slow => self.classes[v].g.len(),
        }
    }
}

/// Stationary law of the chain whose off-diagonal jump rates are `kernel`.
///
/// A one-step transition matrix has the same stationary law as the
/// continuous-time chain with its off-diagonal entries as rates.
pub fn stationary_distribution(kernel: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = kernel.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let out: f64 = (0..n).filter(|&j| j != i).map(|j| kernel[i][j]).sum();
        for j in 0..n {
            // row j of the transposed generator
            m[(j, i)] = if i == j { -out } else { kernel[i][j] };
        }
    }
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let pi = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MeanFieldError::Singular("modulating chain is reducible".into()))?;
    if pi.iter().any(|&x| x < -1e-12) {
        return Err(MeanFieldError::Singular("modulating chain is reducible".into()));
    }
    Ok(pi.iter().map(|x| x.max(0.0)).collect())
}

/// Lower and upper roots of `gamma * exp(-gamma) = lambda_total / b`.
///
/// At the critical load both roots are 1; at zero load the roots are 0 and infinity.
pub fn gamma_roots(lambda_total: f64, b: f64) -> Result<(f64, f64)> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(invalid(format!("slot availability b = {b} outside (0, 1]")));
    }
    if !(lambda_total >= 0.0 && lambda_total.is_finite()) {
        return Err(invalid(format!("load {lambda_total} must be finite and nonnegative")));
    }
    let x = lambda_total / b;
    let peak = (-1.0f64).exp();
    if x == 0.0 {
        return Ok((0.0, f64::INFINITY));
    }
    if (x - peak).abs() <= ROOT_TOL {
        return Ok((1.0, 1.0));
    }
    if x > peak {
        return Err(MeanFieldError::Supercritical(x));
    }
    let lower = bisect(|g| xi(g) - x, 0.0, 1.0);
    let upper = bisect(|g| x - xi(g), 1.0, 50f64.max(-2.0 * x.ln()));
    Ok((lower, upper))
}

/// Root of an increasing function bracketed by `[lo, hi]`.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if f(lo).abs() <= f(hi).abs() {
        lo
    } else {
        hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    GloballyStable,
    Unstable,
    NotGloballyStable,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    pub gamma_lower: Option<f64>,
    pub gamma_upper: Option<f64>,
    pub zeta: f64,
    pub load: f64,
    /// Per-class margins `b p_v exp(-gamma_lower) - lambda_v`.
    pub witnesses: Vec<f64>,
}

/// Global stability of the mean-field dynamics.
pub fn classify_stability(model: &ClassModel) -> StabilityVerdict {
    let load = model.load();
    let zeta = model.zeta();
    let b = model.b;
    let (lower, upper) = match gamma_roots(load, b) {
        Ok(r) => r,
        Err(_) => {
            return StabilityVerdict {
                verdict: Verdict::Unstable,
                gamma_lower: None,
                gamma_upper: None,
                zeta,
                load,
                witnesses: Vec::new(),
            }
        }
    };
    let witnesses: Vec<f64> = model
        .classes
        .iter()
        .map(|c| b * c.p * (-lower).exp() - c.lambda)
        .collect();
    let lower_gap = zeta - lower;
    let upper_gap = upper - zeta;
    let critical = lower == upper;

    let verdict = if witnesses.iter().any(|&m| m < -CLASSIFY_TOL) || lower_gap < -CLASSIFY_TOL {
        Verdict::Unstable
    } else if upper_gap < -CLASSIFY_TOL {
        Verdict::NotGloballyStable
    } else if !critical && upper_gap > CLASSIFY_TOL && witnesses.iter().all(|&m| m > CLASSIFY_TOL) {
        Verdict::GloballyStable
    } else {
        Verdict::Indeterminate
    };
    StabilityVerdict {
        verdict,
        gamma_lower: Some(lower),
        gamma_upper: Some(upper).filter(|u| u.is_finite()),
        zeta,
        load,
        witnesses,
    }
}

/// Truncated distribution of every class over (environment, buffer length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    k_max: usize,
    envs: Vec<usize>,
    offsets: Vec<usize>,
    q: Vec<f64>,
    /// Integrated probability flow blocked at the truncation level, per class.
    tail_mass: Vec<f64>,
}

impl MeanFieldState {
    fn layout(model: &ClassModel, k_max: usize) -> Self {
        let envs: Vec<usize> = (0..model.classes.len()).map(|v| model.env_count(v)).collect();
        let mut offsets = Vec::with_capacity(envs.len());
        let mut total = 0;
        for &a in &envs {
            offsets.push(total);
            total += a * (k_max + 1);
        }
        Self {
            k_max,
            envs,
            offsets,
            q: vec![0.0; total],
            tail_mass: vec![0.0; model.classes.len()],
        }
    }

    fn env_weights(model: &ClassModel, v: usize) -> Vec<f64> {
        match model.speed {
            ModulationSpeed::Fast => vec![1.0],
            ModulationSpeed::Slow => model.pi[v].clone(),
        }
    }

    /// Every buffer holds `level` packets; environments are stationary.
    pub fn point_mass(model: &ClassModel, k_max: usize, level: usize) -> Result<Self> {
        if level > k_max {
            return Err(invalid(format!("level {level} above k_max {k_max}")));
        }
        let mut s = Self::layout(model, k_max);
        for v in 0..s.envs.len() {
            for (a, w) in Self::env_weights(model, v).into_iter().enumerate() {
                let i = s.index(v, a, level);
                s.q[i] = w;
            }
        }
        Ok(s)
    }

    /// All buffers empty.
    pub fn empty(model: &ClassModel, k_max: usize) -> Self {
        Self::point_mass(model, k_max, 0).expect("level 0 is always valid")
    }

    /// Builds a state from per-class buffer-length distributions, with the
    /// environment (if tracked) independent and stationary.
    pub fn from_buffer_laws(model: &ClassModel, laws: &[Vec<f64>]) -> Result<Self> {
        if laws.len() != model.classes.len() || laws.is_empty() {
            return Err(MeanFieldError::LayoutMismatch);
        }
        let k_max = laws[0].len().checked_sub(1).ok_or(MeanFieldError::LayoutMismatch)?;
        let mut s = Self::layout(model, k_max);
        for (v, law) in laws.iter().enumerate() {
            if law.len() != k_max + 1 {
                return Err(MeanFieldError::LayoutMismatch);
            }
            let total: f64 = law.iter().sum();
            if (total - 1.0).abs() > 1e-9 || law.iter().any(|&x| x < 0.0) {
                return Err(invalid(format!("class {v}: buffer law is not a distribution")));
            }
            for (a, w) in Self::env_weights(model, v).into_iter().enumerate() {
                for (k, &x) in law.iter().enumerate() {
                    let i = s.index(v, a, k);
                    s.q[i] = w * x;
                }
            }
        }
        Ok(s)
    }

    /// Builds a state from per-class joint laws laid out environment-major.
    pub fn from_joint_laws(model: &ClassModel, k_max: usize, laws: &[Vec<f64>]) -> Result<Self> {
        let mut s = Self::layout(model, k_max);
        if laws.len() != s.envs.len() {
            return Err(MeanFieldError::LayoutMismatch);
        }
        for (v, law) in laws.iter().enumerate() {
            if law.len() != s.envs[v] * (k_max + 1) {
                return Err(MeanFieldError::LayoutMismatch);
            }
            let start = s.offsets[v];
            s.q[start..start + law.len()].copy_from_slice(law);
        }
        Ok(s)
    }

    fn index(&self, v: usize, a: usize, k: usize) -> usize {
        self.offsets[v] + a * (self.k_max + 1) + k
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn class_count(&self) -> usize {
        self.envs.len()
    }

    pub fn env_count(&self, v: usize) -> usize {
        self.envs[v]
    }

    /// `Q_{(v,a,k)}`.
    pub fn prob(&self, v: usize, a: usize, k: usize) -> f64 {
        self.q[self.index(v, a, k)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn tail_mass(&self) -> &[f64] {
        &self.tail_mass
    }

    /// Joint law of class `v`, environment-major.
    pub fn class_law(&self, v: usize) -> &[f64] {
        let start = self.offsets[v];
        &self.q[start..start + self.envs[v] * (self.k_max + 1)]
    }

    /// Buffer-length marginal of class `v`.
    pub fn buffer_law(&self, v: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.k_max + 1];
        for a in 0..self.envs[v] {
            for (k, o) in out.iter_mut().enumerate() {
                *o += self.prob(v, a, k);
            }
        }
        out
    }

    /// Probability that a class-`v` buffer is empty.
    pub fn empty_prob(&self, v: usize) -> f64 {
        (0..self.envs[v]).map(|a| self.prob(v, a, 0)).sum()
    }

    pub fn class_mass(&self, v: usize) -> f64 {
        self.class_law(v).iter().sum()
    }

    /// `gamma = sum_v beta_v p_v (1 - Q_{(v,0)})`.
    pub fn gamma(&self, model: &ClassModel) -> f64 {
        model
            .classes
            .iter()
            .enumerate()
            .map(|(v, c)| c.beta * c.p * (1.0 - self.empty_prob(v)))
            .sum()
    }

    /// Mean buffer length of class `v`.
    pub fn class_workload(&self, v: usize) -> f64 {
        self.buffer_law(v).iter().enumerate().map(|(k, q)| k as f64 * q).sum()
    }

    /// `W = sum_v beta_v W_v`.
    pub fn workload(&self, model: &ClassModel) -> f64 {
        (0..self.envs.len())
            .map(|v| model.classes[v].beta * self.class_workload(v))
            .sum()
    }

    /// Stochastic order per class and environment: every cumulative sum of
    /// `self` dominates the corresponding one of `other` (up to `tol`).
    pub fn stochastically_le(&self, other: &Self, tol: f64) -> bool {
        if self.envs != other.envs || self.k_max != other.k_max {
            return false;
        }
        for v in 0..self.envs.len() {
            for a in 0..self.envs[v] {
                let (mut lhs, mut rhs) = (0.0, 0.0);
                for k in 0..=self.k_max {
                    lhs += self.prob(v, a, k);
                    rhs += other.prob(v, a, k);
                    if lhs < rhs - tol {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn matches(&self, model: &ClassModel) -> bool {
        self.envs.len() == model.classes.len()
            && (0..self.envs.len()).all(|v| self.envs[v] == model.env_count(v))
    }
}

/// Time derivative of a mean-field state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub dq: Vec<f64>,
    /// Rate at which probability would leave through the truncation level, per class.
    pub tail_flux: Vec<f64>,
}

impl StateDerivative {
    pub fn sup_norm(&self) -> f64 {
        self.dq.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn gamma_of(q: &[f64], state: &MeanFieldState, model: &ClassModel) -> f64 {
    let mut g = 0.0;
    for (v, c) in model.classes.iter().enumerate() {
        let empty: f64 = (0..state.envs[v]).map(|a| q[state.index(v, a, 0)]).sum();
        g += c.beta * c.p * (1.0 - empty);
    }
    g
}

/// Right-hand side of the Kolmogorov equations, written into `dq` and `tail`.
fn derivative_into(
    q: &[f64],
    state: &MeanFieldState,
    model: &ClassModel,
    dq: &mut [f64],
    tail: &mut [f64],
) {
    let kn = state.k_max + 1;
    let gamma = gamma_of(q, state, model);
    let decay = (-gamma).exp();
    for (v, c) in model.classes.iter().enumerate() {
        let mu = model.b * c.p * decay;
        let envs = state.envs[v];
        let base = state.offsets[v];
        tail[v] = 0.0;
        for a in 0..envs {
            let rate = match model.speed {
                ModulationSpeed::Fast => c.lambda,
                ModulationSpeed::Slow => c.lambda * c.g[a],
            };
            let row = base + a * kn;
            for k in 0..kn {
                let here = q[row + k];
                let mut d = 0.0;
                if k > 0 {
                    d += rate * q[row + k - 1] - mu * here;
                }
                if k < state.k_max {
                    d += mu * q[row + k + 1] - rate * here;
                }
                dq[row + k] = d;
            }
            tail[v] += rate * q[row + state.k_max];
        }
        if envs > 1 {
            let kernel = &c.kernel;
            for a in 0..envs {
                let out: f64 = (0..envs).filter(|&b| b != a).map(|b| kernel[a][b]).sum();
                let row = base + a * kn;
                for k in 0..kn {
                    let mut inflow = 0.0;
                    for b in (0..envs).filter(|&b| b != a) {
                        inflow += kernel[b][a] * q[base + b * kn + k];
                    }
                    dq[row + k] += inflow - out * q[row + k];
                }
            }
        }
    }
}

/// Kolmogorov right-hand side at `state`. At the truncation level the arrival
/// term is dropped; the blocked flow is reported in `tail_flux`.
pub fn mf_derivative(state: &MeanFieldState, model: &ClassModel) -> Result<StateDerivative> {
    if !state.matches(model) {
        return Err(MeanFieldError::LayoutMismatch);
    }
    let mut dq = vec![0.0; state.q.len()];
    let mut tail_flux = vec![0.0; state.envs.len()];
    derivative_into(&state.q, state, model, &mut dq, &mut tail_flux);
    Ok(StateDerivative { dq, tail_flux })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub tau_end: f64,
    pub dt: f64,
    /// Spacing of stored samples in scaled time.
    pub sample_interval: f64,
    pub tail_limit: f64,
    pub mass_tol: f64,
}

impl IntegrateOptions {
    pub fn new(tau_end: f64) -> Self {
        Self {
            tau_end,
            dt: DEFAULT_DT,
            sample_interval: 1.0,
            tail_limit: DEFAULT_TAIL_LIMIT,
            mass_tol: DEFAULT_MASS_TOL,
        }
    }

    pub fn dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn sample_interval(mut self, interval: f64) -> Self {
        self.sample_interval = interval;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub tau: f64,
    pub gamma: f64,
    pub workload: f64,
    pub class_workload: Vec<f64>,
    pub empty_prob: Vec<f64>,
    /// `|dW/dtau - (lambda - b gamma exp(-gamma))|` at this sample.
    pub workload_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub final_state: MeanFieldState,
    pub max_mass_drift: f64,
    pub max_workload_residual: f64,
}

impl Trajectory {
    pub fn final_gamma(&self) -> f64 {
        self.samples.last().map_or(f64::NAN, |s| s.gamma)
    }
}

fn sample_at(tau: f64, state: &MeanFieldState, model: &ClassModel, scratch: &mut [f64], tail: &mut [f64]) -> Sample {
    derivative_into(&state.q, state, model, scratch, tail);
    let kn = state.k_max + 1;
    let mut dw = 0.0;
    for (v, c) in model.classes.iter().enumerate() {
        let mut dwv = 0.0;
        for a in 0..state.envs[v] {
            let row = state.offsets[v] + a * kn;
            for k in 1..kn {
                dwv += k as f64 * scratch[row + k];
            }
        }
        dw += c.beta * dwv;
    }
    let gamma = state.gamma(model);
    let predicted = model.load() - model.b * xi(gamma);
    Sample {
        tau,
        gamma,
        workload: state.workload(model),
        class_workload: (0..state.envs.len()).map(|v| state.class_workload(v)).collect(),
        empty_prob: (0..state.envs.len()).map(|v| state.empty_prob(v)).collect(),
        workload_residual: (dw - predicted).abs(),
    }
}

/// Fixed-step classical Runge-Kutta integration of the mean-field equations.
pub fn mf_integrate(q0: &MeanFieldState, model: &ClassModel, opts: &IntegrateOptions) -> Result<Trajectory> {
    if !q0.matches(model) {
        return Err(MeanFieldError::LayoutMismatch);
    }
    if !(opts.dt > 0.0 && opts.tau_end > 0.0 && opts.sample_interval > 0.0) {
        return Err(invalid("dt, tau_end and sample_interval must be positive"));
    }
    let steps = (opts.tau_end / opts.dt).round().max(1.0) as usize;
    let stride = ((opts.sample_interval / opts.dt).round() as usize).max(1);
    let n = q0.q.len();
    let classes = q0.envs.len();

    let mut state = q0.clone();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut t1 = vec![0.0; classes];
    let mut t2 = vec![0.0; classes];
    let mut t3 = vec![0.0; classes];
    let mut t4 = vec![0.0; classes];

    let mut samples = vec![sample_at(0.0, &state, model, &mut k1, &mut t1)];
    let mut max_mass_drift: f64 = 0.0;
    let h = opts.dt;

    for step in 1..=steps {
        derivative_into(&state.q, &state, model, &mut k1, &mut t1);
        for i in 0..n {
            stage[i] = state.q[i] + 0.5 * h * k1[i];
        }
        derivative_into(&stage, &state, model, &mut k2, &mut t2);
        for i in 0..n {
            stage[i] = state.q[i] + 0.5 * h * k2[i];
        }
        derivative_into(&stage, &state, model, &mut k3, &mut t3);
        for i in 0..n {
            stage[i] = state.q[i] + h * k3[i];
        }
        derivative_into(&stage, &state, model, &mut k4, &mut t4);
        for i in 0..n {
            state.q[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        for v in 0..classes {
            state.tail_mass[v] += h / 6.0 * (t1[v] + 2.0 * t2[v] + 2.0 * t3[v] + t4[v]);
        }

        if step % stride == 0 || step == steps {
            for v in 0..classes {
                let drift = (state.class_mass(v) - q0.class_mass(v)).abs();
                max_mass_drift = max_mass_drift.max(drift);
                if drift > opts.mass_tol {
                    return Err(MeanFieldError::MassDrift { class: v, drift, limit: opts.mass_tol });
                }
                if state.tail_mass[v] > opts.tail_limit {
                    return Err(MeanFieldError::TailMass {
                        class: v,
                        mass: state.tail_mass[v],
                        limit: opts.tail_limit,
                    });
                }
            }
            samples.push(sample_at(step as f64 * h, &state, model, &mut k1, &mut t1));
        }
    }
    let max_workload_residual = samples.iter().map(|s| s.workload_residual).fold(0.0, f64::max);
    Ok(Trajectory {
        samples,
        final_state: state,
        max_mass_drift,
        max_workload_residual,
    })
}

/// Stationary law of a queue with Markov-modulated Poisson arrivals (rates
/// `lambda * g_a`, environment jump rates `kernel`) and exponential service at
/// rate `capacity`, truncated at `k_max`. Laid out environment-major.
pub fn modulated_mm1_stationary(
    kernel: &[Vec<f64>],
    g: &[f64],
    lambda: f64,
    capacity: f64,
    k_max: usize,
) -> Result<Vec<f64>> {
    let envs = g.len();
    if envs == 0 || kernel.len() != envs || kernel.iter().any(|r| r.len() != envs) {
        return Err(invalid("kernel must be square and match g"));
    }
    if !(capacity > 0.0) || !(lambda >= 0.0) {
        return Err(invalid("capacity must be positive and lambda nonnegative"));
    }
    let pi = stationary_distribution(kernel)?;
    let mean: f64 = pi.iter().zip(g).map(|(p, w)| p * w).sum::<f64>() * lambda;
    let load = mean / capacity;
    if load >= 1.0 {
        return Err(MeanFieldError::Overloaded(load));
    }
    let kn = k_max + 1;
    let size = envs * kn;
    if lambda == 0.0 {
        let mut out = vec![0.0; size];
        for a in 0..envs {
            out[a * kn] = pi[a];
        }
        return Ok(out);
    }

    // transposed generator: row = target state, column = source state
    let mut m = nalgebra::DMatrix::<f64>::zeros(size, size);
    for a in 0..envs {
        let rate = lambda * g[a];
        for k in 0..kn {
            let s = a * kn + k;
            if k < k_max {
                m[(s + 1, s)] += rate;
                m[(s, s)] -= rate;
            }
            if k > 0 {
                m[(s - 1, s)] += capacity;
                m[(s, s)] -= capacity;
            }
            for b in (0..envs).filter(|&b| b != a) {
                let r = kernel[a][b];
                m[(b * kn + k, s)] += r;
                m[(s, s)] -= r;
            }
        }
    }
    for c in 0..size {
        m[(size - 1, c)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(size);
    rhs[size - 1] = 1.0;
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| MeanFieldError::Singular("global balance system".into()))?;
    let mut out: Vec<f64> = sol.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FixedPointKind {
    Empty,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPoint {
    pub kind: FixedPointKind,
    /// The root of `xi(gamma) = lambda / b` this point was built from.
    pub gamma: f64,
    pub state: MeanFieldState,
}

/// Stationary points of the mean-field dynamics: one per root `gamma` of
/// `xi(gamma) = lambda / b` at which every class queue, served at
/// `b p_v exp(-gamma)`, is stable.
pub fn fixed_points(model: &ClassModel, k_max: usize) -> Result<Vec<FixedPoint>> {
    if model.classes.iter().all(|c| c.lambda == 0.0) {
        return Ok(vec![FixedPoint {
            kind: FixedPointKind::Empty,
            gamma: 0.0,
            state: MeanFieldState::empty(model, k_max),
        }]);
    }
    let (lower, upper) = match gamma_roots(model.load(), model.b) {
        Ok(r) => r,
        Err(MeanFieldError::Supercritical(_)) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    let mut candidates = vec![(FixedPointKind::Lower, lower)];
    if upper.is_finite() && upper != lower {
        candidates.push((FixedPointKind::Upper, upper));
    }
    for (kind, gamma) in candidates {
        let decay = (-gamma).exp();
        if !model.classes.iter().all(|c| c.lambda < model.b * c.p * decay) {
            continue;
        }
        let mut laws = Vec::with_capacity(model.classes.len());
        for c in &model.classes {
            let capacity = model.b * c.p * decay;
            let law = match model.speed {
                ModulationSpeed::Fast => modulated_mm1_stationary(&[vec![0.0]], &[1.0], c.lambda, capacity, k_max)?,
                ModulationSpeed::Slow => modulated_mm1_stationary(&c.kernel, &c.g, c.lambda, capacity, k_max)?,
            };
            laws.push(law);
        }
        out.push(FixedPoint {
            kind,
            gamma,
            state: MeanFieldState::from_joint_laws(model, k_max, &laws)?,
        });
    }
    Ok(out)
}
