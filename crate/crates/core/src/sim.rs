//! Slot-level Monte Carlo simulation of finite buffered Aloha / CSMA systems.
//!
//! Randomness is split into independent ChaCha8 streams derived from one run
//! seed: stream 0 drives the channel (slot availability and the attempt coin of
//! every user in every contention slot), stream `1 + i` drives the arrivals of
//! user `i`. Runs that differ only in which users are saturated, in their
//! initial buffers, or in `sigma = 1` versus the plain Aloha engine therefore
//! consume identical random numbers, which is what the coupling tests rely on.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meanfield::{stationary_distribution, ModulationSpeed};
use crate::region::Direction;

/// Drift threshold as a fraction of the total arrival rate.
pub const DRIFT_THETA: f64 = 0.02;
/// Standard errors a positive slope must clear to be called unstable.
pub const DRIFT_SIGMAS: f64 = 4.0;
/// Multiplier of `sqrt(slots) * lambda` bounding the backlog of a stable run.
pub const BACKLOG_CAP_FACTOR: f64 = 50.0;
pub const MIN_CHECKPOINTS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid system: {0}")]
    InvalidSpec(String),
    #[error("backlog trace has {0} checkpoints, at least {MIN_CHECKPOINTS} are needed")]
    TraceTooShort(usize),
    #[error("invalid bracket: low end is {low:?}, high end is {high:?}")]
    BracketInvalid { low: Verdict, high: Verdict },
}

pub type Result<T> = std::result::Result<T, SimError>;

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidSpec(msg.into())
}

/// Packet arrival process of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalModel {
    Bernoulli {
        lambda: f64,
    },
    /// Renewal process whose gaps are geometric with one of two success
    /// parameters, each chosen with probability one half.
    HyperGeometric {
        lambda: f64,
        a: f64,
    },
    /// Arrival probability `lambda * g[env]` with a Markov environment.
    Modulated {
        lambda: f64,
        kernel: Vec<Vec<f64>>,
        g: Vec<f64>,
        speed: ModulationSpeed,
    },
}

impl ArrivalModel {
    pub fn rate(&self) -> f64 {
        match self {
            Self::Bernoulli { lambda } | Self::HyperGeometric { lambda, .. } | Self::Modulated { lambda, .. } => *lambda,
        }
    }

    /// Same process with its mean rate replaced.
    pub fn with_rate(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            Self::Bernoulli { lambda: l } | Self::HyperGeometric { lambda: l, .. } | Self::Modulated { lambda: l, .. } => {
                *l = lambda
            }
        }
        out
    }

    /// Geometric success parameters of the two gap distributions, scaled so
    /// that the mixture has mean gap exactly `1 / lambda`.
    pub fn mixture_parameters(lambda: f64, a: f64) -> (f64, f64) {
        let kappa = 1.0 / (2.0 * a * (1.0 - a));
        (kappa * a * lambda, kappa * (1.0 - a) * lambda)
    }

    fn validate(&self, users: usize) -> Result<()> {
        let lambda = self.rate();
        if !(lambda >= 0.0 && lambda <= 1.0) {
            return Err(invalid(format!("arrival rate {lambda} outside [0, 1]")));
        }
        match self {
            Self::Bernoulli { .. } => Ok(()),
            Self::HyperGeometric { a, .. } => {
                if !(*a > 0.0 && *a < 1.0) {
                    return Err(invalid(format!("mixture parameter a = {a} outside (0, 1)")));
                }
                let (q1, q2) = Self::mixture_parameters(lambda, *a);
                if q1.max(q2) > 1.0 {
                    return Err(invalid(format!(
                        "rate {lambda} too high for mixture parameter {a}: a gap parameter exceeds 1"
                    )));
                }
                Ok(())
            }
            Self::Modulated { kernel, g, speed, .. } => {
                let n = g.len();
                if n == 0 || kernel.len() != n || kernel.iter().any(|r| r.len() != n) {
                    return Err(invalid("modulation kernel must be square and match g"));
                }
                let scale = match speed {
                    ModulationSpeed::Fast => 1.0,
                    ModulationSpeed::Slow => 1.0 / users as f64,
                };
                for (i, row) in kernel.iter().enumerate() {
                    let out: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| *x).sum();
                    if row.iter().any(|&x| x < 0.0) || out * scale > 1.0 {
                        return Err(invalid(format!("kernel row {i} is not a valid transition row")));
                    }
                }
                if g.iter().any(|&x| x < 0.0 || lambda * x > 1.0) {
                    return Err(invalid("lambda * g must lie in [0, 1]"));
                }
                let pi = stationary_distribution(kernel).map_err(|e| invalid(e.to_string()))?;
                let mean: f64 = pi.iter().zip(g).map(|(p, w)| p * w).sum();
                if (mean - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!("stationary mean of g is {mean}, must be 1")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub p: f64,
    pub arrivals: ArrivalModel,
}

/// A finite system of users sharing one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSystemSpec {
    pub users: Vec<UserSpec>,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "one_slot")]
    pub sigma: u32,
    /// Users that always have a packet to send.
    #[serde(default)]
    pub saturated: BTreeSet<usize>,
    /// Initial buffer contents; empty means all zero.
    #[serde(default)]
    pub initial_backlog: Vec<u64>,
}

fn one() -> f64 {
    1.0
}

fn one_slot() -> u32 {
    1
}

impl FiniteSystemSpec {
    /// Bernoulli arrivals at `lambda[i]`, pure Aloha, full availability.
    pub fn bernoulli(p: &[f64], lambda: &[f64]) -> Self {
        Self {
            users: p
                .iter()
                .zip(lambda)
                .map(|(&p, &lambda)| UserSpec { p, arrivals: ArrivalModel::Bernoulli { lambda } })
                .collect(),
            b: 1.0,
            sigma: 1,
            saturated: BTreeSet::new(),
            initial_backlog: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.users.len();
        if n == 0 {
            return Err(invalid("no users"));
        }
        if !(self.b > 0.0 && self.b <= 1.0) {
            return Err(invalid(format!("slot availability b = {} outside (0, 1]", self.b)));
        }
        if self.sigma == 0 {
            return Err(invalid("sigma must be at least 1"));
        }
        for (i, u) in self.users.iter().enumerate() {
            if !(u.p > 0.0 && u.p < 1.0) {
                return Err(invalid(format!("user {i}: attempt probability {} outside (0, 1)", u.p)));
            }
            u.arrivals.validate(n).map_err(|e| invalid(format!("user {i}: {e}")))?;
        }
        if let Some(&j) = self.saturated.iter().find(|&&j| j >= n) {
            return Err(invalid(format!("saturated index {j} out of range")));
        }
        if !self.initial_backlog.is_empty() && self.initial_backlog.len() != n {
            return Err(invalid("initial_backlog must have one entry per user"));
        }
        Ok(())
    }

    pub fn total_rate(&self) -> f64 {
        self.users.iter().map(|u| u.arrivals.rate()).sum()
    }

    /// Copy with arrival rates `s * alpha_i`.
    pub fn along(&self, alpha: &Direction, s: f64) -> Result<Self> {
        if alpha.len() != self.users.len() {
            return Err(invalid("direction length does not match the number of users"));
        }
        let mut out = self.clone();
        for (u, a) in out.users.iter_mut().zip(alpha.as_slice()) {
            u.arrivals = u.arrivals.with_rate(s * a);
        }
        Ok(out)
    }
}

/// What occupies the channel during a held period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Success(usize),
    Collision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Channel {
    Idle,
    Held { remaining: u32, outcome: Outcome },
}

#[derive(Debug, Clone)]
struct ArrivalProcess {
    model: ArrivalModel,
    rng: ChaCha8Rng,
    gap: u64,
    env: usize,
    env_scale: f64,
}

impl ArrivalProcess {
    fn new(model: &ArrivalModel, mut rng: ChaCha8Rng, users: usize) -> Self {
        let mut env = 0;
        let mut env_scale = 1.0;
        let mut gap = 0;
        match model {
            ArrivalModel::Modulated { kernel, speed, .. } => {
                let pi = stationary_distribution(kernel).expect("validated kernel");
                env = sample_index(&pi, rng.random());
                if *speed == ModulationSpeed::Slow {
                    env_scale = 1.0 / users as f64;
                }
            }
            ArrivalModel::HyperGeometric { lambda, a } if *lambda > 0.0 => {
                gap = draw_gap(&mut rng, *lambda, *a);
            }
            _ => {}
        }
        Self { model: model.clone(), rng, gap, env, env_scale }
    }

    fn step(&mut self) -> bool {
        match &self.model {
            ArrivalModel::Bernoulli { lambda } => self.rng.random::<f64>() < *lambda,
            ArrivalModel::HyperGeometric { lambda, a } => {
                if self.gap == 0 {
                    return false;
                }
                self.gap -= 1;
                if self.gap == 0 {
                    self.gap = draw_gap(&mut self.rng, *lambda, *a);
                    true
                } else {
                    false
                }
            }
            ArrivalModel::Modulated { lambda, kernel, g, .. } => {
                let u: f64 = self.rng.random();
                let row = &kernel[self.env];
                let mut acc = 0.0;
                for (j, &rate) in row.iter().enumerate() {
                    if j == self.env {
                        continue;
                    }
                    acc += rate * self.env_scale;
                    if u < acc {
                        self.env = j;
                        break;
                    }
                }
                self.rng.random::<f64>() < lambda * g[self.env]
            }
        }
    }
}

fn sample_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn draw_gap(rng: &mut ChaCha8Rng, lambda: f64, a: f64) -> u64 {
    let (q1, q2) = ArrivalModel::mixture_parameters(lambda, a);
    let q = if rng.random::<f64>() < 0.5 { q1 } else { q2 };
    geometric(rng, q)
}

/// Geometric variate on `{1, 2, ...}` with success probability `q`.
fn geometric(rng: &mut ChaCha8Rng, q: f64) -> u64 {
    if q >= 1.0 {
        return 1;
    }
    let u = 1.0 - rng.random::<f64>();
    1 + (u.ln() / (1.0 - q).ln()).floor() as u64
}

fn streams(seed: u64, users: usize) -> (ChaCha8Rng, Vec<ChaCha8Rng>) {
    let base = ChaCha8Rng::seed_from_u64(seed);
    let mut channel = base.clone();
    channel.set_stream(0);
    let arrivals = (0..users)
        .map(|i| {
            let mut r = base.clone();
            r.set_stream(1 + i as u64);
            r
        })
        .collect();
    (channel, arrivals)
}

/// State of one replication.
#[derive(Debug, Clone)]
pub struct SimState {
    buffers: Vec<u64>,
    channel: Channel,
    slot: u64,
    channel_rng: ChaCha8Rng,
    arrivals: Vec<ArrivalProcess>,
    counters: Counters,
    attempted: Vec<bool>,
}

#[derive(Debug, Clone, Default)]
struct Counters {
    arrivals: Vec<u64>,
    departures: Vec<u64>,
    empty_slots: u64,
    collision_slots: u64,
}

impl SimState {
    pub fn new(spec: &FiniteSystemSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let n = spec.users.len();
        let (channel_rng, arrival_rngs) = streams(seed, n);
        let arrivals = spec
            .users
            .iter()
            .zip(arrival_rngs)
            .map(|(u, rng)| ArrivalProcess::new(&u.arrivals, rng, n))
            .collect();
        let mut buffers = if spec.initial_backlog.is_empty() { vec![0; n] } else { spec.initial_backlog.clone() };
        for &j in &spec.saturated {
            buffers[j] = 0;
        }
        Ok(Self {
            buffers,
            channel: Channel::Idle,
            slot: 0,
            channel_rng,
            arrivals,
            counters: Counters { arrivals: vec![0; n], departures: vec![0; n], ..Default::default() },
            attempted: vec![false; n],
        })
    }

    pub fn buffers(&self) -> &[u64] {
        &self.buffers
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    fn depart(&mut self, i: usize, spec: &FiniteSystemSpec) {
        self.counters.departures[i] += 1;
        if !spec.saturated.contains(&i) {
            self.buffers[i] -= 1;
        }
    }

    fn arrive(&mut self, spec: &FiniteSystemSpec) {
        for i in 0..self.arrivals.len() {
            if self.arrivals[i].step() {
                self.counters.arrivals[i] += 1;
                if !spec.saturated.contains(&i) {
                    self.buffers[i] += 1;
                }
            }
        }
    }

    /// Draws the availability and attempt coins of one contention slot and
    /// returns the number of attempters and the last of them.
    fn contend(&mut self, spec: &FiniteSystemSpec) -> (usize, usize) {
        let available = self.channel_rng.random::<f64>() < spec.b;
        let mut count = 0;
        let mut who = 0;
        for (i, u) in spec.users.iter().enumerate() {
            let coin = self.channel_rng.random::<f64>();
            let backlogged = self.buffers[i] > 0 || spec.saturated.contains(&i);
            let attempts = available && backlogged && coin < u.p;
            self.attempted[i] = attempts;
            if attempts {
                count += 1;
                who = i;
            }
        }
        (count, who)
    }

    /// Advances one slot of the CSMA engine (`sigma = 1` is slotted Aloha).
    pub fn step(&mut self, spec: &FiniteSystemSpec) {
        match self.channel {
            Channel::Held { remaining, outcome } => {
                if outcome == Outcome::Collision {
                    self.counters.collision_slots += 1;
                }
                if remaining <= 1 {
                    self.channel = Channel::Idle;
                    if let Outcome::Success(i) = outcome {
                        self.depart(i, spec);
                    }
                } else {
                    self.channel = Channel::Held { remaining: remaining - 1, outcome };
                }
            }
            Channel::Idle => {
                let (count, who) = self.contend(spec);
                let outcome = match count {
                    0 => {
                        self.counters.empty_slots += 1;
                        None
                    }
                    1 => Some(Outcome::Success(who)),
                    _ => {
                        self.counters.collision_slots += 1;
                        Some(Outcome::Collision)
                    }
                };
                if let Some(outcome) = outcome {
                    if spec.sigma == 1 {
                        if let Outcome::Success(i) = outcome {
                            self.depart(i, spec);
                        }
                    } else {
                        self.channel = Channel::Held { remaining: spec.sigma - 1, outcome };
                    }
                }
            }
        }
        self.arrive(spec);
        self.slot += 1;
    }

    /// Advances one slot of plain slotted Aloha, ignoring `sigma`.
    fn aloha_step(&mut self, spec: &FiniteSystemSpec) {
        let (count, who) = self.contend(spec);
        match count {
            0 => self.counters.empty_slots += 1,
            1 => self.depart(who, spec),
            _ => self.counters.collision_slots += 1,
        }
        self.arrive(spec);
        self.slot += 1;
    }

    fn tracked_total(&self, spec: &FiniteSystemSpec) -> u64 {
        self.buffers
            .iter()
            .enumerate()
            .filter(|(i, _)| !spec.saturated.contains(i))
            .map(|(_, b)| b)
            .sum()
    }
}

/// Backlog recorded every `checkpoint_interval` slots.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BacklogTrace {
    pub slots: Vec<u64>,
    /// Total backlog of the non-saturated users.
    pub total: Vec<u64>,
    pub per_user: Vec<Vec<u64>>,
}

impl BacklogTrace {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// CSV with columns `checkpoint_slot,total_backlog,user_1,...`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let users = self.per_user.first().map_or(0, Vec::len);
        let mut header = vec!["checkpoint_slot".to_string(), "total_backlog".to_string()];
        header.extend((1..=users).map(|i| format!("user_{i}")));
        w.write_record(&header)?;
        for ((slot, total), per) in self.slots.iter().zip(&self.total).zip(&self.per_user) {
            let mut row = vec![slot.to_string(), total.to_string()];
            row.extend(per.iter().map(u64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub slots: u64,
    pub seed: u64,
    pub arrivals: Vec<u64>,
    pub departures: Vec<u64>,
    pub final_backlog: Vec<u64>,
    pub initial_backlog: Vec<u64>,
    /// Contention slots in which nobody transmitted.
    pub empty_slot_fraction: f64,
    /// Slots occupied by collisions, including their holding time.
    pub collision_fraction: f64,
    pub trace: BacklogTrace,
    #[serde(skip)]
    saturated: BTreeSet<usize>,
}

impl SimReport {
    /// `initial + arrivals = departures + backlog` for every tracked user.
    pub fn conserves(&self) -> bool {
        (0..self.arrivals.len()).filter(|i| !self.saturated.contains(i)).all(|i| {
            self.initial_backlog[i] + self.arrivals[i] == self.departures[i] + self.final_backlog[i]
        })
    }

    pub fn throughput(&self, i: usize) -> f64 {
        self.departures[i] as f64 / self.slots as f64
    }

    pub fn is_saturated(&self, i: usize) -> bool {
        self.saturated.contains(&i)
    }
}

fn run_with(
    spec: &FiniteSystemSpec,
    slots: u64,
    seed: u64,
    checkpoint_interval: u64,
    step: fn(&mut SimState, &FiniteSystemSpec),
) -> Result<SimReport> {
    if slots == 0 {
        return Err(invalid("slots must be at least 1"));
    }
    if checkpoint_interval == 0 {
        return Err(invalid("checkpoint interval must be at least 1"));
    }
    let mut state = SimState::new(spec, seed)?;
    let initial_backlog = state.buffers.clone();
    let mut trace = BacklogTrace::default();
    for t in 1..=slots {
        step(&mut state, spec);
        if t % checkpoint_interval == 0 {
            trace.slots.push(t);
            trace.total.push(state.tracked_total(spec));
            trace.per_user.push(state.buffers.clone());
        }
    }
    let contention_slots = slots as f64;
    Ok(SimReport {
        slots,
        seed,
        arrivals: state.counters.arrivals,
        departures: state.counters.departures,
        final_backlog: state.buffers,
        initial_backlog,
        empty_slot_fraction: state.counters.empty_slots as f64 / contention_slots,
        collision_fraction: state.counters.collision_slots as f64 / contention_slots,
        trace,
        saturated: spec.saturated.clone(),
    })
}

/// Runs the system for `slots` slots. Deterministic in `(spec, slots, seed)`.
pub fn run_sim(spec: &FiniteSystemSpec, slots: u64, seed: u64, checkpoint_interval: u64) -> Result<SimReport> {
    run_with(spec, slots, seed, checkpoint_interval, SimState::step)
}

/// Plain slotted Aloha engine, kept separate from the CSMA one as a reference.
pub fn run_aloha(spec: &FiniteSystemSpec, slots: u64, seed: u64, checkpoint_interval: u64) -> Result<SimReport> {
    run_with(spec, slots, seed, checkpoint_interval, SimState::aloha_step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftReport {
    /// Packets per slot.
    pub slope: f64,
    pub std_error: f64,
    pub verdict: Verdict,
}

/// Least-squares backlog drift over the second half of the trace.
pub fn drift_test(trace: &BacklogTrace, total_lambda: f64) -> Result<DriftReport> {
    let n = trace.len();
    if n < MIN_CHECKPOINTS {
        return Err(SimError::TraceTooShort(n));
    }
    let xs: Vec<f64> = trace.slots[n / 2..].iter().map(|&s| s as f64).collect();
    let ys: Vec<f64> = trace.total[n / 2..].iter().map(|&b| b as f64).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum();
    let std_error = (rss / (m - 2.0) / sxx).sqrt();

    let horizon = *trace.slots.last().expect("nonempty") as f64;
    let cap = BACKLOG_CAP_FACTOR * horizon.sqrt() * total_lambda;
    let peak = ys.iter().cloned().fold(0.0, f64::max);
    let threshold = DRIFT_THETA * total_lambda;
    let verdict = if slope > threshold && slope > DRIFT_SIGMAS * std_error {
        Verdict::Unstable
    } else if slope < threshold / 2.0 && peak < cap.max(1.0) {
        Verdict::Stable
    } else {
        Verdict::Inconclusive
    };
    Ok(DriftReport { slope, std_error, verdict })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub slots: u64,
    pub replications: u32,
    pub seed: u64,
    /// Target bracket half-width relative to its midpoint.
    pub resolution: f64,
    pub checkpoint_interval: u64,
    /// Additional replications allowed when a probe has no majority.
    pub extra_replications: u32,
    pub max_probes: u32,
}

impl EstimateOptions {
    pub fn new(slots: u64, replications: u32, seed: u64) -> Self {
        Self {
            slots,
            replications,
            seed,
            resolution: 0.01,
            checkpoint_interval: (slots / 1000).max(1),
            extra_replications: 4,
            max_probes: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub s: f64,
    pub verdict: Verdict,
    pub stable_votes: u32,
    pub unstable_votes: u32,
    pub mean_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SStarEstimate {
    pub s_hat: f64,
    pub half_width: f64,
    /// Set when the probe budget ran out before the resolution was reached.
    pub inconclusive: bool,
    pub probes: Vec<Probe>,
}

/// Majority drift verdict at total rate `s`; replication `r` uses seed `seed + r`.
pub fn probe_rate(alpha: &Direction, template: &FiniteSystemSpec, s: f64, opts: &EstimateOptions) -> Result<Probe> {
    let spec = template.along(alpha, s)?;
    spec.validate()?;
    let run = |r: u32| -> Result<DriftReport> {
        let report = run_sim(&spec, opts.slots, opts.seed.wrapping_add(r as u64), opts.checkpoint_interval)?;
        drift_test(&report.trace, spec.total_rate())
    };
    let mut reports: Vec<DriftReport> = (0..opts.replications).into_par_iter().map(run).collect::<Result<_>>()?;
    let tally = |reports: &[DriftReport]| {
        let stable = reports.iter().filter(|d| d.verdict == Verdict::Stable).count() as u32;
        let unstable = reports.iter().filter(|d| d.verdict == Verdict::Unstable).count() as u32;
        (stable, unstable)
    };
    let mut next = opts.replications;
    loop {
        let (stable, unstable) = tally(&reports);
        let total = reports.len() as u32;
        let mean_slope = reports.iter().map(|d| d.slope).sum::<f64>() / total as f64;
        let majority = if 2 * stable > total {
            Some(Verdict::Stable)
        } else if 2 * unstable > total {
            Some(Verdict::Unstable)
        } else {
            None
        };
        let exhausted = next >= opts.replications + opts.extra_replications;
        if majority.is_some() || exhausted {
            let verdict = majority.unwrap_or(if mean_slope > 0.0 { Verdict::Unstable } else { Verdict::Stable });
            return Ok(Probe { s, verdict, stable_votes: stable, unstable_votes: unstable, mean_slope });
        }
        reports.push(run(next)?);
        next += 1;
    }
}

/// Bisection for the largest stable total rate along `alpha`.
pub fn estimate_sstar_sim(
    alpha: &Direction,
    template: &FiniteSystemSpec,
    bracket: (f64, f64),
    opts: &EstimateOptions,
) -> Result<SStarEstimate> {
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(invalid(format!("bracket ({lo}, {hi}) must satisfy 0 < low < high")));
    }
    if opts.replications == 0 || opts.slots == 0 {
        return Err(invalid("need at least one replication and one slot"));
    }
    let low = probe_rate(alpha, template, lo, opts)?;
    let high = probe_rate(alpha, template, hi, opts)?;
    if low.verdict != Verdict::Stable || high.verdict != Verdict::Unstable {
        return Err(SimError::BracketInvalid { low: low.verdict, high: high.verdict });
    }
    let mut probes = vec![low, high];
    let mut inconclusive = false;
    while (hi - lo) / 2.0 >= opts.resolution * (lo + hi) / 2.0 {
        if probes.len() as u32 >= opts.max_probes {
            inconclusive = true;
            break;
        }
        let mid = 0.5 * (lo + hi);
        let probe = probe_rate(alpha, template, mid, opts)?;
        if probe.verdict == Verdict::Stable {
            lo = mid;
        } else {
            hi = mid;
        }
        probes.push(probe);
    }
    Ok(SStarEstimate { s_hat: 0.5 * (lo + hi), half_width: 0.5 * (hi - lo), inconclusive, probes })
}
