//! Stability and capacity regions of buffered slotted-Aloha and non-adaptive CSMA.
//!
//! The approximate region is the set of rate vectors lying below one of the `N`
//! boundaries obtained by pinning one user as saturated (`rho_j = 1`) and
//! treating the other buffers as independent with occupancy `rho_i`. Membership
//! is decided along rays: for a traffic direction `alpha` the maximal total rate
//! `s_star` is available in closed form, and `lambda = s * alpha` is inside iff
//! `s < s_star`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual target for every iterative solve in this module.
pub const SOLVE_TOL: f64 = 1e-10;

/// Relative tolerance used to decide that two `alpha_i (1 - p_i) / p_i` keys are equal.
pub const HOMOGENEITY_TOL: f64 = 1e-12;

const CAPACITY_MAX_ITER: usize = 10_000;
const CSMA_MAX_ITER: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("attempt probability p[{index}] = {value} is outside (0, 1)")]
    InvalidProbability { index: usize, value: f64 },
    #[error("occupancy rho[{index}] = {value} is outside [0, 1]")]
    InvalidOccupancy { index: usize, value: f64 },
    #[error("rate or weight [{index}] = {value} must be finite and nonnegative")]
    InvalidRate { index: usize, value: f64 },
    #[error("slot availability b = {0} is outside [0, 1]")]
    InvalidAvailability(f64),
    #[error("direction has no positive component")]
    ZeroDirection,
    #[error("empty vector")]
    Empty,
    #[error("saturated index {index} out of range for {n} users")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("occupancy vector is not on boundary face {j}: rho[{j}] = {value}")]
    NotOnFace { j: usize, value: f64 },
    #[error("exact two-user region needs N = 2, got N = {0}")]
    NotTwoUsers(usize),
    #[error("not a k-homogeneous direction: {0}")]
    NotKHomogeneous(String),
    #[error("CSMA holding time must be at least one slot")]
    InvalidSigma,
    #[error("CSMA boundary solve did not converge: {0}")]
    NonConvergence(String),
}

pub type Result<T> = std::result::Result<T, RegionError>;

/// Per-slot transmission attempt probabilities, one per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AttemptVector(Vec<f64>);

impl AttemptVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(RegionError::Empty);
        }
        for (index, &value) in p.iter().enumerate() {
            if !(value > 0.0 && value < 1.0) {
                return Err(RegionError::InvalidProbability { index, value });
            }
        }
        Ok(Self(p))
    }

    /// `n` users all attempting with probability `p`.
    pub fn uniform(n: usize, p: f64) -> Result<Self> {
        Self::new(vec![p; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for AttemptVector {
    type Error = RegionError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AttemptVector> for Vec<f64> {
    fn from(p: AttemptVector) -> Self {
        p.0
    }
}

/// L1-normalized traffic shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction(Vec<f64>);

impl Direction {
    /// Normalizes nonnegative weights to unit L1 norm.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(RegionError::Empty);
        }
        check_rates(weights)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(RegionError::ZeroDirection);
        }
        Ok(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(&vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Probability that each buffer is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyVector(Vec<f64>);

impl OccupancyVector {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(RegionError::Empty);
        }
        for (index, &value) in rho.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(RegionError::InvalidOccupancy { index, value });
            }
        }
        Ok(Self(rho))
    }

    pub fn saturated(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A point on boundary face `j` of the approximate region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub rho: OccupancyVector,
    pub j: usize,
    pub lambda: Vec<f64>,
}

impl BoundaryPoint {
    pub fn new(rho: OccupancyVector, j: usize, p: &AttemptVector) -> Result<Self> {
        if j >= rho.len() {
            return Err(RegionError::IndexOutOfRange { index: j, n: rho.len() });
        }
        if rho.0[j] != 1.0 {
            return Err(RegionError::NotOnFace { j, value: rho.0[j] });
        }
        let lambda = saturated_throughput(&rho, p, 1.0)?;
        Ok(Self { rho, j, lambda })
    }
}

/// Channel holding time of a CSMA transmission, in slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsmaParams {
    sigma: u32,
}

impl CsmaParams {
    pub fn new(sigma: u32) -> Result<Self> {
        if sigma == 0 {
            return Err(RegionError::InvalidSigma);
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> u32 {
        self.sigma
    }
}

/// Outcome of the maximal-rate computation along a direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SStar {
    pub s_star: f64,
    /// Index of the saturated user (0-based).
    pub i_star: usize,
    pub rho_star: OccupancyVector,
}

fn check_rates(v: &[f64]) -> Result<()> {
    for (index, &value) in v.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(RegionError::InvalidRate { index, value });
        }
    }
    Ok(())
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(RegionError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `prod_{k != i} (1 - x_k)` for every `i`, via prefix and suffix products.
fn leave_one_out_products(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![1.0; n];
    let mut acc = 1.0;
    for i in 0..n {
        out[i] = acc;
        acc *= 1.0 - x[i];
    }
    acc = 1.0;
    for i in (0..n).rev() {
        out[i] *= acc;
        acc *= 1.0 - x[i];
    }
    out
}

/// `lambda_i = b * rho_i * p_i * prod_{k != i} (1 - rho_k p_k)`.
pub fn saturated_throughput(rho: &OccupancyVector, p: &AttemptVector, b: f64) -> Result<Vec<f64>> {
    check_dims(p.len(), rho.len())?;
    if !(0.0..=1.0).contains(&b) {
        return Err(RegionError::InvalidAvailability(b));
    }
    let load: Vec<f64> = rho.0.iter().zip(&p.0).map(|(r, q)| r * q).collect();
    let others = leave_one_out_products(&load);
    Ok(load.iter().zip(others).map(|(x, o)| b * x * o).collect())
}

fn saturation_key(alpha: f64, p: f64) -> f64 {
    alpha * (1.0 - p) / p
}

/// Maximal total rate `s_star` such that `s_star * alpha` lies in the closure of
/// the approximate region, together with the saturated user and the occupancy
/// vector realizing the boundary point.
pub fn shat_star(alpha: &Direction, p: &AttemptVector) -> Result<SStar> {
    check_dims(p.len(), alpha.len())?;
    let a = alpha.as_slice();
    let q = p.as_slice();

    let mut i_star = None;
    let mut best = f64::NEG_INFINITY;
    for i in 0..a.len() {
        if a[i] <= 0.0 {
            continue;
        }
        let key = saturation_key(a[i], q[i]);
        if key > best {
            best = key;
            i_star = Some(i);
        }
    }
    let i_star = i_star.ok_or(RegionError::ZeroDirection)?;
    let a_star = a[i_star];
    let p_star = q[i_star];
    let c = best;

    let mut s_star = p_star / a_star;
    let mut rho = vec![0.0; a.len()];
    rho[i_star] = 1.0;
    for i in 0..a.len() {
        if i == i_star || a[i] <= 0.0 {
            continue;
        }
        let tail = a_star * (1.0 - p_star);
        s_star *= tail / (a[i] * p_star + tail);
        // alpha_i (1 - rho_i p_i) / (rho_i p_i) = c  =>  rho_i p_i = alpha_i / (c + alpha_i)
        rho[i] = (a[i] / (q[i] * (c + a[i]))).min(1.0);
    }
    Ok(SStar {
        s_star,
        i_star,
        rho_star: OccupancyVector(rho),
    })
}

/// Splits a nonnegative rate vector into total rate and direction.
/// Returns `None` for the all-zero vector.
fn split_ray(lambda: &[f64]) -> Result<Option<(f64, Direction)>> {
    check_rates(lambda)?;
    let s: f64 = lambda.iter().sum();
    if s == 0.0 {
        return Ok(None);
    }
    Ok(Some((s, Direction::new(lambda)?)))
}

/// Membership in the approximate stability region, decided along the ray through `lambda`.
///
/// Points on the boundary are outside. The zero vector is inside.
pub fn approx_region_contains(lambda: &[f64], p: &AttemptVector) -> Result<bool> {
    check_dims(p.len(), lambda.len())?;
    match split_ray(lambda)? {
        None => Ok(true),
        Some((s, alpha)) => Ok(s < shat_star(&alpha, p)?.s_star),
    }
}

/// The exact two-user stability region.
pub fn exact_region2_contains(lambda: &[f64], p: &AttemptVector) -> Result<bool> {
    if p.len() != 2 {
        return Err(RegionError::NotTwoUsers(p.len()));
    }
    if lambda.len() != 2 {
        return Err(RegionError::NotTwoUsers(lambda.len()));
    }
    check_rates(lambda)?;
    let (l1, l2) = (lambda[0], lambda[1]);
    let (p1, p2) = (p.0[0], p.0[1]);
    let user2_saturated = l1 < p1 * (1.0 - p2) && l2 < p2 * (1.0 - l1 / (1.0 - p2));
    let user1_saturated = l2 < p2 * (1.0 - p1) && l1 < p1 * (1.0 - l2 / (1.0 - p1));
    Ok(user2_saturated || user1_saturated)
}

/// Closed-form maximal rate along a k-homogeneous direction.
///
/// Users are ordered by decreasing `alpha_i (1 - p_i) / p_i`; the leading `k`
/// must share that value, at most one further user may carry traffic.
pub fn k_homogeneous_sstar(alpha: &Direction, p: &AttemptVector) -> Result<f64> {
    check_dims(p.len(), alpha.len())?;
    let a = alpha.as_slice();
    let q = p.as_slice();
    let n = a.len();

    let mut order: Vec<usize> = (0..n).collect();
    let keys: Vec<f64> = (0..n).map(|i| saturation_key(a[i], q[i])).collect();
    order.sort_by(|&x, &y| keys[y].total_cmp(&keys[x]).then(x.cmp(&y)));

    let lead = order[0];
    let top = keys[lead];
    if top <= 0.0 {
        return Err(RegionError::ZeroDirection);
    }
    let k = order
        .iter()
        .take_while(|&&i| (keys[i] - top).abs() <= HOMOGENEITY_TOL * top)
        .count();
    if let Some(&extra) = order.get(k + 1..).and_then(|rest| rest.iter().find(|&&i| a[i] > 0.0)) {
        return Err(RegionError::NotKHomogeneous(format!(
            "k = {k} but user {extra} beyond position k+1 has alpha = {}",
            a[extra]
        )));
    }
    let next = order.get(k).map_or(0.0, |&i| a[i]);
    let numerator: f64 = order[..k].iter().map(|&i| 1.0 - q[i]).product();
    Ok(numerator / ((1.0 - q[lead]) / q[lead] * a[lead] + next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CapacityStatus {
    Converged,
    /// Some `p_i` reached 1: no solution in the open unit cube.
    Infeasible,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacitySolution {
    pub p: Option<AttemptVector>,
    pub status: CapacityStatus,
    pub iterations: usize,
    pub residual: f64,
}

fn capacity_residual(p: &[f64], lambda: &[f64]) -> f64 {
    let others = leave_one_out_products(p);
    p.iter()
        .zip(&others)
        .zip(lambda)
        .map(|((pi, o), l)| (pi * o - l).abs())
        .fold(0.0, f64::max)
}

/// Solves `lambda_i = p_i prod_{j != i} (1 - p_j)` for `p`.
///
/// The map `p -> lambda / prod(1 - p)` is monotone, so iterating it from zero
/// climbs to the smallest solution when one exists and escapes the unit cube
/// otherwise. A few Newton steps in log coordinates polish the result once the
/// iteration has slowed down near a fold.
pub fn capacity_region_solve(lambda: &[f64]) -> Result<CapacitySolution> {
    if lambda.is_empty() {
        return Err(RegionError::Empty);
    }
    check_rates(lambda)?;
    if let Some(index) = lambda.iter().position(|&l| l <= 0.0) {
        return Err(RegionError::InvalidRate { index, value: lambda[index] });
    }
    let n = lambda.len();
    let mut p = vec![0.0; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    while iterations < CAPACITY_MAX_ITER {
        iterations += 1;
        let others = leave_one_out_products(&p);
        let next: Vec<f64> = lambda.iter().zip(&others).map(|(l, o)| l / o).collect();
        if next.iter().any(|&x| !(x < 1.0)) {
            return Ok(CapacitySolution {
                p: None,
                status: CapacityStatus::Infeasible,
                iterations,
                residual,
            });
        }
        let step = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        residual = capacity_residual(&p, lambda);
        if residual < SOLVE_TOL * 1e-2 || step < 1e-7 {
            break;
        }
    }

    for _ in 0..50 {
        if residual < SOLVE_TOL * 1e-2 {
            break;
        }
        match newton_capacity_step(&p, lambda) {
            Some(next) if next.iter().all(|&x| x > 0.0 && x < 1.0) => {
                let r = capacity_residual(&next, lambda);
                if r >= residual {
                    break;
                }
                p = next;
                residual = r;
            }
            _ => break,
        }
    }

    let status = if residual < SOLVE_TOL {
        CapacityStatus::Converged
    } else {
        CapacityStatus::NotConverged
    };
    let p = match status {
        CapacityStatus::Converged => Some(AttemptVector(p)),
        _ => None,
    };
    Ok(CapacitySolution { p, status, iterations, residual })
}

/// One Newton step on `log p_i + sum_{j != i} log(1 - p_j) = log lambda_i`.
fn newton_capacity_step(p: &[f64], lambda: &[f64]) -> Option<Vec<f64>> {
    let n = p.len();
    let log_free: f64 = p.iter().map(|x| (1.0 - x).ln()).sum();
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut rhs = nalgebra::DVector::<f64>::zeros(n);
    for i in 0..n {
        let g = p[i].ln() + log_free - (1.0 - p[i]).ln() - lambda[i].ln();
        rhs[i] = -g;
        for j in 0..n {
            jac[(i, j)] = if i == j { 1.0 / p[i] } else { -1.0 / (1.0 - p[j]) };
        }
    }
    let delta = jac.lu().solve(&rhs)?;
    Some(p.iter().zip(delta.iter()).map(|(x, d)| x + d).collect())
}

/// Per-user throughput of a CSMA system where each buffer is non-empty with
/// probability `rho_i` and every transmission (successful or not) holds the
/// channel for `sigma` slots.
pub fn csma_saturation_throughput(
    rho: &OccupancyVector,
    p: &AttemptVector,
    csma: CsmaParams,
) -> Result<Vec<f64>> {
    let (success, idle) = csma_terms(rho.as_slice(), p.as_slice())?;
    let busy: f64 = success.iter().sum();
    let collision = 1.0 - idle - busy;
    assert!(collision > -1e-12, "negative collision probability {collision}");
    let collision = collision.max(0.0);
    let denom = csma.sigma as f64 * (busy + collision) + idle;
    Ok(success.iter().map(|s| s / denom).collect())
}

/// Success probabilities `P_i` and idle probability `E`.
fn csma_terms(rho: &[f64], p: &[f64]) -> Result<(Vec<f64>, f64)> {
    check_dims(p.len(), rho.len())?;
    let load: Vec<f64> = rho.iter().zip(p).map(|(r, q)| r * q).collect();
    let others = leave_one_out_products(&load);
    let success = load.iter().zip(&others).map(|(x, o)| x * o).collect();
    let idle = load.iter().map(|x| 1.0 - x).product();
    Ok((success, idle))
}

fn csma_gamma(rho: &[f64], p: &[f64], sigma: f64) -> Vec<f64> {
    let (success, idle) = csma_terms(rho, p).expect("dimensions checked by caller");
    let denom = sigma * (1.0 - idle) + idle;
    success.into_iter().map(|s| s / denom).collect()
}

/// `gamma_i / rho_i`, well defined at `rho_i = 0`.
fn csma_gamma_per_occupancy(rho: &[f64], p: &[f64], sigma: f64) -> Vec<f64> {
    let load: Vec<f64> = rho.iter().zip(p).map(|(r, q)| r * q).collect();
    let others = leave_one_out_products(&load);
    let idle: f64 = load.iter().map(|x| 1.0 - x).product();
    let denom = sigma * (1.0 - idle) + idle;
    p.iter().zip(&others).map(|(q, o)| q * o / denom).collect()
}

/// Solves face `j` (user `j` saturated) along `alpha`.
///
/// The saturated user's balance fixes the total rate as a function of the
/// other occupancies, `s(rho) = gamma_j(rho) / alpha_j`. The remaining
/// equations `rho_i = s(rho) alpha_i / (gamma_i / rho_i)` are iterated with a
/// damping factor that halves whenever the step grows. Returns the occupancies
/// and rate, `Ok(None)` if some occupancy must exceed one, or the last step
/// size if the iteration did not settle.
fn solve_face(alpha: &[f64], p: &[f64], sigma: f64, j: usize) -> std::result::Result<Option<(Vec<f64>, f64)>, f64> {
    let n = alpha.len();
    let free: Vec<usize> = (0..n).filter(|&i| i != j && alpha[i] > 0.0).collect();
    let mut rho = vec![0.0; n];
    rho[j] = 1.0;
    let rate = |rho: &[f64]| csma_gamma(rho, p, sigma)[j] / alpha[j];
    let mut omega = 1.0;
    let mut last_step = f64::INFINITY;
    let mut converged = free.is_empty();
    for _ in 0..CSMA_MAX_ITER {
        if converged {
            break;
        }
        let s = rate(&rho);
        let per_unit = csma_gamma_per_occupancy(&rho, p, sigma);
        let mut step: f64 = 0.0;
        for &i in &free {
            // keep rho_i p_i < 1 so every factor stays positive
            let target = (s * alpha[i] / per_unit[i]).min(0.999_999 / p[i]);
            let delta = target - rho[i];
            rho[i] += omega * delta;
            step = step.max(delta.abs());
        }
        if step < SOLVE_TOL * 1e-4 {
            converged = true;
        } else if step >= last_step && omega > 1e-6 {
            omega *= 0.5;
        }
        last_step = step;
    }
    if !converged {
        return Err(last_step);
    }
    if free.iter().any(|&i| rho[i] > 1.0 + 1e-12) {
        return Ok(None);
    }
    let s = rate(&rho);
    Ok(Some((rho, s)))
}

/// Maximal total rate along `alpha` inside the approximate CSMA region.
///
/// Each user with a positive share defines a candidate face of the boundary
/// on which it is saturated. Faces whose solution needs an occupancy above
/// one are rejected and the largest remaining rate is returned.
pub fn csma_shat_star(alpha: &Direction, p: &AttemptVector, csma: CsmaParams) -> Result<f64> {
    check_dims(p.len(), alpha.len())?;
    let a = alpha.as_slice();
    let q = p.as_slice();
    let sigma = csma.sigma as f64;
    let mut best: Option<f64> = None;
    let mut diagnostics = Vec::new();
    for j in (0..a.len()).filter(|&j| a[j] > 0.0) {
        match solve_face(a, q, sigma, j) {
            Ok(Some((_, s))) => best = Some(best.map_or(s, |b: f64| b.max(s))),
            Ok(None) => {}
            Err(step) => diagnostics.push(format!("face {j}: iteration stalled with step {step:.3e}")),
        }
    }
    match best {
        Some(s) => Ok(s),
        None if diagnostics.is_empty() => Err(RegionError::NonConvergence("no feasible face".into())),
        None => Err(RegionError::NonConvergence(diagnostics.join("; "))),
    }
}

impl fmt::Display for SStar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s_star = {} (saturated user {})", self.s_star, self.i_star + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> AttemptVector {
        AttemptVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn two_saturated_anchor() {
        let p = pv(&[0.6, 0.3, 0.1]);
        let rho = OccupancyVector::new(vec![1.0, 1.0, 0.0]).unwrap();
        let l = saturated_throughput(&rho, &p, 1.0).unwrap();
        assert!((l[0] - 0.6 * 0.7).abs() < 1e-15);
        assert!((l[1] - 0.3 * 0.4).abs() < 1e-15);
        assert_eq!(l[2], 0.0);
    }

    #[test]
    fn empty_occupancy_gives_zero() {
        let p = pv(&[0.2, 0.5]);
        let rho = OccupancyVector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(saturated_throughput(&rho, &p, 1.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn symmetric_saturation() {
        let p = AttemptVector::uniform(3, 1.0 / 3.0).unwrap();
        let l = saturated_throughput(&OccupancyVector::saturated(3), &p, 1.0).unwrap();
        for x in l {
            assert!((x - 4.0 / 27.0).abs() < 1e-15);
        }
    }

    #[test]
    fn throughput_dimension_mismatch() {
        let p = pv(&[0.2, 0.5]);
        let rho = OccupancyVector::saturated(3);
        assert!(matches!(
            saturated_throughput(&rho, &p, 1.0),
            Err(RegionError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sstar_uniform_three_users() {
        let p = AttemptVector::uniform(3, 1.0 / 3.0).unwrap();
        let r = shat_star(&Direction::uniform(3).unwrap(), &p).unwrap();
        assert!((r.s_star - 4.0 / 9.0).abs() < 1e-14);
        assert_eq!(r.i_star, 0);
        assert_eq!(r.rho_star.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sstar_homogeneous_matches_per_user_condition() {
        for n in 2..8 {
            let p = 0.7 / n as f64;
            let r = shat_star(&Direction::uniform(n).unwrap(), &AttemptVector::uniform(n, p).unwrap()).unwrap();
            let per_user = p * (1.0 - p).powi(n as i32 - 1);
            assert!((r.s_star / n as f64 - per_user).abs() < 1e-15);
        }
    }

    #[test]
    fn sstar_skewed_attempts_both_branches() {
        // user 3 saturated below x = 47/7, user 2 above; worked by hand
        let p = pv(&[0.6, 0.3, 0.1]);
        let at = |x: f64| shat_star(&Direction::new(&[1.0, (1.0 + 1.0 / x) / 2.0, 1.0 / x]).unwrap(), &p).unwrap();
        for x in [0.1, 1.0, 3.0, 6.5] {
            let r = at(x);
            let expected = 24.3 * (x + 1.0) / ((x + 9.0) * (x + 19.0));
            assert!((r.s_star - expected).abs() < 1e-12, "x = {x}");
            assert_eq!(r.i_star, 2);
        }
        for x in [47.0 / 7.0 + 1e-9, 10.0, 40.0] {
            let r = at(x);
            let expected = 44.1 * (x + 1.0).powi(2) / ((13.0 * x + 7.0) * (7.0 * x + 13.0));
            assert!((r.s_star - expected).abs() < 1e-12, "x = {x}");
            assert_eq!(r.i_star, 1);
        }
        let below = at(47.0 / 7.0 - 1e-9).s_star;
        let above = at(47.0 / 7.0 + 1e-9).s_star;
        assert!((below - above).abs() < 1e-8);
    }

    #[test]
    fn sstar_rho_solves_boundary_system() {
        let p = pv(&[0.6, 0.3, 0.1, 0.25]);
        let alpha = Direction::new(&[0.1, 0.4, 0.3, 0.2]).unwrap();
        let r = shat_star(&alpha, &p).unwrap();
        assert_eq!(r.rho_star.as_slice()[r.i_star], 1.0);
        let l = saturated_throughput(&r.rho_star, &p, 1.0).unwrap();
        for (li, ai) in l.iter().zip(alpha.as_slice()) {
            assert!((li - r.s_star * ai).abs() < 1e-14);
        }
    }

    #[test]
    fn sstar_zero_share_users_get_zero_occupancy() {
        let p = pv(&[0.3, 0.3, 0.3]);
        let alpha = Direction::new(&[0.5, 0.0, 0.5]).unwrap();
        let r = shat_star(&alpha, &p).unwrap();
        assert_eq!(r.rho_star.as_slice()[1], 0.0);
        // user 1 is silent, so the system is the two-user symmetric one
        assert!((r.s_star - 2.0 * 0.3 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_direction_rejected() {
        assert_eq!(Direction::new(&[0.0, 0.0]), Err(RegionError::ZeroDirection));
    }

    #[test]
    fn approx_membership_examples() {
        let p = AttemptVector::uniform(3, 1.0 / 3.0).unwrap();
        assert!(approx_region_contains(&[0.1, 0.1, 0.1], &p).unwrap());
        assert!(!approx_region_contains(&[0.2, 0.2, 0.2], &p).unwrap());
        let on_boundary = saturated_throughput(&OccupancyVector::saturated(3), &p, 1.0).unwrap();
        assert!(!approx_region_contains(&on_boundary, &p).unwrap());
        assert!(approx_region_contains(&[0.0, 0.0, 0.0], &p).unwrap());
    }

    #[test]
    fn exact_two_user_examples() {
        let p = pv(&[0.5, 0.5]);
        assert!(exact_region2_contains(&[0.2, 0.29], &p).unwrap());
        assert!(!exact_region2_contains(&[0.2, 0.3], &p).unwrap());
        assert!(exact_region2_contains(&[0.0, 0.0], &p).unwrap());
        assert_eq!(
            exact_region2_contains(&[0.1, 0.1, 0.1], &pv(&[0.2, 0.2, 0.2])),
            Err(RegionError::NotTwoUsers(3))
        );
    }

    #[test]
    fn k_homogeneous_examples() {
        let p = AttemptVector::uniform(3, 1.0 / 3.0).unwrap();
        let s = k_homogeneous_sstar(&Direction::uniform(3).unwrap(), &p).unwrap();
        assert!((s - 4.0 / 9.0).abs() < 1e-15);

        let s = k_homogeneous_sstar(&Direction::new(&[0.6, 0.4]).unwrap(), &pv(&[0.5, 0.5])).unwrap();
        assert!((s - 0.5).abs() < 1e-15);

        let err = k_homogeneous_sstar(&Direction::new(&[0.5, 0.3, 0.2]).unwrap(), &p);
        assert!(matches!(err, Err(RegionError::NotKHomogeneous(_))));
    }

    #[test]
    fn k_homogeneous_one_user_ray_matches_exact_region() {
        // along alpha = (0.6, 0.4) with p = (0.5, 0.5), the exact region ends at s = 0.5
        let p = pv(&[0.5, 0.5]);
        assert!(exact_region2_contains(&[0.6 * 0.4999, 0.4 * 0.4999], &p).unwrap());
        assert!(!exact_region2_contains(&[0.6 * 0.5001, 0.4 * 0.5001], &p).unwrap());
    }

    #[test]
    fn capacity_single_user() {
        let sol = capacity_region_solve(&[0.5]).unwrap();
        assert_eq!(sol.status, CapacityStatus::Converged);
        assert!((sol.p.unwrap().as_slice()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn capacity_two_user_round_trip() {
        let sol = capacity_region_solve(&[0.28, 0.18]).unwrap();
        let p = sol.p.expect("feasible");
        assert!((p.as_slice()[0] - 0.4).abs() < 1e-9);
        assert!((p.as_slice()[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn capacity_infeasible() {
        let sol = capacity_region_solve(&[0.6, 0.6]).unwrap();
        assert!(sol.p.is_none());
        assert_eq!(sol.status, CapacityStatus::Infeasible);
    }

    #[test]
    fn capacity_infeasible_matches_grid_scan() {
        // no p in (0,1)^2 reaches (0.6, 0.6): the grid maximum of min(lambda_1, lambda_2) stays below 0.26
        let mut best: f64 = 0.0;
        for i in 1..1000 {
            for j in 1..1000 {
                let (p1, p2) = (i as f64 / 1000.0, j as f64 / 1000.0);
                best = best.max((p1 * (1.0 - p2)).min(p2 * (1.0 - p1)));
            }
        }
        assert!(best < 0.6);
    }

    #[test]
    fn csma_examples() {
        let p = pv(&[0.5, 0.5]);
        let rho = OccupancyVector::saturated(2);
        let g = csma_saturation_throughput(&rho, &p, CsmaParams::new(10).unwrap()).unwrap();
        assert!((g[0] - 0.25 / 7.75).abs() < 1e-15);
        let zero = csma_saturation_throughput(&OccupancyVector::new(vec![0.0, 0.0]).unwrap(), &p, CsmaParams::new(10).unwrap()).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);

        let s = csma_shat_star(&Direction::uniform(2).unwrap(), &p, CsmaParams::new(10).unwrap()).unwrap();
        assert!((s - 2.0 * 0.25 / 7.75).abs() < 1e-10);
    }

    #[test]
    fn csma_sigma_one_reduces_to_aloha() {
        let p = pv(&[0.6, 0.3, 0.1]);
        let rho = OccupancyVector::new(vec![1.0, 0.4, 0.7]).unwrap();
        let one = CsmaParams::new(1).unwrap();
        let a = csma_saturation_throughput(&rho, &p, one).unwrap();
        let b = saturated_throughput(&rho, &p, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let alpha = Direction::new(&[1.0, 0.75, 0.5]).unwrap();
        let s = csma_shat_star(&alpha, &p, one).unwrap();
        assert!((s - shat_star(&alpha, &p).unwrap().s_star).abs() < 1e-10);
    }

    #[test]
    fn zero_sigma_rejected() {
        assert_eq!(CsmaParams::new(0), Err(RegionError::InvalidSigma));
    }
}
