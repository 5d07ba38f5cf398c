//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when the failing set differs from the known one.

use std::collections::BTreeSet;
use std::time::Instant;

use aloha_stability::experiments::{self, SimBudget, EXAMPLE2_BREAK};
use aloha_stability::meanfield::{
    classify_stability, fixed_points, mf_derivative, mf_integrate, xi, ClassModel, ClassSpec, IntegrateOptions,
    MeanFieldState, ModulationSpeed, Verdict,
};
use aloha_stability::region::{
    approx_region_contains, csma_shat_star, exact_region2_contains, k_homogeneous_sstar, shat_star, AttemptVector,
    CsmaParams, Direction,
};
use aloha_stability::sim::{run_aloha, run_sim, FiniteSystemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLOSED_FORM_TOL: f64 = 1e-10;
const GRID: usize = 200;
const GRID_P_VECTORS: usize = 20;
const KHOM_INSTANCES: usize = 100;
const SIM_REL_TOL: f64 = 0.05;
const MF_GAMMA_TOL: f64 = 1e-3;
const MF_RESIDUAL_TOL: f64 = 1e-6;
const FIXED_POINT_TOL: f64 = 1e-9;
const STATIONARY_TOL: f64 = 1e-8;
const CSMA_SIGMAS: f64 = 3.0;
const GAP_BOUNDS: (f64, f64) = (0.1, 0.3);
const PROPERTY_INSTANCES: usize = 50;

/// Criteria expected to fail; see the notes printed beside them.
const KNOWN_FAILURES: [u32; 2] = [1, 8];

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "closed forms", closed_forms),
        (2, "two-user regions agree", two_user_grid),
        (3, "k-homogeneous closed form", k_homogeneous),
        (4, "simulated boundary", simulated_boundary),
        (5, "mean-field convergence", meanfield_convergence),
        (6, "bistability", bistability),
        (7, "fixed points", fixed_point_consistency),
        (8, "csma", csma),
        (9, "finite-N convergence", finite_n),
        (10, "dominance and monotonicity", dominance),
    ];
    let mut failed = BTreeSet::new();
    for (id, name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] {id:>2} {name}: {} ({:.1} s)", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed.insert(id);
        }
    }
    let known: BTreeSet<u32> = KNOWN_FAILURES.into_iter().collect();
    println!("failing: {failed:?}, expected: {known:?}");
    if failed != known {
        std::process::exit(1);
    }
}

fn closed_forms() -> Outcome {
    let start = Instant::now();
    let ex1 = experiments::example1(&[1.0, 2.0, 5.0, 10.0, 50.0], None).unwrap();
    let ex2 = experiments::example2(&[0.1, 1.0, EXAMPLE2_BREAK, 10.0], None).unwrap();
    let ex3 = experiments::example3(&(2..=10).collect::<Vec<_>>(), None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let off2: Vec<String> = ex2
        .rows
        .iter()
        .filter(|r| r.closed_form_gap() > CLOSED_FORM_TOL)
        .map(|r| format!("x={:.4}: {:.6} vs {:.6}", r.param, r.s_analytic, r.s_closed_form))
        .collect();
    // lower branch rederived from the face of the third user
    let rederived = ex2
        .rows
        .iter()
        .filter(|r| r.param < EXAMPLE2_BREAK)
        .all(|r| (r.s_analytic - 24.3 * (r.param + 1.0) / ((r.param + 9.0) * (r.param + 19.0))).abs() < CLOSED_FORM_TOL);
    let pass = ex1.max_closed_form_gap() < CLOSED_FORM_TOL
        && off2.is_empty()
        && ex3.max_closed_form_gap() < CLOSED_FORM_TOL
        && elapsed < 1.0;
    outcome(
        pass,
        format!(
            "ex1 gap {:.1e}, ex3 gap {:.1e}, ex2 mismatches [{}]; rederived lower branch 24.3(x+1)/((x+9)(x+19)) holds: {rederived}",
            ex1.max_closed_form_gap(),
            ex3.max_closed_form_gap(),
            off2.join("; ")
        ),
    )
}

fn two_user_grid() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut disagreements = 0;
    for _ in 0..GRID_P_VECTORS {
        let p = AttemptVector::new(vec![rng.random_range(0.02..0.98), rng.random_range(0.02..0.98)]).unwrap();
        for i in 0..GRID {
            for j in 0..GRID {
                let l = [(i as f64 + 0.5) / GRID as f64, (j as f64 + 0.5) / GRID as f64];
                if approx_region_contains(&l, &p).unwrap() != exact_region2_contains(&l, &p).unwrap() {
                    disagreements += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(disagreements == 0 && elapsed < 10.0, format!("{disagreements} disagreements"))
}

fn k_homogeneous() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..KHOM_INSTANCES {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(1..=n);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let mut alpha: Vec<f64> = (0..n).map(|i| if i < k { p[i] / (1.0 - p[i]) } else { 0.0 }).collect();
        if k < n && rng.random_bool(0.5) {
            alpha[k] = rng.random_range(0.0..1.0) * p[k] / (1.0 - p[k]);
        }
        let dir = Direction::new(&alpha).unwrap();
        let p = AttemptVector::new(p).unwrap();
        let closed = k_homogeneous_sstar(&dir, &p).unwrap();
        worst = worst.max((closed - shat_star(&dir, &p).unwrap().s_star).abs());
    }
    outcome(worst < CLOSED_FORM_TOL, format!("worst gap {worst:.1e}"))
}

fn simulated_boundary() -> Outcome {
    let budget = SimBudget::default();
    let sweeps = [
        experiments::example1(&[1.0, 5.0, 50.0], Some(&budget)),
        experiments::example2(&[1.0, 10.0], Some(&budget)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for sweep in sweeps {
        let sweep = match sweep {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("simulation failed: {e}")),
        };
        let simulated: Vec<_> = sweep.rows.iter().filter(|r| r.s_simulated.is_some()).collect();
        for r in &simulated {
            let s = r.s_simulated.unwrap();
            let rel = (s - r.s_analytic).abs() / r.s_analytic;
            pass &= rel < SIM_REL_TOL && !r.inconclusive;
            parts.push(format!("{} x={} {:?}: {:.4} vs {:.4}", sweep.name, r.param, r.arrival_model.unwrap(), s, r.s_analytic));
        }
        for pair in simulated.chunks(2) {
            if let [a, b] = pair {
                let (x, y) = (a.s_simulated.unwrap(), b.s_simulated.unwrap());
                pass &= (x - y).abs() / x < SIM_REL_TOL;
            }
        }
    }
    outcome(pass, parts.join("; "))
}

/// Lower root of `xi(g) = x` by plain bisection on `[0, 1]`.
fn lower_root(x: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if xi(mid) < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn meanfield_convergence() -> Outcome {
    let m = ClassModel::single(1.0, 0.2).unwrap();
    let target = lower_root(0.2);
    let verdict = classify_stability(&m).verdict;
    let t = mf_integrate(&MeanFieldState::empty(&m, 200), &m, &IntegrateOptions::new(200.0)).unwrap();
    let err = (t.final_gamma() - target).abs();
    outcome(
        err < MF_GAMMA_TOL && verdict == Verdict::GloballyStable && t.max_workload_residual < MF_RESIDUAL_TOL,
        format!(
            "gamma {:.6} vs {target:.6}, {verdict:?}, workload residual {:.1e}",
            t.final_gamma(),
            t.max_workload_residual
        ),
    )
}

fn bistability() -> Outcome {
    let m = ClassModel::single(3.0, 0.2).unwrap();
    let verdict = classify_stability(&m).verdict;
    let fps = fixed_points(&m, 200).unwrap();
    let mut worst: f64 = 0.0;
    for fp in &fps {
        let t = mf_integrate(&fp.state, &m, &IntegrateOptions::new(100.0)).unwrap();
        worst = t.samples.iter().map(|s| (s.gamma - fp.gamma).abs()).fold(worst, f64::max);
    }
    outcome(
        fps.len() == 2 && worst < MF_GAMMA_TOL && verdict == Verdict::NotGloballyStable,
        format!("{} fixed points, worst excursion {worst:.1e}, {verdict:?}", fps.len()),
    )
}

fn modulated(beta: f64, p: f64, lambda: f64) -> ClassSpec {
    ClassSpec { beta, p, lambda, kernel: vec![vec![0.0, 0.5], vec![0.5, 0.0]], g: vec![1.5, 0.5] }
}

fn fixed_point_consistency() -> Outcome {
    let models = [
        ClassModel::single(1.0, 0.2).unwrap(),
        ClassModel::single(3.0, 0.2).unwrap(),
        ClassModel::plain(&[(0.3, 2.0, 0.25), (0.7, 1.5, 0.1)], 0.9).unwrap(),
        ClassModel::new(vec![modulated(0.5, 2.0, 0.1), modulated(0.5, 1.4, 0.05)], ModulationSpeed::Slow, 1.0).unwrap(),
    ];
    let (mut root_err, mut deriv): (f64, f64) = (0.0, 0.0);
    let mut count = 0;
    for m in &models {
        for fp in fixed_points(m, 250).unwrap() {
            count += 1;
            root_err = root_err.max((xi(fp.gamma) - m.load() / m.b()).abs());
            deriv = deriv.max(mf_derivative(&fp.state, m).unwrap().sup_norm());
        }
    }
    outcome(
        root_err < FIXED_POINT_TOL && deriv < STATIONARY_TOL,
        format!("{count} points, root error {root_err:.1e}, derivative {deriv:.1e}"),
    )
}

fn csma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bit_match = true;
    for seed in 0..20 {
        let n = rng.random_range(1..=4);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.6 / n as f64)).collect();
        let spec = FiniteSystemSpec::bernoulli(&p, &lambda);
        let a = run_sim(&spec, 20_000, seed, 10).unwrap();
        let b = run_aloha(&spec, 20_000, seed, 10).unwrap();
        bit_match &= a.trace == b.trace && a.departures == b.departures;
    }

    let mut spec = FiniteSystemSpec::bernoulli(&[0.5, 0.5], &[0.0, 0.0]);
    spec.sigma = 10;
    spec.saturated = [0, 1].into_iter().collect();
    let reps = 10;
    let runs: Vec<_> = (0..reps).map(|r| run_sim(&spec, 1_000_000, 100 + r, 1_000_000).unwrap()).collect();
    let expected = 0.25 / 7.75;
    let mut within = true;
    let mut sim_detail = Vec::new();
    for i in 0..2 {
        let xs: Vec<f64> = runs.iter().map(|r| r.throughput(i)).collect();
        let m = xs.iter().sum::<f64>() / reps as f64;
        let se = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64 / reps as f64).sqrt();
        within &= (m - expected).abs() < CSMA_SIGMAS * se;
        sim_detail.push(format!("{m:.5}±{se:.1e}"));
    }

    let mut raw_monotone = true;
    let mut utilization_monotone = true;
    let mut example = String::new();
    for n in [2, 3, 5] {
        for p in [0.1, 0.3, 0.5] {
            let alpha = Direction::uniform(n).unwrap();
            let pa = AttemptVector::uniform(n, p).unwrap();
            let s: Vec<f64> = [1, 2, 5, 10, 50]
                .iter()
                .map(|&sigma| csma_shat_star(&alpha, &pa, CsmaParams::new(sigma).unwrap()).unwrap())
                .collect();
            let u: Vec<f64> = s.iter().zip([1.0, 2.0, 5.0, 10.0, 50.0]).map(|(s, sigma)| s * sigma).collect();
            raw_monotone &= s.windows(2).all(|w| w[1] >= w[0] - 1e-12);
            utilization_monotone &= u.windows(2).all(|w| w[1] >= w[0] - 1e-12);
            if n == 2 && p == 0.5 {
                example = format!("N=2 p=0.5: s {:.4} -> {:.4} over sigma 1..50", s[0], s[4]);
            }
        }
    }
    outcome(
        bit_match && within && raw_monotone,
        format!(
            "sigma=1 bit match {bit_match}; sigma=10 throughput {} vs {expected:.5} within 3 SE {within}; \
             s nondecreasing in sigma {raw_monotone} ({example}); sigma*s nondecreasing {utilization_monotone}",
            sim_detail.join(", ")
        ),
    )
}

fn finite_n() -> Outcome {
    let m = ClassModel::single(1.0, 0.2).unwrap();
    let ns = [10, 20, 50, 100, 200, 500, 1000];
    let t = experiments::finite_region_check(&m, &ns).unwrap();
    let oracle_ok = t.rows.iter().all(|r| {
        let n = r.n as f64;
        (r.s_finite - (1.0 - 1.0 / n).powf(n - 1.0)).abs() < 1e-12 && (r.s_limit - (-1.0f64).exp()).abs() < 1e-15
    });
    let pass = oracle_ok && t.min_scaled_gap >= GAP_BOUNDS.0 && t.max_scaled_gap <= GAP_BOUNDS.1;
    outcome(
        pass,
        format!("(s_N - 1/e) N in [{:.5}, {:.5}], closed form agrees {oracle_ok}", t.min_scaled_gap, t.max_scaled_gap),
    )
}

fn geometric(ratio: f64, k_max: usize) -> Vec<f64> {
    let mut law: Vec<f64> = (0..=k_max).map(|k| ratio.powi(k as i32)).collect();
    let total: f64 = law.iter().sum();
    law.iter_mut().for_each(|x| *x /= total);
    law
}

fn dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ode_violations = 0;
    for i in 0..PROPERTY_INSTANCES {
        let speed = if i % 2 == 0 { ModulationSpeed::Fast } else { ModulationSpeed::Slow };
        let beta = rng.random_range(0.2..0.8);
        let p = rng.random_range(0.5..2.5);
        let lambda = rng.random_range(0.02..0.3);
        let m = ClassModel::new(vec![modulated(beta, p, lambda), modulated(1.0 - beta, 0.7 * p, 0.5 * lambda)], speed, 1.0)
            .unwrap();
        let r = rng.random_range(0.0..0.6);
        let gap = rng.random_range(0.0..0.3);
        let mut low = MeanFieldState::from_buffer_laws(&m, &[geometric(r, 120), geometric(r, 120)]).unwrap();
        let mut high = MeanFieldState::from_buffer_laws(&m, &[geometric(r + gap, 120), geometric(r + gap, 120)]).unwrap();
        for _ in 0..4 {
            low = mf_integrate(&low, &m, &IntegrateOptions::new(5.0)).unwrap().final_state;
            high = mf_integrate(&high, &m, &IntegrateOptions::new(5.0)).unwrap().final_state;
            if !low.stochastically_le(&high, 1e-9) {
                ode_violations += 1;
            }
        }
    }

    let mut sim_violations = 0;
    for seed in 0..PROPERTY_INSTANCES as u64 {
        let n = rng.random_range(2..=5);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let load = rng.random_range(0.0..0.6);
        let base = FiniteSystemSpec::bernoulli(&p, &vec![load / n as f64; n]);
        let j = rng.random_range(0..n);
        let mut saturated = base.clone();
        saturated.saturated.insert(j);
        let mut backlogged = base.clone();
        backlogged.initial_backlog = (0..n).map(|_| rng.random_range(0..20)).collect();
        let a = run_sim(&base, 5_000, seed, 1).unwrap();
        let b = run_sim(&saturated, 5_000, seed, 1).unwrap();
        let c = run_sim(&backlogged, 5_000, seed, 1).unwrap();
        for t in 0..a.trace.len() {
            let (x, y, z) = (&a.trace.per_user[t], &b.trace.per_user[t], &c.trace.per_user[t]);
            if (0..n).any(|i| (i != j && x[i] > y[i]) || x[i] > z[i]) {
                sim_violations += 1;
            }
        }
    }
    outcome(
        ode_violations == 0 && sim_violations == 0,
        format!("{ode_violations} ODE and {sim_violations} coupled-simulation violations over {PROPERTY_INSTANCES} instances each"),
    )
}
