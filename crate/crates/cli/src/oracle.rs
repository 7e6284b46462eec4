//! Seeded batteries of the tabular certificates and the telescoping identity.

use std::fmt;

use enmpc_core::mdp::{
    perturb_kernel, random_mdp, rotate_cost, value_iteration, verify_theorem1, verify_theorem2, HorizonProblem,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-9;
pub const TELESCOPING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub tol: f64,
    /// Largest identity error seen over all instances.
    pub worst: f64,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} {}/{} instances, worst {:e} (tol {:e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances - self.failures.len(),
            self.instances,
            self.worst,
            self.tol
        )?;
        for m in self.failures.iter().take(5) {
            write!(f, "\n  {m}")?;
        }
        Ok(())
    }
}

/// Model-mismatch certificate on random (true MDP, perturbed model) pairs,
/// γ in [0.5, 0.95], horizons 1 to 6.
pub fn theorem1_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult { name: "theorem1", instances, tol: ORACLE_TOL, worst: 0.0, failures: Vec::new() };
    for i in 0..instances {
        let (ns, na) = (rng.random_range(2..=8), rng.random_range(2..=4));
        let gamma = rng.random_range(0.5..=0.95);
        let mdp = random_mdp(ns, na, gamma, &mut rng);
        let eps = rng.random_range(0.05..0.5);
        let model = perturb_kernel(mdp.kernel(), eps, &mut rng);
        let n = rng.random_range(1..=6);
        match verify_theorem1(&mdp, &model, n, ORACLE_TOL) {
            Ok(rep) => {
                r.worst = r.worst.max(rep.max_value_gap).max(rep.max_q_gap);
                if !rep.passed() {
                    r.failures.push(format!("instance {i}: {}", rep.violations[0]));
                }
            }
            Err(e) => r.failures.push(format!("instance {i}: {e}")),
        }
    }
    r
}

/// Cost rotation on random problems with random admissible rotations
/// `Λ(s,a) = μ(s) + m(s,a)`, `m >= 0` and zero on the optimal action.
pub fn theorem2_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult { name: "theorem2", instances, tol: ORACLE_TOL, worst: 0.0, failures: Vec::new() };
    for i in 0..instances {
        let (ns, na) = (rng.random_range(2..=8), rng.random_range(2..=4));
        let gamma = rng.random_range(0.5..=0.95);
        let mdp = random_mdp(ns, na, gamma, &mut rng);
        let star = match value_iteration(&mdp, 1e-13) {
            Ok(t) => t,
            Err(e) => {
                r.failures.push(format!("instance {i}: {e}"));
                continue;
            }
        };
        let problem = HorizonProblem {
            model: mdp.kernel().clone(),
            cost: mdp.cost().to_vec(),
            terminal: star.v.clone(),
            gamma,
            horizon: rng.random_range(1..=6),
        };
        let mut lambda = vec![0.0; ns * na];
        for s in 0..ns {
            let mu = rng.random_range(-5.0..5.0);
            for a in 0..na {
                let margin = if a == star.pi[s] || rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..2.0) };
                lambda[s * na + a] = mu + margin;
            }
        }
        let outcome = rotate_cost(&problem.cost, &lambda, &problem.model, &star.pi, &problem.terminal, gamma)
            .and_then(|rot| verify_theorem2(&problem, &rot, ORACLE_TOL));
        match outcome {
            Ok(rep) => {
                r.worst = r.worst.max(rep.max_value_error).max(rep.max_q_error);
                if !rep.passed() {
                    r.failures.push(format!(
                        "instance {i}: value {:e}, action value {:e}, policy mismatches {:?}",
                        rep.max_value_error, rep.max_q_error, rep.policy_mismatches
                    ));
                }
            }
            Err(e) => r.failures.push(format!("instance {i}: {e}")),
        }
    }
    r
}

/// `Σ_k γᵏ (λ(x_k) − γ λ(x_{k+1})) = λ(x_0) − γᴺ λ(x_N)` along random
/// trajectories of random linear models with a random quadratic storage `λ`.
pub fn telescoping_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult { name: "telescoping", instances, tol: TELESCOPING_TOL, worst: 0.0, failures: Vec::new() };
    for i in 0..instances {
        let (n, m) = (rng.random_range(1..=3), rng.random_range(1..=2));
        let horizon = rng.random_range(1..=20);
        let gamma: f64 = if rng.random_bool(0.2) { 1.0 } else { rng.random_range(0.05..1.0) };
        let mut uni = |r: usize, c: usize, w: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-w..w));
        let a = uni(n, n, 0.6);
        let b = uni(n, m, 1.0);
        let p = uni(n, n, 1.0);
        let p = (&p + p.transpose()) * 0.5;
        let q = uni(n, 1, 1.0);
        let c = uni(1, 1, 1.0)[(0, 0)];
        let lam = |x: &DVector<f64>| (x.transpose() * &p * x)[(0, 0)] + (q.transpose() * x)[(0, 0)] + c;
        let mut xs = vec![DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-2.0..2.0)))];
        for k in 0..horizon {
            let u = DVector::from_iterator(m, (0..m).map(|_| rng.random_range(-1.0..1.0)));
            xs.push(&a * &xs[k] + &b * u);
        }
        let stages: f64 = (0..horizon).map(|k| gamma.powi(k as i32) * (lam(&xs[k]) - gamma * lam(&xs[k + 1]))).sum();
        let total = lam(&xs[0]) - gamma.powi(horizon as i32) * lam(&xs[horizon]);
        let err = (stages - total).abs() / (1.0 + total.abs());
        r.worst = r.worst.max(err);
        if !(err <= TELESCOPING_TOL) {
            r.failures.push(format!("instance {i}: {stages} vs {total}"));
        }
    }
    r
}

/// All three batteries; sub-seeds are derived from `seed`.
pub fn run_oracle_suite(instances: usize, seed: u64) -> Vec<SuiteResult> {
    vec![
        theorem1_suite(instances, seed),
        theorem2_suite(instances, seed.wrapping_add(1)),
        telescoping_suite(instances, seed.wrapping_add(2)),
    ]
}
