//! Tabular ground truth: value iteration on finite MDPs, the modified stage
//! cost `L̂ = Q★ − γ E_model[V★]`, and numerical certificates for the
//! model-mismatch and cost-rotation results.
//!
//! Infinite costs are represented by `f64::INFINITY` and follow the rule
//! `finite + ∞ = ∞`; an expectation that puts positive mass on an infinite
//! value is infinite. Zero-probability successors are skipped, so `0·∞` never
//! arises.

use core::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::prelude::*;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;

/// Row-stochastic transition table `P[s⁺ | s, a]`, stored as
/// `p[(s * n_actions + a) * n_states + s⁺]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n_states: usize,
    n_actions: usize,
    p: Vec<f64>,
}

impl Kernel {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Contract("kernel needs at least one state and one action".to_string()));
        }
        if p.len() != n_states * n_actions * n_states {
            return Err(Error::Shape(format!(
                "kernel table has {} entries, expected {}",
                p.len(),
                n_states * n_actions * n_states
            )));
        }
        let k = Self { n_states, n_actions, p };
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = k.row(s, a);
                if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(Error::Contract(format!("kernel row ({s},{a}) has a negative or non-finite entry")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Contract(format!("kernel row ({s},{a}) sums to {sum}")));
                }
            }
        }
        Ok(k)
    }

    /// Deterministic kernel from a successor table `next[s * n_actions + a]`.
    pub fn deterministic(n_states: usize, n_actions: usize, next: &[usize]) -> Result<Self> {
        let mut p = vec![0.0; n_states * n_actions * n_states];
        for (i, &sn) in next.iter().enumerate() {
            if sn >= n_states {
                return Err(Error::Shape(format!("successor {sn} out of range")));
            }
            p[i * n_states + sn] = 1.0;
        }
        Self::new(n_states, n_actions, p)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.p[i..i + self.n_states]
    }

    pub fn table(&self) -> &[f64] {
        &self.p
    }

    /// `E[v(s⁺) | s, a]` with the infinity rule.
    pub fn expect(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (sn, &p) in self.row(s, a).iter().enumerate() {
            if p > 0.0 {
                if v[sn] == f64::INFINITY {
                    return f64::INFINITY;
                }
                acc += p * v[sn];
            }
        }
        acc
    }

    fn same_shape(&self, other: &Kernel) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::Contract(format!(
                "kernel shapes differ: {}x{} vs {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )));
        }
        Ok(())
    }
}

/// Finite MDP: kernel, stage cost `L(s,a)` (may be `+∞`) and discount.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    kernel: Kernel,
    cost: Vec<f64>,
    discount: f64,
}

impl FiniteMdp {
    pub fn new(kernel: Kernel, cost: Vec<f64>, discount: f64) -> Result<Self> {
        if cost.len() != kernel.n_states * kernel.n_actions {
            return Err(Error::Shape(format!("cost table has {} entries", cost.len())));
        }
        if cost.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
            return Err(Error::Contract("stage cost must be finite or +inf".to_string()));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::Contract(format!("discount {discount} outside (0, 1]")));
        }
        Ok(Self { kernel, cost, discount })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.kernel.n_actions
    }

    pub fn stage_cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.kernel.n_actions + a]
    }
}

/// `(V, Q, π)` with `Q` stored as `q[s * n_actions + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTriple {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub pi: Vec<usize>,
    pub n_actions: usize,
}

impl ValueTriple {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    fn from_q(q: Vec<f64>, n_actions: usize) -> Self {
        let n = q.len() / n_actions;
        let mut v = Vec::with_capacity(n);
        let mut pi = Vec::with_capacity(n);
        for s in 0..n {
            let (a, m) = argmin(&q[s * n_actions..(s + 1) * n_actions]);
            v.push(m);
            pi.push(a);
        }
        Self { v, q, pi, n_actions }
    }

    /// Largest violation of `V(s) = min_a Q(s,a) = Q(s, π(s))`.
    pub fn bellman_consistency_error(&self) -> f64 {
        let mut err = 0.0f64;
        for s in 0..self.v.len() {
            let row = &self.q[s * self.n_actions..(s + 1) * self.n_actions];
            let m = row.iter().copied().fold(f64::INFINITY, f64::min);
            err = err.max(gap(self.v[s], m)).max(gap(self.v[s], row[self.pi[s]]));
        }
        err
    }
}

/// Minimum of a row; ties (within `1e-12·(1+|min|)`) go to the lowest index.
pub fn argmin(row: &[f64]) -> (usize, f64) {
    let m = row.iter().copied().fold(f64::INFINITY, f64::min);
    if m == f64::INFINITY {
        return (0, m);
    }
    let thr = m + 1e-12 * (1.0 + m.abs());
    let a = row.iter().position(|&x| x <= thr).unwrap_or(0);
    (a, m)
}

/// `|a − b|` with `∞ − ∞ = 0` and finite-vs-infinite `= ∞`.
pub fn gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    pub record_residuals: bool,
}

impl Default for ViOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_sweeps: DEFAULT_MAX_SWEEPS, record_residuals: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViStats {
    pub sweeps: usize,
    pub residual: f64,
    /// Sup-norm change per sweep, when requested.
    pub residuals: Vec<f64>,
    /// States found to have infinite cost-to-go.
    pub infinite_states: Vec<usize>,
}

pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<ValueTriple> {
    value_iteration_with(mdp, ViOptions { tol, ..ViOptions::default() }).map(|(t, _)| t)
}

/// Value iteration. States that cannot avoid an infinite cost are detected by
/// a graph closure first; for `γ = 1`, states whose value still grows when
/// the sweep cap is reached are declared divergent (`+∞`) and the iteration
/// is restarted once on the remaining states.
pub fn value_iteration_with(mdp: &FiniteMdp, opts: ViOptions) -> Result<(ValueTriple, ViStats)> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut forced_inf = vec![false; ns];
    let mut restarts = 0;
    loop {
        let inf = infinite_closure(&mdp.kernel, &mdp.cost, &forced_inf);
        let mut v: Vec<f64> = (0..ns).map(|s| if inf[s] { f64::INFINITY } else { 0.0 }).collect();
        let mut next = v.clone();
        let mut residuals = Vec::new();
        let mut residual = f64::INFINITY;
        let mut sweeps = 0;
        while sweeps < opts.max_sweeps {
            sweeps += 1;
            residual = 0.0;
            for s in 0..ns {
                if inf[s] {
                    continue;
                }
                let mut best = f64::INFINITY;
                for a in 0..na {
                    let q = mdp.stage_cost(s, a) + mdp.discount * mdp.kernel.expect(s, a, &v);
                    if q < best {
                        best = q;
                    }
                }
                residual = residual.max((best - v[s]).abs());
                next[s] = best;
            }
            core::mem::swap(&mut v, &mut next);
            if opts.record_residuals {
                residuals.push(residual);
            }
            if residual <= opts.tol {
                break;
            }
        }
        if residual > opts.tol {
            if mdp.discount == 1.0 && restarts == 0 {
                let mut any = false;
                for s in 0..ns {
                    if !inf[s] && v[s] - next[s] > opts.tol {
                        forced_inf[s] = true;
                        any = true;
                    }
                }
                if any {
                    restarts += 1;
                    continue;
                }
            }
            return Err(Error::NonConvergence { what: "value iteration", iterations: sweeps, residual });
        }
        let q = q_from_v(&mdp.kernel, &mdp.cost, mdp.discount, &v);
        let triple = ValueTriple::from_q(q, na);
        let infinite_states = (0..ns).filter(|&s| triple.v[s] == f64::INFINITY).collect();
        return Ok((triple, ViStats { sweeps, residual, residuals, infinite_states }));
    }
}

/// States from which every action either costs `∞` or reaches such a state
/// with positive probability.
fn infinite_closure(kernel: &Kernel, cost: &[f64], seed: &[bool]) -> Vec<bool> {
    let (ns, na) = (kernel.n_states, kernel.n_actions);
    let mut inf = seed.to_vec();
    loop {
        let mut changed = false;
        for s in 0..ns {
            if inf[s] {
                continue;
            }
            let trapped = (0..na).all(|a| {
                cost[s * na + a] == f64::INFINITY || kernel.row(s, a).iter().zip(&inf).any(|(&p, &i)| p > 0.0 && i)
            });
            if trapped {
                inf[s] = true;
                changed = true;
            }
        }
        if !changed {
            return inf;
        }
    }
}

fn q_from_v(kernel: &Kernel, cost: &[f64], gamma: f64, v: &[f64]) -> Vec<f64> {
    let (ns, na) = (kernel.n_states, kernel.n_actions);
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            q[s * na + a] = cost[s * na + a] + gamma * kernel.expect(s, a, v);
        }
    }
    q
}

/// Modified stage cost `L̂(s,a) = Q★(s,a) − γ E_model[V★(ŝ⁺) | s,a]`, or `+∞`
/// when the model expectation (or `Q★`) is infinite.
pub fn modified_stage_cost(true_mdp: &FiniteMdp, model: &Kernel, triple: &ValueTriple) -> Result<Vec<f64>> {
    true_mdp.kernel.same_shape(model)?;
    let (ns, na) = (true_mdp.n_states(), true_mdp.n_actions());
    if triple.v.len() != ns || triple.q.len() != ns * na {
        return Err(Error::Contract("value triple does not match the MDP".to_string()));
    }
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let e = model.expect(s, a, &triple.v);
            let q = triple.q(s, a);
            out[s * na + a] = if e.is_finite() && q.is_finite() { q - true_mdp.discount * e } else { f64::INFINITY };
        }
    }
    Ok(out)
}

/// Solution of a finite-horizon problem by backward dynamic programming.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    /// `values[k]` is the value with `k` steps to go (`values[0]` = terminal).
    pub values: Vec<Vec<f64>>,
    /// `policies[k]` is the minimizer with `k + 1` steps to go.
    pub policies: Vec<Vec<usize>>,
    /// Action-value table with the full horizon to go.
    pub q: Vec<f64>,
    pub n_actions: usize,
}

impl HorizonSolution {
    pub fn horizon(&self) -> usize {
        self.policies.len()
    }

    pub fn value(&self) -> &[f64] {
        &self.values[self.horizon()]
    }

    /// First-stage policy.
    pub fn policy(&self) -> &[usize] {
        &self.policies[self.horizon() - 1]
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }
}

/// Backward DP for `min E[γᴺ V_f(s_N) + Σ γᵏ L(s_k, a_k)]`.
pub fn finite_horizon_dp(
    kernel: &Kernel,
    cost: &[f64],
    gamma: f64,
    terminal: &[f64],
    n: usize,
) -> Result<HorizonSolution> {
    let (ns, na) = (kernel.n_states, kernel.n_actions);
    if n == 0 {
        return Err(Error::Contract("horizon must be at least 1".to_string()));
    }
    if cost.len() != ns * na || terminal.len() != ns {
        return Err(Error::Shape("cost or terminal table does not match the kernel".to_string()));
    }
    if cost.iter().chain(terminal).any(|c| c.is_nan()) {
        return Err(Error::Contract("NaN in cost tables".to_string()));
    }
    let mut values = vec![terminal.to_vec()];
    let mut policies = Vec::with_capacity(n);
    let mut q = Vec::new();
    for _ in 0..n {
        q = q_from_v(kernel, cost, gamma, values.last().unwrap());
        let t = ValueTriple::from_q(q.clone(), na);
        values.push(t.v);
        policies.push(t.pi);
    }
    Ok(HorizonSolution { values, policies, q, n_actions: na })
}

/// The set of states whose model trajectories under `π` stay where `v` is
/// finite, computed as a reachability closure.
pub fn safe_set(model: &Kernel, pi: &[usize], v: &[f64]) -> Vec<bool> {
    let ns = model.n_states;
    let mut bad: Vec<bool> = v.iter().map(|x| !x.is_finite()).collect();
    loop {
        let mut changed = false;
        for s in 0..ns {
            if !bad[s] && model.row(s, pi[s]).iter().zip(&bad).any(|(&p, &b)| p > 0.0 && b) {
                bad[s] = true;
                changed = true;
            }
        }
        if !changed {
            return bad.into_iter().map(|b| !b).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub state: usize,
    pub action: Option<usize>,
    pub identity: &'static str,
    pub magnitude: f64,
}

fn write_list<T: fmt::Display>(f: &mut fmt::Formatter<'_>, key: &str, items: &[T]) -> fmt::Result {
    write!(f, "{key} =")?;
    for it in items {
        write!(f, " {it}")?;
    }
    writeln!(f)
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            Some(a) => write!(f, "{}@({},{}):{:e}", self.identity, self.state, a, self.magnitude),
            None => write!(f, "{}@{}:{:e}", self.identity, self.state, self.magnitude),
        }
    }
}

/// Outcome of the model-mismatch certificate at a fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub horizon: usize,
    pub tol: f64,
    /// Membership of each state in the safe set.
    pub safe: Vec<bool>,
    /// States with finite `V★` that are excluded from the safe set.
    pub excluded: Vec<usize>,
    pub max_value_gap: f64,
    pub max_q_gap: f64,
    pub policy_mismatches: Vec<usize>,
    pub q_pairs_checked: usize,
    /// Pairs with a finite model expectation whose successors leave the safe
    /// set; the action-value identity is not implied there and such pairs are
    /// listed separately.
    pub q_pairs_outside: Vec<(usize, usize)>,
    pub violations: Vec<Violation>,
    /// Action-value identity failures on `q_pairs_outside`.
    pub outside_violations: Vec<Violation>,
}

impl Theorem1Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for Theorem1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "report = theorem1")?;
        writeln!(f, "horizon = {}", self.horizon)?;
        writeln!(f, "tol = {:e}", self.tol)?;
        writeln!(f, "safe_states = {}", self.safe.iter().filter(|&&b| b).count())?;
        write_list(f, "excluded", &self.excluded)?;
        writeln!(f, "max_value_gap = {:e}", self.max_value_gap)?;
        writeln!(f, "max_q_gap = {:e}", self.max_q_gap)?;
        write_list(f, "policy_mismatches", &self.policy_mismatches)?;
        writeln!(f, "q_pairs_checked = {}", self.q_pairs_checked)?;
        writeln!(f, "q_pairs_outside = {}", self.q_pairs_outside.len())?;
        write_list(f, "violations", &self.violations)?;
        write_list(f, "outside_violations", &self.outside_violations)?;
        writeln!(f, "passed = {}", self.passed())
    }
}

/// Solves the true MDP, builds `L̂`, runs horizon-`n` DP on the model with
/// terminal `V★` and compares values, policies and action values on the safe
/// set.
pub fn verify_theorem1(true_mdp: &FiniteMdp, model: &Kernel, n: usize, tol: f64) -> Result<Theorem1Report> {
    let star = value_iteration(true_mdp, DEFAULT_TOL)?;
    let l_hat = modified_stage_cost(true_mdp, model, &star)?;
    let hat = finite_horizon_dp(model, &l_hat, true_mdp.discount, &star.v, n)?;
    let (ns, na) = (true_mdp.n_states(), true_mdp.n_actions());
    let safe = safe_set(model, &star.pi, &star.v);
    let excluded = (0..ns).filter(|&s| star.v[s].is_finite() && !safe[s]).collect();
    let mut report = Theorem1Report {
        horizon: n,
        tol,
        safe: safe.clone(),
        excluded,
        max_value_gap: 0.0,
        max_q_gap: 0.0,
        policy_mismatches: Vec::new(),
        q_pairs_checked: 0,
        q_pairs_outside: Vec::new(),
        violations: Vec::new(),
        outside_violations: Vec::new(),
    };
    for s in (0..ns).filter(|&s| safe[s]) {
        let g = gap(hat.value()[s], star.v[s]);
        report.max_value_gap = report.max_value_gap.max(g);
        if g > tol {
            report.violations.push(Violation { state: s, action: None, identity: "value", magnitude: g });
        }
        if hat.policy()[s] != star.pi[s] {
            report.policy_mismatches.push(s);
            report.violations.push(Violation { state: s, action: None, identity: "policy", magnitude: 1.0 });
        }
        for a in 0..na {
            if !model.expect(s, a, &star.v).is_finite() {
                continue;
            }
            report.q_pairs_checked += 1;
            let g = gap(hat.q(s, a), star.q(s, a));
            let inside = model.row(s, a).iter().zip(&safe).all(|(&p, &ok)| p == 0.0 || ok);
            if inside {
                report.max_q_gap = report.max_q_gap.max(g);
                if g > tol {
                    report.violations.push(Violation {
                        state: s,
                        action: Some(a),
                        identity: "action_value",
                        magnitude: g,
                    });
                }
            } else {
                report.q_pairs_outside.push((s, a));
                if g > tol {
                    report.outside_violations.push(Violation {
                        state: s,
                        action: Some(a),
                        identity: "action_value",
                        magnitude: g,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Convergence of the terminal-cost-free horizon-`N` value to `V★`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corollary1Report {
    /// `gaps[N-1]` = sup over the safe set of `|V̂_N − V★|`.
    pub gaps: Vec<f64>,
    /// `decay[N-1]` = sup over the safe set of `|E[γᴺ V★(ŝ_N)]|` under `π★`.
    pub decay: Vec<f64>,
    pub max_abs_v: f64,
    pub bound: f64,
    pub tol: f64,
    pub assumption_holds: bool,
}

impl Corollary1Report {
    pub fn final_gap(&self) -> f64 {
        *self.gaps.last().unwrap_or(&0.0)
    }

    pub fn passed(&self) -> bool {
        self.assumption_holds && self.final_gap() <= self.bound
    }
}

impl fmt::Display for Corollary1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "report = corollary1")?;
        writeln!(f, "n_max = {}", self.gaps.len())?;
        let g: Vec<String> = self.gaps.iter().map(|x| format!("{x:e}")).collect();
        write_list(f, "gaps", &g)?;
        let d: Vec<String> = self.decay.iter().map(|x| format!("{x:e}")).collect();
        write_list(f, "terminal_decay", &d)?;
        writeln!(f, "max_abs_v = {:e}", self.max_abs_v)?;
        writeln!(f, "bound = {:e}", self.bound)?;
        writeln!(f, "assumption_holds = {}", self.assumption_holds)?;
        writeln!(f, "passed = {}", self.passed())
    }
}

/// Runs the terminal-free horizon problems `N = 1..=n_max`. The decay
/// assumption is automatic for `γ < 1` on a finite table; for `γ = 1` it is
/// flagged as violated when `|E[V★(ŝ_N)]|` at `n_max` exceeds
/// `1e-6·(1 + max|V★|)`.
pub fn verify_corollary1(true_mdp: &FiniteMdp, model: &Kernel, n_max: usize, tol: f64) -> Result<Corollary1Report> {
    let gamma = true_mdp.discount;
    let star = value_iteration(true_mdp, DEFAULT_TOL)?;
    let l_hat = modified_stage_cost(true_mdp, model, &star)?;
    let ns = true_mdp.n_states();
    let safe = safe_set(model, &star.pi, &star.v);
    let zero = vec![0.0; ns];
    let dp = finite_horizon_dp(model, &l_hat, gamma, &zero, n_max)?;
    let max_abs_v = star.v.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut gaps = Vec::with_capacity(n_max);
    let mut decay = Vec::with_capacity(n_max);
    // Distribution of ŝ_N under π★ for every safe start, propagated jointly.
    let starts: Vec<usize> = (0..ns).filter(|&s| safe[s]).collect();
    let mut dist: Vec<Vec<f64>> = starts
        .iter()
        .map(|&s| {
            let mut d = vec![0.0; ns];
            d[s] = 1.0;
            d
        })
        .collect();
    let mut gk = 1.0;
    for n in 1..=n_max {
        gk *= gamma;
        let g = starts.iter().fold(0.0f64, |m, &s| m.max(gap(dp.values[n][s], star.v[s])));
        gaps.push(g);
        let mut worst = 0.0f64;
        for d in dist.iter_mut() {
            let mut nd = vec![0.0; ns];
            for s in 0..ns {
                if d[s] > 0.0 {
                    for (sn, &p) in model.row(s, star.pi[s]).iter().enumerate() {
                        nd[sn] += d[s] * p;
                    }
                }
            }
            *d = nd;
            let e: f64 = (0..ns).filter(|&s| d[s] > 0.0).map(|s| d[s] * star.v[s]).sum();
            worst = worst.max((gk * e).abs());
        }
        decay.push(worst);
    }
    let assumption_holds = if gamma < 1.0 {
        decay.iter().all(|d| d.is_finite())
    } else {
        decay.last().is_some_and(|&d| d <= 1e-6 * (1.0 + max_abs_v))
    };
    let bound = gamma.powi(n_max as i32) * max_abs_v + tol;
    Ok(Corollary1Report { gaps, decay, max_abs_v, bound, tol, assumption_holds })
}

/// Rotated problem `(L̄, V̄_f)` together with the data used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedProblem {
    pub cost: Vec<f64>,
    pub terminal: Vec<f64>,
    pub lambda: Vec<f64>,
    pub policy: Vec<usize>,
}

/// `L̄ = L̂ + Λ(s,a) − γ E_model[Λ(ŝ⁺, π̂(ŝ⁺))]`, `V̄_f = V_f + Λ(s, π̂(s))`.
///
/// `lambda` is indexed like the cost table. Fails when
/// `Λ(s,a) >= Λ(s, π̂(s))` is violated or `Λ` is not finite where `L̂` is.
pub fn rotate_cost(
    l_hat: &[f64],
    lambda: &[f64],
    model: &Kernel,
    policy: &[usize],
    terminal: &[f64],
    gamma: f64,
) -> Result<RotatedProblem> {
    let (ns, na) = (model.n_states, model.n_actions);
    if l_hat.len() != ns * na || lambda.len() != ns * na || policy.len() != ns || terminal.len() != ns {
        return Err(Error::Shape("rotation tables do not match the kernel".to_string()));
    }
    for s in 0..ns {
        let base = lambda[s * na + policy[s]];
        for a in 0..na {
            let l = lambda[s * na + a];
            if l_hat[s * na + a].is_finite() && !l.is_finite() {
                return Err(Error::Contract(format!("rotation is not finite at ({s},{a}) where the cost is")));
            }
            if l < base {
                return Err(Error::Contract(format!(
                    "rotation violates Λ(s,a) >= Λ(s,π(s)) at (s,a) = ({s},{a}): {l} < {base}"
                )));
            }
        }
    }
    let on_policy: Vec<f64> = (0..ns).map(|s| lambda[s * na + policy[s]]).collect();
    let mut cost = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let i = s * na + a;
            cost[i] = if l_hat[i].is_finite() {
                l_hat[i] + lambda[i] - gamma * model.expect(s, a, &on_policy)
            } else {
                f64::INFINITY
            };
        }
    }
    let terminal = terminal.iter().zip(&on_policy).map(|(v, l)| v + l).collect();
    Ok(RotatedProblem { cost, terminal, lambda: lambda.to_vec(), policy: policy.to_vec() })
}

/// A horizon-`N` problem on a model kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonProblem {
    pub model: Kernel,
    pub cost: Vec<f64>,
    pub terminal: Vec<f64>,
    pub gamma: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Report {
    pub policy_mismatches: Vec<(usize, usize)>,
    pub max_value_error: f64,
    pub max_q_error: f64,
    /// Smallest `Q̄(s,a) − Q̄(s,π̂(s))` over `a ≠ π̂(s)` with finite values.
    pub min_margin: f64,
    pub tol: f64,
}

impl Theorem2Report {
    pub fn passed(&self) -> bool {
        self.policy_mismatches.is_empty() && self.max_value_error <= self.tol && self.max_q_error <= self.tol
    }
}

impl fmt::Display for Theorem2Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "report = theorem2")?;
        let pm: Vec<String> = self.policy_mismatches.iter().map(|(k, s)| format!("{k}:{s}")).collect();
        write_list(f, "policy_mismatches", &pm)?;
        writeln!(f, "max_value_error = {:e}", self.max_value_error)?;
        writeln!(f, "max_q_error = {:e}", self.max_q_error)?;
        writeln!(f, "min_margin = {:e}", self.min_margin)?;
        writeln!(f, "tol = {:e}", self.tol)?;
        writeln!(f, "passed = {}", self.passed())
    }
}

/// Solves both problems by DP and checks `π̄ = π̂` at every stage,
/// `V̄_N = V̂_N + Λ(s, π̂(s))` and `Q̄_N = Q̂_N + Λ(s,a)`.
pub fn verify_theorem2(original: &HorizonProblem, rotated: &RotatedProblem, tol: f64) -> Result<Theorem2Report> {
    let o = finite_horizon_dp(&original.model, &original.cost, original.gamma, &original.terminal, original.horizon)?;
    let r = finite_horizon_dp(&original.model, &rotated.cost, original.gamma, &rotated.terminal, original.horizon)?;
    let (ns, na) = (original.model.n_states, original.model.n_actions);
    let mut rep = Theorem2Report {
        policy_mismatches: Vec::new(),
        max_value_error: 0.0,
        max_q_error: 0.0,
        min_margin: f64::INFINITY,
        tol,
    };
    for k in 0..original.horizon {
        for s in 0..ns {
            if o.policies[k][s] != r.policies[k][s] && o.values[k + 1][s].is_finite() {
                rep.policy_mismatches.push((k, s));
            }
        }
    }
    for s in 0..ns {
        let pi = o.policy()[s];
        let target = o.value()[s] + rotated.lambda[s * na + pi];
        rep.max_value_error = rep.max_value_error.max(gap(r.value()[s], target));
        for a in 0..na {
            let target = o.q(s, a) + rotated.lambda[s * na + a];
            rep.max_q_error = rep.max_q_error.max(gap(r.q(s, a), target));
            if a != r.policy()[s] && r.q(s, a).is_finite() {
                rep.min_margin = rep.min_margin.min(r.q(s, a) - r.q(s, r.policy()[s]));
            }
        }
    }
    Ok(rep)
}

/// State-only storage function `λ = V̂_N − V̌_N` that rotates one problem's
/// value onto another's (infinite where either value is).
pub fn value_rotation_storage(v_target: &[f64], v_source: &[f64]) -> Vec<f64> {
    v_target
        .iter()
        .zip(v_source)
        .map(|(t, s)| if t.is_finite() && s.is_finite() { t - s } else { f64::INFINITY })
        .collect()
}

/// Expands a state-only `λ(s)` to a `Λ(s,a)` table.
pub fn state_rotation(lambda: &[f64], n_actions: usize) -> Vec<f64> {
    lambda.iter().flat_map(|&l| core::iter::repeat(l).take(n_actions)).collect()
}

/// Random kernel; each row has at least one successor and roughly
/// `density·n` nonzero entries.
pub fn random_kernel<R: Rng + ?Sized>(n_states: usize, n_actions: usize, density: f64, rng: &mut R) -> Kernel {
    let mut p = vec![0.0; n_states * n_actions * n_states];
    for row in p.chunks_mut(n_states) {
        let forced = rng.random_range(0..n_states);
        for (j, x) in row.iter_mut().enumerate() {
            if j == forced || rng.random::<f64>() < density {
                *x = rng.random::<f64>() + 1e-3;
            }
        }
        normalize(row);
    }
    Kernel::new(n_states, n_actions, p).expect("rows are normalized")
}

/// Random MDP with costs uniform on `[-1, 1]`.
pub fn random_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> FiniteMdp {
    let kernel = random_kernel(n_states, n_actions, 0.6, rng);
    let cost = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
    FiniteMdp::new(kernel, cost, gamma).expect("valid by construction")
}

/// Mixture `(1−ε)P + εR` with a random kernel `R` of the same shape.
pub fn perturb_kernel<R: Rng + ?Sized>(kernel: &Kernel, eps: f64, rng: &mut R) -> Kernel {
    let r = random_kernel(kernel.n_states, kernel.n_actions, 0.6, rng);
    let mut p: Vec<f64> = kernel.p.iter().zip(&r.p).map(|(a, b)| (1.0 - eps) * a + eps * b).collect();
    for row in p.chunks_mut(kernel.n_states) {
        normalize(row);
    }
    Kernel::new(kernel.n_states, kernel.n_actions, p).expect("rows are normalized")
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    for x in row.iter_mut() {
        *x /= s;
    }
    // Push the rounding residue onto the largest entry so the row sums to 1
    // as closely as the format allows.
    let s: f64 = row.iter().sum();
    let (imax, _) = row.iter().enumerate().fold((0, 0.0), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    row[imax] += 1.0 - s;
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exact policy iteration: the oracle for value iteration.
    fn policy_iteration(mdp: &FiniteMdp) -> (Vec<f64>, Vec<usize>) {
        let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
        let mut pi = vec![0usize; ns];
        loop {
            let mut m = DMatrix::<f64>::identity(ns, ns);
            let mut rhs = DVector::<f64>::zeros(ns);
            for s in 0..ns {
                rhs[s] = mdp.stage_cost(s, pi[s]);
                for (sn, &p) in mdp.kernel().row(s, pi[s]).iter().enumerate() {
                    m[(s, sn)] -= g * p;
                }
            }
            let v = m.lu().solve(&rhs).unwrap();
            let v: Vec<f64> = v.iter().copied().collect();
            let mut stable = true;
            for s in 0..ns {
                let qs: Vec<f64> = (0..na).map(|a| mdp.stage_cost(s, a) + g * mdp.kernel().expect(s, a, &v)).collect();
                let (a, m) = argmin(&qs);
                if m < qs[pi[s]] - 1e-12 && a != pi[s] {
                    pi[s] = a;
                    stable = false;
                }
            }
            if stable {
                return (v, pi);
            }
        }
    }

    fn single(cost: f64, gamma: f64) -> FiniteMdp {
        FiniteMdp::new(Kernel::deterministic(1, 1, &[0]).unwrap(), vec![cost], gamma).unwrap()
    }

    #[test]
    fn geometric_series() {
        let t = value_iteration(&single(1.0, 0.9), 1e-12).unwrap();
        assert!((t.v[0] - 10.0).abs() < 1e-10);
    }

    #[test]
    fn zero_cost_gives_zero_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernel(4, 2, 0.5, &mut rng);
        let t = value_iteration(&FiniteMdp::new(k, vec![0.0; 8], 0.9).unwrap(), 1e-12).unwrap();
        assert!(t.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_policy_iteration_seed0() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = random_mdp(5, 3, 0.9, &mut rng);
        let t = value_iteration(&mdp, 1e-12).unwrap();
        let (v, pi) = policy_iteration(&mdp);
        for s in 0..5 {
            assert!((t.v[s] - v[s]).abs() < 1e-10, "{} vs {}", t.v[s], v[s]);
        }
        assert_eq!(t.pi, pi);
        assert!(t.bellman_consistency_error() < 1e-10);
    }

    #[test]
    fn kernel_validation() {
        assert!(Kernel::new(1, 1, vec![0.5]).is_err());
        assert!(Kernel::new(2, 1, vec![1.5, -0.5, 0.0, 1.0]).is_err());
        assert!(FiniteMdp::new(Kernel::deterministic(1, 1, &[0]).unwrap(), vec![f64::NAN], 0.9).is_err());
        assert!(FiniteMdp::new(Kernel::deterministic(1, 1, &[0]).unwrap(), vec![1.0], 0.0).is_err());
    }

    #[test]
    fn infinite_costs_propagate() {
        // State 2 has only infinite actions; state 1 can only go to 2.
        let next = [0, 1, 2, 2, 2, 2];
        let k = Kernel::deterministic(3, 2, &next).unwrap();
        let cost = vec![1.0, 0.0, 1.0, 1.0, f64::INFINITY, f64::INFINITY];
        let t = value_iteration(&FiniteMdp::new(k, cost, 0.9).unwrap(), 1e-12).unwrap();
        assert!((t.v[0] - 10.0).abs() < 1e-10);
        assert_eq!(t.v[1], f64::INFINITY);
        assert_eq!(t.v[2], f64::INFINITY);
        assert_eq!(t.q(0, 1), f64::INFINITY);
    }

    #[test]
    fn undiscounted_with_absorbing_state() {
        // 0 -> 1 -> 2 (absorbing, zero cost).
        let k = Kernel::deterministic(3, 1, &[1, 2, 2]).unwrap();
        let t = value_iteration(&FiniteMdp::new(k, vec![1.0, 2.0, 0.0], 1.0).unwrap(), 1e-12).unwrap();
        assert_eq!(t.v, vec![3.0, 2.0, 0.0]);
    }

    #[test]
    fn undiscounted_divergent_cycle_is_infinite() {
        let k = Kernel::deterministic(3, 1, &[1, 0, 2]).unwrap();
        let mdp = FiniteMdp::new(k, vec![1.0, 1.0, 0.0], 1.0).unwrap();
        let (t, stats) = value_iteration_with(&mdp, ViOptions { max_sweeps: 2000, ..Default::default() }).unwrap();
        assert_eq!(t.v[0], f64::INFINITY);
        assert_eq!(t.v[1], f64::INFINITY);
        assert_eq!(t.v[2], 0.0);
        assert_eq!(stats.infinite_states, vec![0, 1]);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let mdp = single(1.0, 0.999);
        let e = value_iteration_with(&mdp, ViOptions { max_sweeps: 10, ..Default::default() }).unwrap_err();
        assert!(matches!(e, Error::NonConvergence { iterations: 10, .. }));
    }

    #[test]
    fn exact_model_gives_original_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(6, 3, 0.9, &mut rng);
        let t = value_iteration(&mdp, 1e-12).unwrap();
        let l_hat = modified_stage_cost(&mdp, mdp.kernel(), &t).unwrap();
        for (a, b) in l_hat.iter().zip(mdp.cost()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn modified_cost_is_infinite_on_infinite_successors() {
        let k = Kernel::deterministic(2, 2, &[0, 1, 1, 1]).unwrap();
        let mdp = FiniteMdp::new(k, vec![1.0, 5.0, f64::INFINITY, f64::INFINITY], 0.9).unwrap();
        let t = value_iteration(&mdp, 1e-12).unwrap();
        // Model sends action 0 of state 0 to the infinite state.
        let model = Kernel::deterministic(2, 2, &[1, 1, 1, 1]).unwrap();
        let l_hat = modified_stage_cost(&mdp, &model, &t).unwrap();
        assert_eq!(l_hat[0], f64::INFINITY);
        assert!(modified_stage_cost(&mdp, &Kernel::deterministic(1, 1, &[0]).unwrap(), &t).is_err());
    }

    #[test]
    fn theorem1_exact_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = random_mdp(5, 3, 0.9, &mut rng);
        for n in [1, 2, 5] {
            let r = verify_theorem1(&mdp, mdp.kernel(), n, 1e-9).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn theorem1_seed0_perturbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = random_mdp(5, 3, 0.9, &mut rng);
        let model = perturb_kernel(mdp.kernel(), 0.3, &mut rng);
        let r = verify_theorem1(&mdp, &model, 3, 1e-9).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.safe.iter().all(|&b| b));
    }

    /// States 0,1 finite; state 2 is a trap. The true system keeps state 1 at
    /// 1 under its only finite action, the model sends it to the trap.
    fn trap_instance() -> (FiniteMdp, Kernel) {
        let truth = Kernel::deterministic(3, 2, &[0, 1, 1, 1, 2, 2]).unwrap();
        let cost = vec![0.01, 0.5, 0.0, f64::INFINITY, f64::INFINITY, f64::INFINITY];
        let mdp = FiniteMdp::new(truth, cost, 0.9).unwrap();
        let model = Kernel::deterministic(3, 2, &[0, 1, 2, 2, 2, 2]).unwrap();
        (mdp, model)
    }

    #[test]
    fn theorem1_trap_states_are_excluded() {
        let (mdp, model) = trap_instance();
        let r = verify_theorem1(&mdp, &model, 3, 1e-9).unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert!(r.safe[0] && !r.safe[1] && !r.safe[2]);
        assert!(r.passed(), "{r}");
        // Action 1 of state 0 reaches the excluded state: its action value is
        // not recovered even though the model expectation is finite.
        assert_eq!(r.q_pairs_outside, vec![(0, 1)]);
        assert_eq!(r.outside_violations.len(), 1);
    }

    #[test]
    fn corollary1_exact_model_decays_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_mdp(4, 2, 0.9, &mut rng);
        let r = verify_corollary1(&mdp, mdp.kernel(), 40, 1e-9).unwrap();
        assert!(r.passed(), "{r}");
        for (n, g) in r.gaps.iter().enumerate() {
            assert!(*g <= 0.9f64.powi(n as i32 + 1) * r.max_abs_v + 1e-9);
        }
    }

    #[test]
    fn corollary1_seed0() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mdp = random_mdp(5, 3, 0.9, &mut rng);
        let model = perturb_kernel(mdp.kernel(), 0.3, &mut rng);
        let r = verify_corollary1(&mdp, &model, 30, 1e-9).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.final_gap() <= 0.9f64.powi(30) * r.max_abs_v + 1e-9);
    }

    #[test]
    fn corollary1_flags_undiscounted_cycle() {
        // Truth: both states reach the absorbing state 2 in one step.
        let truth = Kernel::deterministic(3, 1, &[2, 2, 2]).unwrap();
        let mdp = FiniteMdp::new(truth, vec![1.0, 1.0, 0.0], 1.0).unwrap();
        // Model: states 0 and 1 swap forever.
        let model = Kernel::deterministic(3, 1, &[1, 0, 2]).unwrap();
        let r = verify_corollary1(&mdp, &model, 50, 1e-9).unwrap();
        assert!(!r.assumption_holds);
        assert!(!r.passed());
    }

    fn theorem2_instance(seed: u64) -> (HorizonProblem, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(5, 3, 0.9, &mut rng);
        // Stationary terminal: the infinite-horizon value of the problem
        // itself, so the optimal policy is the same at every stage.
        let t = value_iteration(&mdp, 1e-13).unwrap();
        let p = HorizonProblem {
            model: mdp.kernel().clone(),
            cost: mdp.cost().to_vec(),
            terminal: t.v.clone(),
            gamma: 0.9,
            horizon: 4,
        };
        (p, t.pi)
    }

    #[test]
    fn zero_rotation_is_identity() {
        let (p, pi) = theorem2_instance(6);
        let r = rotate_cost(&p.cost, &[0.0; 15], &p.model, &pi, &p.terminal, p.gamma).unwrap();
        assert_eq!(r.cost, p.cost);
        assert_eq!(r.terminal, p.terminal);
        assert!(verify_theorem2(&p, &r, 1e-12).unwrap().passed());
    }

    #[test]
    fn state_rotation_preserves_policy() {
        let (p, pi) = theorem2_instance(0);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let lam: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        let r = rotate_cost(&p.cost, &state_rotation(&lam, 3), &p.model, &pi, &p.terminal, p.gamma).unwrap();
        let rep = verify_theorem2(&p, &r, 1e-9).unwrap();
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn rotation_rejects_inadmissible_lambda() {
        let (p, pi) = theorem2_instance(0);
        let mut lam = vec![0.0; 15];
        let a = (pi[2] + 1) % 3;
        lam[2 * 3 + a] = -1.0;
        let e = rotate_cost(&p.cost, &lam, &p.model, &pi, &p.terminal, p.gamma).unwrap_err();
        assert!(matches!(e, Error::Contract(ref m) if m.contains("(2,")));
    }

    #[test]
    fn margin_rotation_makes_policy_strict() {
        let (p, pi) = theorem2_instance(7);
        let mut lam = vec![0.0; 15];
        for s in 0..5 {
            for a in 0..3 {
                if a != pi[s] {
                    lam[s * 3 + a] = 0.5;
                }
            }
        }
        let r = rotate_cost(&p.cost, &lam, &p.model, &pi, &p.terminal, p.gamma).unwrap();
        let rep = verify_theorem2(&p, &r, 1e-9).unwrap();
        assert!(rep.passed(), "{rep}");
        assert!(rep.min_margin > 0.5 - 1e-9);
    }

    #[test]
    fn storage_rotation_reaches_target_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = random_mdp(5, 3, 0.9, &mut rng);
        let other_cost: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..2.0)).collect();
        let k = target.kernel().clone();
        let hat = finite_horizon_dp(&k, target.cost(), 0.9, &[0.0; 5], 6).unwrap();
        let check = finite_horizon_dp(&k, &other_cost, 0.9, &[0.0; 5], 6).unwrap();
        let lam = value_rotation_storage(hat.value(), check.value());
        let src = HorizonProblem { model: k.clone(), cost: other_cost, terminal: vec![0.0; 5], gamma: 0.9, horizon: 6 };
        let r = rotate_cost(&src.cost, &state_rotation(&lam, 3), &k, check.policy(), &src.terminal, 0.9).unwrap();
        let rot = finite_horizon_dp(&k, &r.cost, 0.9, &r.terminal, 6).unwrap();
        for s in 0..5 {
            assert!((rot.value()[s] - hat.value()[s]).abs() < 1e-9);
        }
        assert!(verify_theorem2(&src, &r, 1e-9).unwrap().passed());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn contraction_factor_at_most_gamma(seed in 0u64..10_000, gamma in 0.5f64..0.95) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mdp = random_mdp(6, 3, gamma, &mut rng);
                let (_, st) = value_iteration_with(&mdp, ViOptions { record_residuals: true, ..Default::default() }).unwrap();
                for w in st.residuals.windows(2) {
                    if w[0] > 1e-10 {
                        prop_assert!(w[1] <= gamma * w[0] * (1.0 + 1e-9) + 1e-13);
                    }
                }
            }

            #[test]
            fn value_triples_are_bellman_consistent(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mdp = random_mdp(5, 4, 0.9, &mut rng);
                let t = value_iteration(&mdp, 1e-12).unwrap();
                prop_assert!(t.bellman_consistency_error() < 1e-12);
            }

            #[test]
            fn exact_model_degeneracy(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mdp = random_mdp(5, 3, 0.8, &mut rng);
                let t = value_iteration(&mdp, 1e-12).unwrap();
                let l = modified_stage_cost(&mdp, mdp.kernel(), &t).unwrap();
                for (a, b) in l.iter().zip(mdp.cost()) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }

            #[test]
            fn rotation_never_changes_argmin(seed in 0u64..10_000, margin in 0.0f64..1.0) {
                let (p, pi) = theorem2_instance(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let mut lam = vec![0.0; 15];
                for s in 0..5 {
                    let base: f64 = rng.random_range(-3.0..3.0);
                    for a in 0..3 {
                        lam[s * 3 + a] = base + if a == pi[s] { 0.0 } else { margin * rng.random::<f64>() };
                    }
                }
                let r = rotate_cost(&p.cost, &lam, &p.model, &pi, &p.terminal, p.gamma).unwrap();
                let rep = verify_theorem2(&p, &r, 1e-9).unwrap();
                prop_assert!(rep.passed(), "{}", rep);
            }
        }
    }
}
