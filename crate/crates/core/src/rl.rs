//! Learning rules on top of the parametric scheme: TD error, on-policy and
//! batch Q-learning, ε-greedy exploration, the deterministic policy-gradient
//! actor-critic, and a closed-loop [`Learner`] that ties them to a plant.
//!
//! Costs are minimized. The Q-learning update `θ ← θ + ατ∇_θQ_θ(s, a)` is the
//! usual semi-gradient step for either sign convention; the actor step of the
//! policy gradient moves against `∇_θπ ∇_aQ_w`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lqr::{LqrProblem, LqrSolution};
use crate::ocp::ParametricOcp;
use crate::plants::Plant;
use crate::prelude::*;
use crate::sensitivity::LagrangianEvaluator;
use crate::solver::{PrimalDualSolution, Solver, SolverOptions};
use crate::theta::ThetaVector;

/// One closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub step: usize,
    pub s: DVector<f64>,
    pub a: DVector<f64>,
    /// Realized plant stage cost `L(s, a)`.
    pub cost: f64,
    pub s_next: DVector<f64>,
    pub explored: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !(finite(&self.s) && finite(&self.a) && finite(&self.s_next) && self.cost.is_finite()) {
            return Err(Error::Contract(format!("transition {} has non-finite entries", self.step)));
        }
        Ok(())
    }
}

/// Which stage cost enters the Q-learning TD error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdCost {
    /// The realized plant cost `L(s, a)` carried by the transition.
    Plant,
    /// The scheme's relaxed stage cost `L_θ(s, a) = l_θ + wᵀmax(0, h_θ)`.
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOptions {
    /// Parameter steps longer than this are scaled back (and reported).
    pub clip_norm: f64,
    pub td_cost: TdCost,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self { clip_norm: 1e3, td_cost: TdCost::Model }
    }
}

/// `τ = L + γV_θ(s') − Q_θ(s, a)` with the pieces that produced it.
#[derive(Debug, Clone)]
pub struct TdEvaluation {
    pub tau: f64,
    pub cost: f64,
    pub q: f64,
    pub v_next: f64,
    pub grad_q: DVector<f64>,
    pub q_solution: PrimalDualSolution,
}

pub fn td_error(
    tr: &Transition,
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    td_cost: TdCost,
    solver: &mut Solver,
) -> Result<TdEvaluation> {
    tr.validate()?;
    let inst = ocp.instantiate(theta)?;
    let q_solution = solver.solve_q(&inst, &tr.s, &tr.a)?;
    let grad_q = LagrangianEvaluator::new(ocp, theta, &inst, &q_solution, solver)?.gradient();
    let v_next = solver.solve_v(&inst, &tr.s_next)?.objective;
    let cost = match td_cost {
        TdCost::Plant => tr.cost,
        TdCost::Model => inst.relaxed_stage_cost(&tr.s, &tr.a),
    };
    let q = q_solution.objective;
    Ok(TdEvaluation { tau: cost + inst.gamma * v_next - q, cost, q, v_next, grad_q, q_solution })
}

/// Outcome of one parameter update.
#[derive(Debug, Clone)]
pub struct QUpdate {
    pub theta: ThetaVector,
    pub tau: f64,
    pub cost: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub clipped: bool,
    pub projected: bool,
}

/// `θ + rate·g` with the direction `g` clipped at `clip_norm` and the PD
/// slices projected. Returns `(θ', applied step norm, clipped, projected)`.
pub fn apply_step(
    theta: &ThetaVector,
    direction: &DVector<f64>,
    rate: f64,
    clip_norm: f64,
) -> Result<(ThetaVector, f64, bool, bool)> {
    if direction.len() != theta.len() {
        return Err(Error::Shape(format!("direction has {} entries, theta {}", direction.len(), theta.len())));
    }
    let norm = direction.norm();
    if !norm.is_finite() || !rate.is_finite() {
        return Err(Error::Contract("non-finite parameter step".to_string()));
    }
    let (scale, clipped) = if norm > clip_norm { (clip_norm / norm, true) } else { (1.0, false) };
    let mut next = theta.clone();
    if rate != 0.0 && norm != 0.0 {
        for (t, d) in next.values_mut().iter_mut().zip(direction.iter()) {
            *t += rate * (scale * d);
        }
    }
    let projected = next.project_pd();
    Ok((next, (rate * scale * norm).abs(), clipped, projected))
}

/// `θ ← θ + ατ∇_θQ_θ(s, a)`, projected.
pub fn q_step_on_policy(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    tr: &Transition,
    alpha: f64,
    opts: &UpdateOptions,
    solver: &mut Solver,
) -> Result<QUpdate> {
    let td = td_error(tr, ocp, theta, opts.td_cost, solver)?;
    let (theta, step_norm, clipped, projected) = apply_step(theta, &(&td.grad_q * td.tau), alpha, opts.clip_norm)?;
    Ok(QUpdate { theta, tau: td.tau, cost: td.cost, grad_norm: td.grad_q.norm(), step_norm, clipped, projected })
}

/// The batch rule: TD error and gradient at the learning parameters `θ̃`,
/// while the transition came from the behavior parameters, which are left
/// alone.
pub fn q_step_off_policy(
    ocp: &ParametricOcp,
    theta_behavior: &ThetaVector,
    theta_learn: &ThetaVector,
    tr: &Transition,
    alpha: f64,
    opts: &UpdateOptions,
    solver: &mut Solver,
) -> Result<QUpdate> {
    if theta_behavior.layout() != theta_learn.layout() {
        return Err(Error::Layout("behavior and learning parameters use different layouts".to_string()));
    }
    q_step_on_policy(ocp, theta_learn, tr, alpha, opts, solver)
}

/// `a★` with probability `1 − ε`, otherwise `sat(a★ + scale·e, lb, ub)` with
/// `e` standard normal. Returns the input and whether it explored.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    a_star: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    epsilon: f64,
    scale: f64,
    rng: &mut R,
) -> (DVector<f64>, bool) {
    let u: f64 = rng.random();
    if u >= epsilon {
        return (a_star.clone(), false);
    }
    let a = DVector::from_iterator(
        a_star.len(),
        (0..a_star.len()).map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            (a_star[i] + scale * e).clamp(lb[i], ub[i])
        }),
    );
    (a, true)
}

/// Critic `Q_w(s, a) = wᵀφ(s, a)` with `φ` all monomials of degree ≤ 2 in
/// `z = (s, a)`: `z_i z_j` for `i ≤ j` (row-major upper triangle), then `z`,
/// then `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCritic {
    pub ns: usize,
    pub na: usize,
    pub w: DVector<f64>,
}

impl QuadraticCritic {
    pub fn feature_count(ns: usize, na: usize) -> usize {
        let n = ns + na;
        n * (n + 1) / 2 + n + 1
    }

    pub fn zeros(ns: usize, na: usize) -> Self {
        Self { ns, na, w: DVector::zeros(Self::feature_count(ns, na)) }
    }

    /// Critic equal to `zᵀHz + gᵀz + c`.
    pub fn from_quadratic(ns: usize, na: usize, h: &DMatrix<f64>, g: &DVector<f64>, c: f64) -> Self {
        let n = ns + na;
        let mut w = DVector::zeros(Self::feature_count(ns, na));
        let mut p = 0;
        for i in 0..n {
            for j in i..n {
                w[p] = if i == j { h[(i, i)] } else { h[(i, j)] + h[(j, i)] };
                p += 1;
            }
        }
        w.rows_mut(p, n).copy_from(g);
        w[p + n] = c;
        Self { ns, na, w }
    }

    /// The exact action-value function of a discounted LQ problem.
    pub fn from_lqr(prob: &LqrProblem, sol: &LqrSolution) -> Self {
        let h = sol.action_value_matrix(prob);
        let n = prob.nx() + prob.nu();
        Self::from_quadratic(prob.nx(), prob.nu(), &h, &DVector::zeros(n), sol.v0)
    }

    fn stack(&self, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.ns + self.na);
        z.rows_mut(0, self.ns).copy_from(s);
        z.rows_mut(self.ns, self.na).copy_from(a);
        z
    }

    /// `φ(s, a) = ∇_w Q_w(s, a)`.
    pub fn features(&self, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let z = self.stack(s, a);
        let n = z.len();
        let mut f = DVector::zeros(self.w.len());
        let mut p = 0;
        for i in 0..n {
            for j in i..n {
                f[p] = z[i] * z[j];
                p += 1;
            }
        }
        f.rows_mut(p, n).copy_from(&z);
        f[p + n] = 1.0;
        f
    }

    pub fn value(&self, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        self.w.dot(&self.features(s, a))
    }

    /// `∇_a Q_w(s, a)`.
    pub fn grad_a(&self, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let z = self.stack(s, a);
        let n = z.len();
        let mut g = DVector::zeros(n);
        let mut p = 0;
        for i in 0..n {
            for j in i..n {
                if i == j {
                    g[i] += 2.0 * self.w[p] * z[i];
                } else {
                    g[i] += self.w[p] * z[j];
                    g[j] += self.w[p] * z[i];
                }
                p += 1;
            }
        }
        g += self.w.rows(p, n);
        g.rows(self.ns, self.na).into_owned()
    }
}

#[derive(Debug, Clone)]
pub struct DpgUpdate {
    pub theta: ThetaVector,
    pub critic: QuadraticCritic,
    pub tau: f64,
    /// `‖∇_θπ_θ(s) ∇_aQ_w(s, π_θ(s))‖` before scaling by `α_θ`.
    pub direction_norm: f64,
    pub clipped: bool,
    pub projected: bool,
}

/// One actor-critic step: critic TD update on the true cost, actor step
/// `θ ← θ − α_θ ∇_θπ_θ(s) ∇_aQ_w(s, π_θ(s))`. Both use the critic from before
/// the step.
pub fn dpg_actor_critic_step(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    critic: &QuadraticCritic,
    tr: &Transition,
    alpha_w: f64,
    alpha_theta: f64,
    clip_norm: f64,
    solver: &mut Solver,
) -> Result<DpgUpdate> {
    tr.validate()?;
    let inst = ocp.instantiate(theta)?;
    let a_next = solver.solve_v(&inst, &tr.s_next)?.u0().clone();
    let tau = tr.cost + inst.gamma * critic.value(&tr.s_next, &a_next) - critic.value(&tr.s, &tr.a);

    let sol = solver.solve_v(&inst, &tr.s)?;
    let jac = LagrangianEvaluator::new(ocp, theta, &inst, &sol, solver)?.policy_jacobian()?;
    let direction = jac.transpose() * critic.grad_a(&tr.s, sol.u0());

    let mut next_critic = critic.clone();
    next_critic.w += critic.features(&tr.s, &tr.a) * (alpha_w * tau);
    let (theta, _, clipped, projected) = apply_step(theta, &direction, -alpha_theta, clip_norm)?;
    Ok(DpgUpdate { theta, critic: next_critic, tau, direction_norm: direction.norm(), clipped, projected })
}

/// `θ` with every PD-constrained slice clamped to eigenvalues `>= EPS_PD`.
pub fn project_parameters(theta: &ThetaVector) -> ThetaVector {
    let mut t = theta.clone();
    t.project_pd();
    t
}

#[derive(Debug, Clone, PartialEq)]
pub enum Algorithm {
    /// Closed loop without learning.
    Evaluate,
    /// Per-step updates applied immediately.
    OnPolicy,
    /// Learning parameters swapped into the controller every `period` steps.
    Batch { period: usize },
    /// Policy-gradient actor with a quadratic critic.
    ActorCritic { critic: QuadraticCritic },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub alpha_w: f64,
    pub alpha_theta: f64,
    pub epsilon: f64,
    pub noise_scale: f64,
    pub update: UpdateOptions,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::OnPolicy,
            alpha: 1e-6,
            alpha_w: 0.0,
            alpha_theta: 0.0,
            epsilon: 0.0,
            noise_scale: 1.0,
            update: UpdateOptions::default(),
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64, name: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Contract(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg(self.alpha, "alpha")?;
        nonneg(self.alpha_w, "alpha_w")?;
        nonneg(self.alpha_theta, "alpha_theta")?;
        nonneg(self.noise_scale, "noise_scale")?;
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Contract(format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        if !(self.update.clip_norm > 0.0) {
            return Err(Error::Contract("clip_norm must be positive".to_string()));
        }
        if let Algorithm::Batch { period: 0 } = self.algorithm {
            return Err(Error::Contract("batch period must be positive".to_string()));
        }
        Ok(())
    }
}

/// Per-step log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub s: DVector<f64>,
    pub a: DVector<f64>,
    pub cost: f64,
    /// `None` when the step did no learning.
    pub tau: Option<f64>,
    pub grad_norm: f64,
    pub explored: bool,
    pub projected: bool,
    pub clipped: bool,
    /// Learning parameters were swapped into the controller after this step.
    pub swapped: bool,
    /// Plant disturbance draws of this step.
    pub disturbance: Vec<f64>,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub step: usize,
    pub s: DVector<f64>,
    pub theta: ThetaVector,
    pub theta_learn: ThetaVector,
    pub critic: Option<DVector<f64>>,
    /// Position of the exploration stream.
    pub rng_word_pos: u128,
}

/// Closed-loop learner: controller, plant and learning rule. Single-threaded;
/// all randomness comes from the config seed and the plant's own seed.
pub struct Learner<'p, P: Plant + ?Sized> {
    pub ocp: ParametricOcp,
    plant: &'p P,
    pub config: LearnerConfig,
    pub solver: Solver,
    rng: ChaCha8Rng,
    state: LearnerState,
}

impl<'p, P: Plant + ?Sized> Learner<'p, P> {
    pub fn new(
        ocp: ParametricOcp,
        plant: &'p P,
        theta: ThetaVector,
        s0: DVector<f64>,
        config: LearnerConfig,
        solver: SolverOptions,
    ) -> Result<Self> {
        let critic = match &config.algorithm {
            Algorithm::ActorCritic { critic } => Some(critic.w.clone()),
            _ => None,
        };
        let state = LearnerState { step: 0, s: s0, theta_learn: theta.clone(), theta, critic, rng_word_pos: 0 };
        Self::resume(ocp, plant, state, config, solver)
    }

    /// Continues from a checkpoint.
    pub fn resume(
        ocp: ParametricOcp,
        plant: &'p P,
        state: LearnerState,
        config: LearnerConfig,
        solver: SolverOptions,
    ) -> Result<Self> {
        config.validate()?;
        ocp.validate(&state.theta)?;
        ocp.validate(&state.theta_learn)?;
        if state.s.len() != plant.nx() || ocp.nx != plant.nx() || ocp.nu != plant.nu() {
            return Err(Error::Shape("plant, scheme and state dimensions disagree".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_word_pos(state.rng_word_pos);
        Ok(Self { ocp, plant, config, solver: Solver::new(solver), rng, state })
    }

    pub fn checkpoint(&self) -> LearnerState {
        let mut st = self.state.clone();
        st.rng_word_pos = self.rng.get_word_pos();
        st
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }

    /// Parameters currently deployed in the controller.
    pub fn theta(&self) -> &ThetaVector {
        &self.state.theta
    }

    pub fn theta_learn(&self) -> &ThetaVector {
        &self.state.theta_learn
    }

    pub fn critic(&self) -> Option<QuadraticCritic> {
        self.state.critic.as_ref().map(|w| QuadraticCritic { ns: self.ocp.nx, na: self.ocp.nu, w: w.clone() })
    }

    /// Observe, act, apply to the plant, learn. On error the learner is left
    /// at the last completed step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let k = self.state.step;
        let s = self.state.s.clone();
        let inst = self.ocp.instantiate(&self.state.theta)?;
        let a_star = self.solver.solve_v(&inst, &s)?.u0().clone();
        let mut rng = self.rng.clone();
        let (a, explored) =
            epsilon_greedy(&a_star, &inst.u_lb, &inst.u_ub, self.config.epsilon, self.config.noise_scale, &mut rng);
        let ps = self.plant.step(k, &s, &a)?;
        let tr = Transition { step: k, s: s.clone(), a: a.clone(), cost: ps.cost, s_next: ps.next.clone(), explored };

        let mut rec = StepRecord {
            step: k,
            s,
            a,
            cost: ps.cost,
            tau: None,
            grad_norm: 0.0,
            explored,
            projected: false,
            clipped: false,
            swapped: false,
            disturbance: ps.disturbance.clone(),
        };
        let (mut theta, mut theta_learn, mut critic) =
            (self.state.theta.clone(), self.state.theta_learn.clone(), self.state.critic.clone());
        let opts = self.config.update;
        match &self.config.algorithm {
            Algorithm::Evaluate => {}
            Algorithm::OnPolicy => {
                let u = q_step_on_policy(&self.ocp, &theta, &tr, self.config.alpha, &opts, &mut self.solver)?;
                (rec.tau, rec.grad_norm, rec.clipped, rec.projected) =
                    (Some(u.tau), u.grad_norm, u.clipped, u.projected);
                theta = u.theta;
                theta_learn = theta.clone();
            }
            Algorithm::Batch { period } => {
                let u = q_step_off_policy(
                    &self.ocp,
                    &theta,
                    &theta_learn,
                    &tr,
                    self.config.alpha,
                    &opts,
                    &mut self.solver,
                )?;
                (rec.tau, rec.grad_norm, rec.clipped, rec.projected) =
                    (Some(u.tau), u.grad_norm, u.clipped, u.projected);
                theta_learn = u.theta;
                if (k + 1) % period == 0 {
                    theta = theta_learn.clone();
                    rec.swapped = true;
                }
            }
            Algorithm::ActorCritic { .. } => {
                let c = QuadraticCritic { ns: self.ocp.nx, na: self.ocp.nu, w: critic.clone().unwrap_or_default() };
                let u = dpg_actor_critic_step(
                    &self.ocp,
                    &theta,
                    &c,
                    &tr,
                    self.config.alpha_w,
                    self.config.alpha_theta,
                    opts.clip_norm,
                    &mut self.solver,
                )?;
                (rec.tau, rec.grad_norm, rec.clipped, rec.projected) =
                    (Some(u.tau), u.direction_norm, u.clipped, u.projected);
                theta = u.theta;
                theta_learn = theta.clone();
                critic = Some(u.critic.w);
            }
        }
        self.rng = rng;
        self.state =
            LearnerState { step: k + 1, s: ps.next, theta, theta_learn, critic, rng_word_pos: self.rng.get_word_pos() };
        Ok(rec)
    }
}
