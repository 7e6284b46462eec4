//! Parameter sensitivities of `V_θ`, `Q_θ` and `π_θ`.
//!
//! Everything is evaluated at the `τ_b`-smoothed KKT point returned by the
//! solver, where the primal-dual solution is a smooth function of `θ`. The
//! value gradients are partial derivatives of the Lagrangian
//!
//! ```text
//! ℒ = f(z) + χᵀE(z) + λᵀ(Gz − rhs)
//! ```
//!
//! and the policy Jacobian comes from the implicit-function theorem on the
//! smoothed KKT conditions, with `dλ = D(G dz − ∂rhs)` eliminated so the
//! banded system of the solver is reused:
//!
//! ```text
//! [ W + GᵀDG   J_Eᵀ ] [dz]   [ −∂_θ∇_zℒ + GᵀD ∂_θrhs ]
//! [ J_E         0   ] [dχ] = [ −∂_θE                  ]
//! ```
//!
//! The Jacobian is returned as `d u₀★ / dθ`, shape `nu × nθ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::BandLu;
use crate::ocp::{OcpDelta, OcpInstance, ParametricOcp};
use crate::prelude::*;
use crate::solver::{IneqKind, PrimalDualSolution, Solver, SolverOptions, Structure};
use crate::theta::ThetaVector;

/// The Lagrangian bound to a solved horizon problem.
pub struct LagrangianEvaluator<'a> {
    pub ocp: &'a ParametricOcp,
    pub theta: &'a ThetaVector,
    pub inst: &'a OcpInstance,
    pub sol: &'a PrimalDualSolution,
    st: Structure,
    z: DVector<f64>,
    /// Equality multipliers including `ζ`.
    chi: DVector<f64>,
    deltas: Vec<OcpDelta>,
}

impl<'a> LagrangianEvaluator<'a> {
    /// Refuses solutions whose KKT residual for `inst` exceeds the solver
    /// tolerance (stale `θ`, other state, or an unconverged point).
    pub fn new(
        ocp: &'a ParametricOcp,
        theta: &'a ThetaVector,
        inst: &'a OcpInstance,
        sol: &'a PrimalDualSolution,
        solver: &Solver,
    ) -> Result<Self> {
        let res = solver.solution_residual(inst, sol)?;
        if !(res <= solver.options.tol) {
            return Err(Error::Contract(format!(
                "primal-dual point has KKT residual {res:e} above tolerance {:e}; re-solve before differentiating",
                solver.options.tol
            )));
        }
        let st = Structure::new(inst, sol.fixed_input.is_some(), sol.hard_constraints)?;
        let z = st.from_trajectory(&sol.traj);
        let mut chi = DVector::zeros(st.ne);
        chi.rows_mut(0, st.eq_zeta).copy_from(&sol.chi);
        if sol.fixed_input.is_some() {
            chi.rows_mut(st.eq_zeta, inst.nu).copy_from(&sol.zeta);
        }
        let deltas = (0..theta.len()).map(|j| ocp.derivative(inst, theta, j)).collect::<Result<Vec<_>>>()?;
        Ok(Self { ocp, theta, inst, sol, st, z, chi, deltas })
    }

    pub fn structure(&self) -> &Structure {
        &self.st
    }

    /// `ℒ_θ(s, y★)`; equals the optimal cost up to `m·τ_b`.
    pub fn value(&self) -> f64 {
        let (e, _) = self.st.equalities(self.inst, &self.z, &self.sol.s, self.sol.fixed_input.as_ref());
        let r = self.st.margins(&self.z);
        self.inst.total_cost(&self.sol.traj) + self.chi.dot(&e) - self.sol.lambda.dot(&r)
    }

    /// Smallest `max(r_i, λ_i)` over the inequalities: small values flag a
    /// weakly active constraint.
    pub fn activity_margin(&self) -> f64 {
        let r = self.st.margins(&self.z);
        r.iter().zip(self.sol.lambda.iter()).map(|(r, l)| r.max(*l)).fold(f64::INFINITY, f64::min)
    }

    /// `∇_θ ℒ_θ(s, y★)`: `∇_θQ_θ(s, a)` for a `Q` solution, `∇_θV_θ(s)` for a
    /// `V` solution.
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.theta.len());
        for (j, d) in self.deltas.iter().enumerate() {
            if d.is_zero() {
                continue;
            }
            let mut v = self.cost_delta(d);
            for k in 0..self.inst.horizon {
                if let Some(de) = self.dynamics_delta(d, k) {
                    v += self.chi.rows((k + 1) * self.st.nx, self.st.nx).dot(&de);
                }
            }
            v -= self.sol.lambda.dot(&self.rhs_delta(d));
            g[j] = v;
        }
        g
    }

    /// `d u₀★ / dθ` (`nu × nθ`). Needs a `V` solution.
    pub fn policy_jacobian(&self) -> Result<DMatrix<f64>> {
        if self.sol.fixed_input.is_some() {
            return Err(Error::Contract("the policy Jacobian needs a solution with a free first input".to_string()));
        }
        let (st, inst) = (&self.st, self.inst);
        let nu = inst.nu;
        let mut jac = DMatrix::zeros(nu, self.theta.len());
        if self.deltas.iter().all(OcpDelta::is_zero) {
            return Ok(jac);
        }
        let r = st.margins(&self.z);
        let d = self.sol.lambda.component_div(&r);
        let mut h = st.hessian(inst, &self.z, Some(&self.chi));
        st.add_gtdg(&d, &mut h);
        let (_, je) = st.equalities(inst, &self.z, &self.sol.s, None);

        let mut lu = None;
        for reg in [0.0, 1e-10, 1e-8] {
            let mut hr = h.clone();
            for i in 0..st.np {
                hr[(i, i)] += reg;
            }
            if let Ok(f) = BandLu::factor(&st.kkt_matrix(&hr, &je)) {
                lu = Some(f);
                break;
            }
        }
        let Some(lu) = lu else {
            let smallest = st.kkt_matrix(&h, &je).singular_values().min();
            return Err(Error::Singular(format!("KKT matrix at the solution, smallest singular value {smallest:e}")));
        };

        for (j, delta) in self.deltas.iter().enumerate() {
            if delta.is_zero() {
                continue;
            }
            let drhs = self.rhs_delta(delta);
            let mut rp = -self.stationarity_delta(delta);
            st.add_gt(&d.component_mul(&drhs), &mut rp);
            let mut re = DVector::zeros(st.ne);
            for k in 0..inst.horizon {
                if let Some(de) = self.dynamics_delta(delta, k) {
                    re.rows_mut((k + 1) * st.nx, st.nx).copy_from(&-de);
                }
            }
            let mut v = st.to_kkt(&rp, &re);
            lu.solve_in_place(&mut v);
            let (dz, _) = st.from_kkt(&v);
            if dz.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular("non-finite policy sensitivity".to_string()));
            }
            jac.set_column(j, &dz.rows(st.off_u[0], nu));
        }
        Ok(jac)
    }

    /// `∂_θ f(z)` at fixed `z`.
    fn cost_delta(&self, d: &OcpDelta) -> f64 {
        let (inst, st, n) = (self.inst, &self.st, self.inst.horizon);
        let mut v = 0.0;
        if !d.initial.is_zero() {
            let (q, l) = d.initial.parts(&inst.initial, &st.x(&self.z, 0));
            v += q + l;
        }
        if !d.stage.is_zero() {
            for k in 0..n {
                let (wq, wg) = inst.stage_weights(k);
                let (q, l) = d.stage.parts(&inst.stage, &self.xu(k));
                v += wq * q + wg * l;
            }
        }
        if !d.terminal.is_zero() {
            let (q, l) = d.terminal.parts(&inst.terminal, &st.x(&self.z, n));
            v += inst.gamma.powi(n as i32) * (q + l);
        }
        v
    }

    /// `∂_θ ∇_z ℒ` at fixed `(z, χ, λ)`.
    fn stationarity_delta(&self, d: &OcpDelta) -> DVector<f64> {
        let (inst, st, n) = (self.inst, &self.st, self.inst.horizon);
        let (nx, nu) = (st.nx, st.nu);
        let mut out = DVector::zeros(st.np);
        if !d.initial.is_zero() {
            let (hp, gp) = d.initial.gradient_parts(&inst.initial, &st.x(&self.z, 0));
            let mut v = out.rows_mut(st.off_x[0], nx);
            v += hp + gp;
        }
        for k in 0..n {
            let mut gk = DVector::zeros(nx + nu);
            if !d.stage.is_zero() {
                let (wq, wg) = inst.stage_weights(k);
                let (hp, gp) = d.stage.gradient_parts(&inst.stage, &self.xu(k));
                gk += hp * wq + gp * wg;
            }
            let c = self.chi.rows((k + 1) * nx, nx);
            if let Some(da) = &d.da {
                let mut v = gk.rows_mut(0, nx);
                v += da.transpose() * c;
            }
            if let Some(db) = &d.db {
                let mut v = gk.rows_mut(nx, nu);
                v += db.transpose() * c;
            }
            {
                let mut v = out.rows_mut(st.off_x[k], nx);
                v += gk.rows(0, nx);
            }
            let mut v = out.rows_mut(st.off_u[k], nu);
            v += gk.rows(nx, nu);
        }
        if !d.terminal.is_zero() {
            let (hp, gp) = d.terminal.gradient_parts(&inst.terminal, &st.x(&self.z, n));
            let mut v = out.rows_mut(st.off_x[n], nx);
            v += (hp + gp) * inst.gamma.powi(n as i32);
        }
        out
    }

    /// `∂_θ` of the dynamics residual `F(x_k, u_k) − x_{k+1}`.
    fn dynamics_delta(&self, d: &OcpDelta, k: usize) -> Option<DVector<f64>> {
        if d.da.is_none() && d.db.is_none() && d.doffset.is_none() {
            return None;
        }
        let mut v = d.doffset.clone().unwrap_or_else(|| DVector::zeros(self.st.nx));
        if let Some(da) = &d.da {
            v += da * self.st.x(&self.z, k);
        }
        if let Some(db) = &d.db {
            v += db * self.st.u(&self.z, k);
        }
        Some(v)
    }

    /// `∂_θ rhs` per inequality.
    fn rhs_delta(&self, d: &OcpDelta) -> DVector<f64> {
        let sign = |upper: bool| if upper { 1.0 } else { -1.0 };
        DVector::from_iterator(
            self.st.ineqs.len(),
            self.st.ineqs.iter().map(|q| match q.kind {
                IneqKind::Stage { row, .. } => sign(self.inst.stage_rows[row].upper) * d.stage_rows[row],
                IneqKind::Terminal { row } => sign(self.inst.terminal_rows[row].upper) * d.terminal_rows[row],
                IneqKind::Input { .. } | IneqKind::SlackSign { .. } => 0.0,
            }),
        )
    }

    fn xu(&self, k: usize) -> DVector<f64> {
        let (nx, nu) = (self.st.nx, self.st.nu);
        let mut v = DVector::zeros(nx + nu);
        v.rows_mut(0, nx).copy_from(&self.z.rows(self.st.off_x[k], nx));
        v.rows_mut(nx, nu).copy_from(&self.z.rows(self.st.off_u[k], nu));
        v
    }
}

/// A value together with its parameter gradient.
#[derive(Debug, Clone)]
pub struct ValueGradient {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub solution: PrimalDualSolution,
}

/// First input together with its parameter Jacobian.
#[derive(Debug, Clone)]
pub struct PolicySensitivity {
    pub input: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub solution: PrimalDualSolution,
}

/// `(Q_θ(s, a), ∇_θ Q_θ(s, a))`.
pub fn grad_q(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    s: &DVector<f64>,
    a: &DVector<f64>,
    solver: &mut Solver,
) -> Result<ValueGradient> {
    let inst = ocp.instantiate(theta)?;
    let sol = solver.solve_q(&inst, s, a)?;
    let gradient = LagrangianEvaluator::new(ocp, theta, &inst, &sol, solver)?.gradient();
    Ok(ValueGradient { value: sol.objective, gradient, solution: sol })
}

/// `(V_θ(s), ∇_θ V_θ(s))`.
pub fn grad_v(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    s: &DVector<f64>,
    solver: &mut Solver,
) -> Result<ValueGradient> {
    let inst = ocp.instantiate(theta)?;
    let sol = solver.solve_v(&inst, s)?;
    let gradient = LagrangianEvaluator::new(ocp, theta, &inst, &sol, solver)?.gradient();
    Ok(ValueGradient { value: sol.objective, gradient, solution: sol })
}

/// `(π_θ(s), ∇_θ π_θ(s))`.
pub fn policy_jacobian(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    s: &DVector<f64>,
    solver: &mut Solver,
) -> Result<PolicySensitivity> {
    let inst = ocp.instantiate(theta)?;
    let sol = solver.solve_v(&inst, s)?;
    let jacobian = LagrangianEvaluator::new(ocp, theta, &inst, &sol, solver)?.policy_jacobian()?;
    Ok(PolicySensitivity { input: sol.u0().clone(), jacobian, solution: sol })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckOptions {
    /// Relative central-difference step, `h_j = step·max(1, |θ_j|)`.
    pub step: f64,
    pub value_tol: f64,
    pub jacobian_tol: f64,
    /// Points whose activity margin falls below this are skipped.
    pub margin: f64,
    /// Solver tolerance of the perturbed re-solves.
    pub resolve_tol: f64,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, value_tol: 1e-4, jacobian_tol: 1e-3, margin: 1e-6, resolve_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedQuantity {
    GradQ,
    GradV,
    /// Row `input` of the policy Jacobian.
    PolicyJacobian {
        input: usize,
    },
}

impl core::fmt::Display for CheckedQuantity {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::GradQ => write!(f, "grad_q"),
            Self::GradV => write!(f, "grad_v"),
            Self::PolicyJacobian { input } => write!(f, "policy_jacobian[{input}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckRecord {
    pub point: usize,
    pub quantity: CheckedQuantity,
    pub index: usize,
    /// Entry label such as `A[0,1]`.
    pub slice: String,
    pub analytic: f64,
    pub finite_difference: f64,
    /// `|analytic − fd| / (1 + |fd|)`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientCheckReport {
    pub records: Vec<GradientCheckRecord>,
    pub checked_points: Vec<usize>,
    /// Points with a weakly active inequality, with their margin.
    pub skipped_points: Vec<(usize, f64)>,
}

impl GradientCheckReport {
    pub fn max_error(&self, pred: impl Fn(CheckedQuantity) -> bool) -> f64 {
        self.records.iter().filter(|r| pred(r.quantity)).map(|r| r.relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, opts: &GradientCheckOptions) -> bool {
        self.records.iter().all(|r| {
            let tol = match r.quantity {
                CheckedQuantity::PolicyJacobian { .. } => opts.jacobian_tol,
                _ => opts.value_tol,
            };
            r.relative_error <= tol
        })
    }
}

fn relative_error(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / (1.0 + fd.abs())
}

/// Compares the three sensitivities with central differences through
/// re-solves at each `(s, a)` point.
pub fn gradient_check(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    points: &[(DVector<f64>, DVector<f64>)],
    solver: &mut Solver,
    opts: &GradientCheckOptions,
) -> Result<GradientCheckReport> {
    let mut report = GradientCheckReport::default();
    let inst = ocp.instantiate(theta)?;
    // Re-solves must be far more accurate than the step.
    let mut fine =
        Solver::new(SolverOptions { tol: opts.resolve_tol.min(solver.options.tol), ..solver.options.clone() });
    let shifted = |j: usize, h: f64| -> Result<OcpInstance> {
        let mut t = theta.clone();
        t.values_mut()[j] += h;
        ocp.instantiate(&t)
    };
    for (p, (s, a)) in points.iter().enumerate() {
        let sv = solver.solve_v(&inst, s)?;
        let sq = solver.solve_q(&inst, s, a)?;
        let ev = LagrangianEvaluator::new(ocp, theta, &inst, &sv, solver)?;
        let eq = LagrangianEvaluator::new(ocp, theta, &inst, &sq, solver)?;
        let margin = ev.activity_margin().min(eq.activity_margin());
        if margin < opts.margin {
            report.skipped_points.push((p, margin));
            continue;
        }
        report.checked_points.push(p);
        let (gv, gq, jac) = (ev.gradient(), eq.gradient(), ev.policy_jacobian()?);
        for j in 0..theta.len() {
            let h = opts.step * theta.values()[j].abs().max(1.0);
            let (ip, im) = (shifted(j, h)?, shifted(j, -h)?);
            let (vp, vm) = (fine.solve(&ip, s, None, Some(&sv))?, fine.solve(&im, s, None, Some(&sv))?);
            let (qp, qm) = (fine.solve(&ip, s, Some(a), Some(&sq))?, fine.solve(&im, s, Some(a), Some(&sq))?);
            let label = theta.layout().label(j);
            let mut push = |quantity, analytic: f64, fd: f64| {
                report.records.push(GradientCheckRecord {
                    point: p,
                    quantity,
                    index: j,
                    slice: label.clone(),
                    analytic,
                    finite_difference: fd,
                    relative_error: relative_error(analytic, fd),
                });
            };
            push(CheckedQuantity::GradV, gv[j], (vp.objective - vm.objective) / (2.0 * h));
            push(CheckedQuantity::GradQ, gq[j], (qp.objective - qm.objective) / (2.0 * h));
            for i in 0..inst.nu {
                push(CheckedQuantity::PolicyJacobian { input: i }, jac[(i, j)], (vp.u0()[i] - vm.u0()[i]) / (2.0 * h));
            }
        }
    }
    Ok(report)
}
