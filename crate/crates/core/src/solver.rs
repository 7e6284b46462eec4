//! Dense primal-dual interior-point solver for the horizon problems.
//!
//! The primal vector is stage-interleaved, `z = (x₀, u₀, σ₀, x₁, …, x_N, σ_N)`.
//! Equalities are `x₀ − s = 0`, `F(x_k, u_k) − x_{k+1} = 0` and, when the
//! first input is fixed, `u₀ − a = 0`. Every inequality is affine with at most
//! two nonzeros, `coef·z[var] − z[slack] ≤ rhs`: mixed rows `h ≤ σ`, input
//! bounds, and `σ ≥ 0`. Primal iterates stay strictly inside the
//! inequalities; the equalities are driven to zero by Newton steps.
//!
//! Each Newton step eliminates the inequality multipliers and solves
//!
//! ```text
//! [ W + GᵀDG + εI   J_Eᵀ ] [dz]   [ −(∇f + J_Eᵀχ + Gᵀ(τ/r)) ]
//! [ J_E              0   ] [dχ] = [ −E                       ]
//! ```
//!
//! with `r = rhs − Gz`, `D = λ/r`, ordered stage by stage so the matrix is
//! banded. The barrier `τ` follows `0.1·λᵀr/m` down to the exit value `τ_b`,
//! and the solver stops on the `τ_b`-smoothed KKT conditions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::BandLu;
use crate::ocp::{OcpInstance, ParametricOcp, Trajectory};
use crate::prelude::*;
use crate::theta::ThetaVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HessianMode {
    /// Cost Hessian only; dynamics curvature ignored while iterating.
    GaussNewton,
    /// Cost Hessian plus `Σ χ ∇²F` from differenced Jacobians.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    /// Barrier value at exit; sensitivities are taken at this smoothing.
    pub tau_final: f64,
    pub max_iter: usize,
    pub centering: f64,
    pub fraction_to_boundary: f64,
    pub reg_init: f64,
    pub hessian: HessianMode,
    /// Drops the slacks and enforces the mixed rows as hard constraints.
    pub hard_constraints: bool,
    pub trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            tau_final: 1e-10,
            max_iter: 200,
            centering: 0.1,
            fraction_to_boundary: 0.995,
            reg_init: 1e-8,
            hessian: HessianMode::GaussNewton,
            hard_constraints: false,
            trace: false,
        }
    }
}

/// One row of the optional iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub residual: f64,
    pub barrier: f64,
    pub step: f64,
}

/// What an inequality constrains; indices are into the instance data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IneqKind {
    /// Stage mixed row `row` at stage `k`.
    Stage {
        k: usize,
        row: usize,
    },
    Terminal {
        row: usize,
    },
    Input {
        k: usize,
        i: usize,
        upper: bool,
    },
    SlackSign {
        k: usize,
        j: usize,
    },
}

/// `coef·z[var] − z[slack] ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ineq {
    pub var: usize,
    pub coef: f64,
    pub slack: Option<usize>,
    pub rhs: f64,
    pub kind: IneqKind,
}

impl Ineq {
    fn gz(&self, z: &DVector<f64>) -> f64 {
        self.coef * z[self.var] - self.slack.map_or(0.0, |s| z[s])
    }
}

/// Index bookkeeping of one problem shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub ns: usize,
    pub nsf: usize,
    pub fixed_input: bool,
    pub off_x: Vec<usize>,
    pub off_u: Vec<usize>,
    pub off_s: Vec<usize>,
    pub np: usize,
    pub ne: usize,
    /// Equality index of the `u₀ = a` block.
    pub eq_zeta: usize,
    pub ineqs: Vec<Ineq>,
    pub pos_prim: Vec<usize>,
    pub pos_eq: Vec<usize>,
}

impl Structure {
    pub fn new(inst: &OcpInstance, fixed_input: bool, hard: bool) -> Result<Self> {
        let (nx, nu, n) = (inst.nx, inst.nu, inst.horizon);
        let (ns, nsf) = if hard { (0, 0) } else { (inst.ns(), inst.nsf()) };
        let (mut off_x, mut off_u, mut off_s) = (Vec::new(), Vec::new(), Vec::new());
        let mut p = 0;
        for k in 0..=n {
            off_x.push(p);
            p += nx;
            if k < n {
                off_u.push(p);
                p += nu;
            }
            off_s.push(p);
            p += if k < n { ns } else { nsf };
        }
        let np = p;
        let eq_zeta = nx * (n + 1);
        let ne = eq_zeta + if fixed_input { nu } else { 0 };

        let mut ineqs = Vec::new();
        for k in 0..n {
            for (ri, r) in inst.stage_rows.iter().enumerate() {
                let var = if r.var < nx { off_x[k] + r.var } else { off_u[k] + r.var - nx };
                if fixed_input && k == 0 && r.var >= nx {
                    continue;
                }
                let (coef, rhs) = if r.upper { (1.0, r.bound) } else { (-1.0, -r.bound) };
                let slack = if hard { None } else { r.slack.map(|j| off_s[k] + j) };
                ineqs.push(Ineq { var, coef, slack, rhs, kind: IneqKind::Stage { k, row: ri } });
            }
            for i in 0..nu {
                if fixed_input && k == 0 {
                    continue;
                }
                if !(inst.u_lb[i] < inst.u_ub[i]) {
                    return Err(Error::Contract(format!("input bounds on u[{i}] leave no interior")));
                }
                let var = off_u[k] + i;
                ineqs.push(Ineq {
                    var,
                    coef: -1.0,
                    slack: None,
                    rhs: -inst.u_lb[i],
                    kind: IneqKind::Input { k, i, upper: false },
                });
                ineqs.push(Ineq {
                    var,
                    coef: 1.0,
                    slack: None,
                    rhs: inst.u_ub[i],
                    kind: IneqKind::Input { k, i, upper: true },
                });
            }
            for j in 0..ns {
                ineqs.push(Ineq {
                    var: off_s[k] + j,
                    coef: -1.0,
                    slack: None,
                    rhs: 0.0,
                    kind: IneqKind::SlackSign { k, j },
                });
            }
        }
        for (ri, r) in inst.terminal_rows.iter().enumerate() {
            let (coef, rhs) = if r.upper { (1.0, r.bound) } else { (-1.0, -r.bound) };
            let slack = if hard { None } else { r.slack.map(|j| off_s[n] + j) };
            ineqs.push(Ineq { var: off_x[n] + r.var, coef, slack, rhs, kind: IneqKind::Terminal { row: ri } });
        }
        for j in 0..nsf {
            ineqs.push(Ineq {
                var: off_s[n] + j,
                coef: -1.0,
                slack: None,
                rhs: 0.0,
                kind: IneqKind::SlackSign { k: n, j },
            });
        }

        // Interleaved KKT ordering: per stage [E_k, x_k, u_k, (ζ), σ_k].
        let mut pos_prim = vec![0; np];
        let mut pos_eq = vec![0; ne];
        let mut q = 0;
        for k in 0..=n {
            for i in 0..nx {
                pos_eq[k * nx + i] = q;
                q += 1;
            }
            for i in 0..nx {
                pos_prim[off_x[k] + i] = q;
                q += 1;
            }
            if k < n {
                for i in 0..nu {
                    pos_prim[off_u[k] + i] = q;
                    q += 1;
                }
                if k == 0 && fixed_input {
                    for i in 0..nu {
                        pos_eq[eq_zeta + i] = q;
                        q += 1;
                    }
                }
            }
            let nsk = if k < n { ns } else { nsf };
            for j in 0..nsk {
                pos_prim[off_s[k] + j] = q;
                q += 1;
            }
        }
        Ok(Self {
            nx,
            nu,
            horizon: n,
            ns,
            nsf,
            fixed_input,
            off_x,
            off_u,
            off_s,
            np,
            ne,
            eq_zeta,
            ineqs,
            pos_prim,
            pos_eq,
        })
    }

    pub fn x(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(self.off_x[k], self.nx).into_owned()
    }

    pub fn u(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(self.off_u[k], self.nu).into_owned()
    }

    fn xu(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.nx + self.nu);
        v.rows_mut(0, self.nx).copy_from(&z.rows(self.off_x[k], self.nx));
        v.rows_mut(self.nx, self.nu).copy_from(&z.rows(self.off_u[k], self.nu));
        v
    }

    /// Index of entry `i` of the stacked `(x_k, u_k)`.
    pub fn xu_index(&self, k: usize, i: usize) -> usize {
        if i < self.nx {
            self.off_x[k] + i
        } else {
            self.off_u[k] + i - self.nx
        }
    }

    pub fn to_trajectory(&self, z: &DVector<f64>, inst: &OcpInstance) -> Trajectory {
        let n = self.horizon;
        let mut t = Trajectory::zeros(self.nx, self.nu, inst.ns(), inst.nsf(), n);
        for k in 0..=n {
            t.x[k] = self.x(z, k);
            if k < n {
                t.u[k] = self.u(z, k);
            }
            let nsk = if k < n { self.ns } else { self.nsf };
            if nsk > 0 {
                t.sigma[k] = z.rows(self.off_s[k], nsk).into_owned();
            }
        }
        t
    }

    pub fn from_trajectory(&self, t: &Trajectory) -> DVector<f64> {
        let mut z = DVector::zeros(self.np);
        for k in 0..=self.horizon {
            z.rows_mut(self.off_x[k], self.nx).copy_from(&t.x[k]);
            if k < self.horizon {
                z.rows_mut(self.off_u[k], self.nu).copy_from(&t.u[k]);
            }
            let nsk = if k < self.horizon { self.ns } else { self.nsf };
            if nsk > 0 {
                z.rows_mut(self.off_s[k], nsk).copy_from(&t.sigma[k]);
            }
        }
        z
    }

    /// Largest magnitude over the state and input entries.
    pub fn state_input_amax(&self, g: &DVector<f64>) -> f64 {
        let mut m: f64 = 0.0;
        for k in 0..=self.horizon {
            m = m.max(g.rows(self.off_x[k], self.nx).amax());
            if k < self.horizon {
                m = m.max(g.rows(self.off_u[k], self.nu).amax());
            }
        }
        m
    }

    /// `r = rhs − Gz`.
    pub fn margins(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.ineqs.len(), self.ineqs.iter().map(|q| q.rhs - q.gz(z)))
    }

    /// Adds `Gᵀv` to `out`.
    pub fn add_gt(&self, v: &DVector<f64>, out: &mut DVector<f64>) {
        for (q, &vi) in self.ineqs.iter().zip(v.iter()) {
            out[q.var] += q.coef * vi;
            if let Some(s) = q.slack {
                out[s] -= vi;
            }
        }
    }

    /// `G dz`.
    pub fn apply_g(&self, dz: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.ineqs.len(), self.ineqs.iter().map(|q| q.gz(dz)))
    }

    /// Adds `GᵀDG` to a primal-indexed matrix.
    pub fn add_gtdg(&self, d: &DVector<f64>, h: &mut DMatrix<f64>) {
        for (q, &di) in self.ineqs.iter().zip(d.iter()) {
            h[(q.var, q.var)] += q.coef * q.coef * di;
            if let Some(s) = q.slack {
                h[(s, s)] += di;
                h[(q.var, s)] -= q.coef * di;
                h[(s, q.var)] -= q.coef * di;
            }
        }
    }

    /// Objective gradient.
    pub fn gradient(&self, inst: &OcpInstance, z: &DVector<f64>) -> DVector<f64> {
        let (nx, nu, n) = (self.nx, self.nu, self.horizon);
        let mut g = DVector::zeros(self.np);
        let gx0 = inst.initial.gradient(&self.x(z, 0));
        {
            let mut v = g.rows_mut(self.off_x[0], nx);
            v += &gx0;
        }
        for k in 0..n {
            let (wq, wg) = inst.stage_weights(k);
            let d = self.xu(z, k) - &inst.stage.center;
            let gk = &inst.stage.h * d * wq + &inst.stage.g * wg;
            {
                let mut v = g.rows_mut(self.off_x[k], nx);
                v += &gk.rows(0, nx);
            }
            {
                let mut v = g.rows_mut(self.off_u[k], nu);
                v += &gk.rows(nx, nu);
            }
            let gk = inst.gamma.powi(k as i32);
            for j in 0..self.ns {
                g[self.off_s[k] + j] += gk * inst.w[j];
            }
        }
        let gn = inst.gamma.powi(n as i32);
        let gt = inst.terminal.gradient(&self.x(z, n)) * gn;
        {
            let mut v = g.rows_mut(self.off_x[n], nx);
            v += &gt;
        }
        for j in 0..self.nsf {
            g[self.off_s[n] + j] += gn * inst.wf[j];
        }
        g
    }

    /// Objective Hessian, plus the dynamics curvature `Σ χ_{k+1}∇²F` when
    /// multipliers are given.
    pub fn hessian(&self, inst: &OcpInstance, z: &DVector<f64>, chi: Option<&DVector<f64>>) -> DMatrix<f64> {
        let (nx, n) = (self.nx, self.horizon);
        let mut h = DMatrix::zeros(self.np, self.np);
        add_block(&mut h, &[self.off_x[0]], nx, &inst.initial.h, 1.0);
        let nxu = nx + self.nu;
        for k in 0..n {
            let (wq, _) = inst.stage_weights(k);
            let idx: Vec<usize> = (0..nxu).map(|i| self.xu_index(k, i)).collect();
            for a in 0..nxu {
                for b in 0..nxu {
                    h[(idx[a], idx[b])] += wq * inst.stage.h[(a, b)];
                }
            }
            if let Some(chi) = chi {
                if !inst.dynamics.is_affine() {
                    let c = chi.rows((k + 1) * nx, nx).into_owned();
                    let cur = inst.dynamics.curvature(&self.x(z, k), &self.u(z, k), &c);
                    for a in 0..nxu {
                        for b in 0..nxu {
                            h[(idx[a], idx[b])] += cur[(a, b)];
                        }
                    }
                }
            }
        }
        add_block(&mut h, &[self.off_x[n]], nx, &inst.terminal.h, inst.gamma.powi(n as i32));
        h
    }

    /// Equality residual and Jacobian.
    pub fn equalities(
        &self,
        inst: &OcpInstance,
        z: &DVector<f64>,
        s: &DVector<f64>,
        a: Option<&DVector<f64>>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let (nx, nu, n) = (self.nx, self.nu, self.horizon);
        let mut e = DVector::zeros(self.ne);
        let mut j = DMatrix::zeros(self.ne, self.np);
        e.rows_mut(0, nx).copy_from(&(self.x(z, 0) - s));
        for i in 0..nx {
            j[(i, self.off_x[0] + i)] = 1.0;
        }
        for k in 0..n {
            let (f, fa, fb) = inst.dynamics.linearize(&self.x(z, k), &self.u(z, k));
            let row = (k + 1) * nx;
            e.rows_mut(row, nx).copy_from(&(f - self.x(z, k + 1)));
            j.view_mut((row, self.off_x[k]), (nx, nx)).copy_from(&fa);
            j.view_mut((row, self.off_u[k]), (nx, nu)).copy_from(&fb);
            for i in 0..nx {
                j[(row + i, self.off_x[k + 1] + i)] = -1.0;
            }
        }
        if let (true, Some(a)) = (self.fixed_input, a) {
            e.rows_mut(self.eq_zeta, nu).copy_from(&(self.u(z, 0) - a));
            for i in 0..nu {
                j[(self.eq_zeta + i, self.off_u[0] + i)] = 1.0;
            }
        }
        (e, j)
    }

    /// Assembles the interleaved KKT matrix `[[H, Jᵀ], [J, 0]]`.
    pub fn kkt_matrix(&self, h: &DMatrix<f64>, j: &DMatrix<f64>) -> DMatrix<f64> {
        let dim = self.np + self.ne;
        let mut k = DMatrix::zeros(dim, dim);
        for a in 0..self.np {
            for b in 0..self.np {
                let v = h[(a, b)];
                if v != 0.0 {
                    k[(self.pos_prim[a], self.pos_prim[b])] = v;
                }
            }
        }
        for e in 0..self.ne {
            for p in 0..self.np {
                let v = j[(e, p)];
                if v != 0.0 {
                    k[(self.pos_eq[e], self.pos_prim[p])] = v;
                    k[(self.pos_prim[p], self.pos_eq[e])] = v;
                }
            }
        }
        k
    }

    /// Scatters `(primal, equality)` blocks into KKT order.
    pub fn to_kkt(&self, p: &DVector<f64>, e: &DVector<f64>) -> Vec<f64> {
        let mut v = vec![0.0; self.np + self.ne];
        for i in 0..self.np {
            v[self.pos_prim[i]] = p[i];
        }
        for i in 0..self.ne {
            v[self.pos_eq[i]] = e[i];
        }
        v
    }

    pub fn from_kkt(&self, v: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let p = DVector::from_iterator(self.np, (0..self.np).map(|i| v[self.pos_prim[i]]));
        let e = DVector::from_iterator(self.ne, (0..self.ne).map(|i| v[self.pos_eq[i]]));
        (p, e)
    }
}

fn add_block(h: &mut DMatrix<f64>, off: &[usize], n: usize, m: &DMatrix<f64>, scale: f64) {
    for a in 0..n {
        for b in 0..n {
            h[(off[0] + a, off[0] + b)] += scale * m[(a, b)];
        }
    }
}

/// Primal-dual point of a horizon problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualSolution {
    pub traj: Trajectory,
    /// `χ₀` (initial embedding) then `χ_{k+1}` (dynamics), stacked.
    pub chi: DVector<f64>,
    /// Multipliers of all inequalities, in [`Structure::ineqs`] order.
    pub lambda: DVector<f64>,
    /// Multiplier of `u₀ = a`; zero when the first input is free.
    pub zeta: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub barrier: f64,
    pub iterations: usize,
    pub s: DVector<f64>,
    pub fixed_input: Option<DVector<f64>>,
    pub hard_constraints: bool,
    pub trace: Vec<TraceRow>,
}

impl PrimalDualSolution {
    /// First input of the optimal sequence.
    pub fn u0(&self) -> &DVector<f64> {
        &self.traj.u[0]
    }

    /// Multipliers of the mixed and terminal rows (`μ`).
    pub fn mu(&self, st: &Structure) -> Vec<(IneqKind, f64)> {
        st.ineqs
            .iter()
            .zip(self.lambda.iter())
            .filter(|(q, _)| matches!(q.kind, IneqKind::Stage { .. } | IneqKind::Terminal { .. }))
            .map(|(q, &l)| (q.kind, l))
            .collect()
    }

    /// Multipliers of the input bounds (`ν`).
    pub fn nu(&self, st: &Structure) -> Vec<(IneqKind, f64)> {
        st.ineqs
            .iter()
            .zip(self.lambda.iter())
            .filter(|(q, _)| matches!(q.kind, IneqKind::Input { .. }))
            .map(|(q, &l)| (q.kind, l))
            .collect()
    }
}

/// `τ`-smoothed KKT residual, stacked as
/// `[stationarity (primal order); equalities (E₀, E₁..E_N, u₀ − a); λ∘r − τ]`.
pub fn kkt_residual_vector(
    inst: &OcpInstance,
    st: &Structure,
    z: &DVector<f64>,
    chi: &DVector<f64>,
    lambda: &DVector<f64>,
    s: &DVector<f64>,
    a: Option<&DVector<f64>>,
    tau: f64,
) -> DVector<f64> {
    let (e, j) = st.equalities(inst, z, s, a);
    let mut stat = st.gradient(inst, z) + j.transpose() * chi;
    st.add_gt(lambda, &mut stat);
    let r = st.margins(z);
    let comp = lambda.component_mul(&r).add_scalar(-tau);
    let mut out = DVector::zeros(st.np + st.ne + st.ineqs.len());
    out.rows_mut(0, st.np).copy_from(&stat);
    out.rows_mut(st.np, st.ne).copy_from(&e);
    out.rows_mut(st.np + st.ne, st.ineqs.len()).copy_from(&comp);
    out
}

/// Single-threaded solver owning its options and last trace.
#[derive(Debug, Clone, Default)]
pub struct Solver {
    pub options: SolverOptions,
}

struct Scales {
    stat: f64,
}

impl Solver {
    pub fn new(options: SolverOptions) -> Self {
        Self { options }
    }

    /// `V_θ(s)`.
    pub fn solve_v(&mut self, inst: &OcpInstance, s: &DVector<f64>) -> Result<PrimalDualSolution> {
        self.solve(inst, s, None, None)
    }

    /// `Q_θ(s, a)`.
    pub fn solve_q(&mut self, inst: &OcpInstance, s: &DVector<f64>, a: &DVector<f64>) -> Result<PrimalDualSolution> {
        self.solve(inst, s, Some(a), None)
    }

    pub fn policy(&mut self, inst: &OcpInstance, s: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.solve_v(inst, s)?.traj.u[0].clone())
    }

    pub fn structure(&self, inst: &OcpInstance, fixed_input: bool) -> Result<Structure> {
        Structure::new(inst, fixed_input, self.options.hard_constraints)
    }

    fn initial_point(
        &self,
        inst: &OcpInstance,
        st: &Structure,
        s: &DVector<f64>,
        a: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        let n = inst.horizon;
        let mut inputs: Vec<DVector<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut u = inst.u_guess.clone();
            for i in 0..inst.nu {
                let (lo, hi) = (inst.u_lb[i], inst.u_ub[i]);
                let m = 0.01 * (hi - lo).min(2.0);
                u[i] = u[i].clamp(lo + m, hi - m);
            }
            if k == 0 {
                if let Some(a) = a {
                    u = a.clone();
                }
            }
            inputs.push(u);
        }
        let mut traj = inst.rollout(s, &inputs);
        if traj.x.iter().any(|x| x.iter().any(|v| !v.is_finite() || v.abs() > 1e12)) {
            for x in traj.x.iter_mut() {
                x.copy_from(s);
            }
        }
        if self.options.hard_constraints {
            // Pull states strictly inside the rows; the equalities absorb the gap.
            for k in 0..=n {
                let rows = if k < n { &inst.stage_rows } else { &inst.terminal_rows };
                let (mut lo, mut hi) = (vec![f64::NEG_INFINITY; inst.nx], vec![f64::INFINITY; inst.nx]);
                for r in rows.iter().filter(|r| r.var < inst.nx) {
                    if r.upper {
                        hi[r.var] = hi[r.var].min(r.bound);
                    } else {
                        lo[r.var] = lo[r.var].max(r.bound);
                    }
                }
                for i in 0..inst.nx {
                    let width = hi[i] - lo[i];
                    let m = if width.is_finite() { 0.05 * width } else { 1e-2 };
                    let x = &mut traj.x[k][i];
                    if lo[i].is_finite() && *x < lo[i] + m {
                        *x = if width.is_finite() { lo[i] + m.min(0.5 * width) } else { lo[i] + m };
                    }
                    if hi[i].is_finite() && *x > hi[i] - m {
                        *x = if width.is_finite() { hi[i] - m.min(0.5 * width) } else { hi[i] - m };
                    }
                }
            }
        } else {
            for sig in traj.sigma.iter_mut() {
                sig.add_scalar_mut(1.0);
            }
        }
        let mut z = st.from_trajectory(&traj);
        // Raise slacks until every softened row has a margin that survives
        // rounding at the scale of the row.
        for q in st.ineqs.iter() {
            if let Some(j) = q.slack {
                let base = q.rhs - q.coef * z[q.var];
                let need = (1.0 - base).max(0.0) + 1e-6 * base.abs();
                if z[j] < need {
                    z[j] = need;
                }
            }
        }
        z
    }

    /// Solves `V_θ(s)` (`a = None`) or `Q_θ(s, a)`, optionally from a warm
    /// start.
    pub fn solve(
        &mut self,
        inst: &OcpInstance,
        s: &DVector<f64>,
        a: Option<&DVector<f64>>,
        warm: Option<&PrimalDualSolution>,
    ) -> Result<PrimalDualSolution> {
        if s.len() != inst.nx || a.is_some_and(|a| a.len() != inst.nu) {
            return Err(Error::Shape("state or input dimension does not match the problem".to_string()));
        }
        let opts = self.options.clone();
        let st = self.structure(inst, a.is_some())?;
        let m = st.ineqs.len();

        let mut z = self.initial_point(inst, &st, s, a);
        let mut chi = DVector::zeros(st.ne);
        let mut r = st.margins(&z);
        let mut lambda = r.map(|ri| 1.0 / ri);
        if let Some(w) = warm {
            let zw = st.from_trajectory(&w.traj);
            let rw = st.margins(&zw);
            if w.lambda.len() == m && w.chi.len() == st.ne && rw.iter().all(|&v| v > 0.0) {
                z = zw;
                r = rw;
                chi = w.chi.clone();
                lambda = w.lambda.map(|l| l.max(1e-14));
            }
        }
        if r.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Contract("no strictly feasible starting point for the inequalities".to_string()));
        }

        let mut tau = opts.tau_final.max(opts.centering * lambda.dot(&r) / m.max(1) as f64);
        let mut trace = Vec::new();
        let mut reg = 0.0;
        for it in 0..=opts.max_iter {
            let g0 = st.gradient(inst, &z);
            let scales = Scales { stat: 1.0 + st.state_input_amax(&g0) };
            let res_final = self.residual_norm(inst, &st, &z, &chi, &lambda, s, a, opts.tau_final, &scales);
            if opts.trace {
                trace.push(TraceRow { iteration: it, residual: res_final, barrier: tau, step: 0.0 });
            }
            if res_final <= opts.tol {
                let traj = st.to_trajectory(&z, inst);
                let objective = inst.total_cost(&traj);
                let zeta =
                    if a.is_some() { chi.rows(st.eq_zeta, inst.nu).into_owned() } else { DVector::zeros(inst.nu) };
                return Ok(PrimalDualSolution {
                    traj,
                    chi: chi.rows(0, st.eq_zeta).into_owned(),
                    lambda,
                    zeta,
                    objective,
                    kkt_residual: res_final,
                    barrier: opts.tau_final,
                    iterations: it,
                    s: s.clone(),
                    fixed_input: a.cloned(),
                    hard_constraints: opts.hard_constraints,
                    trace,
                });
            }
            if it == opts.max_iter {
                return Err(Error::NonConvergence { what: "interior point", iterations: it, residual: res_final });
            }

            // Barrier update.
            let avg = lambda.dot(&r) / m.max(1) as f64;
            tau = opts.tau_final.max((opts.centering * avg).min(tau));

            let chi_h = match opts.hessian {
                HessianMode::Exact => Some(&chi),
                HessianMode::GaussNewton => None,
            };
            let hq = st.hessian(inst, &z, chi_h);
            let d = lambda.component_div(&r);
            let mut h = hq.clone();
            st.add_gtdg(&d, &mut h);
            let (e, jac) = st.equalities(inst, &z, s, a);
            let mut rhs_p = -(&g0 + jac.transpose() * &chi);
            let tr = r.map(|ri| -tau / ri);
            st.add_gt(&tr, &mut rhs_p);
            let rhs_e = -&e;

            let (dz, dchi) = loop {
                let mut hr = h.clone();
                for i in 0..st.np {
                    hr[(i, i)] += reg;
                }
                let kkt = st.kkt_matrix(&hr, &jac);
                let sol = BandLu::factor(&kkt).map(|lu| {
                    let mut v = st.to_kkt(&rhs_p, &rhs_e);
                    lu.solve_in_place(&mut v);
                    st.from_kkt(&v)
                });
                let ok = match &sol {
                    Ok((dz, _)) => {
                        let finite = dz.iter().all(|v| v.is_finite());
                        // Negative curvature away from the pinned x₀ means an
                        // indefinite reduced Hessian.
                        let mut dzm = dz.clone();
                        dzm.rows_mut(st.off_x[0], st.nx).fill(0.0);
                        let quad = dzm.dot(&(&hq * &dzm)) + reg * dzm.norm_squared();
                        let gd = st.apply_g(&dzm);
                        let barrier: f64 = (0..m).map(|i| d[i] * gd[i] * gd[i]).sum();
                        finite && quad + barrier >= -1e-9 * (quad.abs() + barrier) - 1e-12 * dzm.norm_squared()
                    }
                    Err(_) => false,
                };
                if ok {
                    break sol.unwrap();
                }
                reg = if reg == 0.0 { opts.reg_init } else { reg * 10.0 };
                if reg > 1e6 {
                    let pivot = BandLu::factor(&st.kkt_matrix(&h, &jac)).map(|lu| lu.min_pivot()).unwrap_or(0.0);
                    return Err(Error::Singular(format!(
                        "KKT matrix stays singular or indefinite after regularization (smallest pivot {pivot:.3e})"
                    )));
                }
            };
            reg /= 100.0;
            if reg < opts.reg_init {
                reg = 0.0;
            }

            let gdz = st.apply_g(&dz);
            let dlambda = DVector::from_iterator(m, (0..m).map(|i| tau / r[i] - lambda[i] + d[i] * gdz[i]));
            let ftb = opts.fraction_to_boundary;
            let mut ap: f64 = 1.0;
            for i in 0..m {
                if gdz[i] > 0.0 {
                    ap = ap.min(ftb * r[i] / gdz[i]);
                }
            }
            let mut ad: f64 = 1.0;
            for i in 0..m {
                if dlambda[i] < 0.0 {
                    ad = ad.min(-ftb * lambda[i] / dlambda[i]);
                }
            }

            // Backtracking on the τ-residual for nonlinear dynamics.
            let cur = self.residual_norm(inst, &st, &z, &chi, &lambda, s, a, tau, &scales);
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..12 {
                let zn = &z + &dz * (ap * scale);
                let chin = &chi + &dchi * (ad * scale);
                let ln = &lambda + &dlambda * (ad * scale);
                let rn = st.margins(&zn);
                if rn.iter().all(|&v| v > 0.0) && ln.iter().all(|&v| v > 0.0) {
                    let new = self.residual_norm(inst, &st, &zn, &chin, &ln, s, a, tau, &scales);
                    if inst.dynamics.is_affine() || new <= (1.0 - 1e-4 * scale * ap) * cur {
                        accepted = Some((zn, chin, ln, rn));
                        break;
                    }
                    accepted.get_or_insert((zn, chin, ln, rn));
                }
                scale *= 0.5;
            }
            let Some((zn, chin, ln, rn)) = accepted else {
                return Err(Error::NonConvergence {
                    what: "interior point line search",
                    iterations: it,
                    residual: cur,
                });
            };
            if let Some(last) = trace.last_mut() {
                last.step = ap * scale;
            }
            z = zn;
            chi = chin;
            lambda = ln;
            r = rn;
        }
        unreachable!()
    }

    /// Scaled KKT residual of `sol` for `inst` at its exit barrier, as used
    /// for termination. Large for a solution of a different θ or state.
    pub fn solution_residual(&self, inst: &OcpInstance, sol: &PrimalDualSolution) -> Result<f64> {
        let st = Structure::new(inst, sol.fixed_input.is_some(), sol.hard_constraints)?;
        let z = st.from_trajectory(&sol.traj);
        if sol.lambda.len() != st.ineqs.len() || sol.chi.len() != st.eq_zeta {
            return Err(Error::Shape("solution does not match the problem structure".to_string()));
        }
        let mut chi = DVector::zeros(st.ne);
        chi.rows_mut(0, st.eq_zeta).copy_from(&sol.chi);
        if sol.fixed_input.is_some() {
            chi.rows_mut(st.eq_zeta, inst.nu).copy_from(&sol.zeta);
        }
        let scales = Scales { stat: 1.0 + st.state_input_amax(&st.gradient(inst, &z)) };
        Ok(self.residual_norm(inst, &st, &z, &chi, &sol.lambda, &sol.s, sol.fixed_input.as_ref(), sol.barrier, &scales))
    }

    fn residual_norm(
        &self,
        inst: &OcpInstance,
        st: &Structure,
        z: &DVector<f64>,
        chi: &DVector<f64>,
        lambda: &DVector<f64>,
        s: &DVector<f64>,
        a: Option<&DVector<f64>>,
        tau: f64,
        scales: &Scales,
    ) -> f64 {
        let v = kkt_residual_vector(inst, st, z, chi, lambda, s, a, tau);
        let stat = v.rows(0, st.np).amax() / scales.stat;
        let eq = v.rows(st.np, st.ne).amax();
        // Complementarity counts as converged within 1% of τ, plus the
        // rounding floor of λ·r when the margin cancels large terms.
        let comp = st
            .ineqs
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let size = q.rhs.abs() + z[q.var].abs() + q.slack.map_or(0.0, |j| z[j].abs());
                let floor = 8.0 * f64::EPSILON * lambda[i] * size;
                v[st.np + st.ne + i].abs() * self.options.tol / (0.01 * tau + floor)
            })
            .fold(0.0, f64::max);
        stat.max(eq).max(comp)
    }
}

/// `kkt_residual(ocp, θ, s, y, a)` on a returned solution, at the exit barrier.
pub fn kkt_residual(inst: &OcpInstance, sol: &PrimalDualSolution) -> Result<DVector<f64>> {
    let st = Structure::new(inst, sol.fixed_input.is_some(), sol.hard_constraints)?;
    let z = st.from_trajectory(&sol.traj);
    let mut chi = DVector::zeros(st.ne);
    chi.rows_mut(0, st.eq_zeta).copy_from(&sol.chi);
    if sol.fixed_input.is_some() {
        chi.rows_mut(st.eq_zeta, inst.nu).copy_from(&sol.zeta);
    }
    Ok(kkt_residual_vector(inst, &st, &z, &chi, &sol.lambda, &sol.s, sol.fixed_input.as_ref(), sol.barrier))
}

/// Instantiates and solves `V_θ(s)`.
pub fn solve_v(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    s: &DVector<f64>,
    options: &SolverOptions,
) -> Result<(f64, PrimalDualSolution)> {
    let inst = ocp.instantiate(theta)?;
    let sol = Solver::new(options.clone()).solve_v(&inst, s)?;
    Ok((sol.objective, sol))
}

/// Instantiates and solves `Q_θ(s, a)`.
pub fn solve_q(
    ocp: &ParametricOcp,
    theta: &ThetaVector,
    s: &DVector<f64>,
    a: &DVector<f64>,
    options: &SolverOptions,
) -> Result<(f64, PrimalDualSolution)> {
    let inst = ocp.instantiate(theta)?;
    let sol = Solver::new(options.clone()).solve_q(&inst, s, a)?;
    Ok((sol.objective, sol))
}
