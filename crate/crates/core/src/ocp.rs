//! The parametric horizon-N optimal-control problem.
//!
//! A [`ParametricOcp`] is a recipe: every cost, dynamics and bound term either
//! holds a fixed value or names a θ-slice. [`ParametricOcp::instantiate`]
//! turns it into a numeric [`OcpInstance`] and [`ParametricOcp::derivative`]
//! gives the exact derivative of that instance w.r.t. one θ entry.
//!
//! Cost layout (all quadratics are centered, `d = z − center`):
//!
//! ```text
//! λ(x₀) + Σ_{k<N} γᵏ (l(x_k,u_k) + wᵀσ_k) + γᴺ (V_f(x_N) + w_fᵀσ_N)
//! ```
//!
//! Mixed constraints are box rows `h(z) ≤ σ` on single state or input
//! entries; input bounds are hard and never parametrized.

use alloc::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lqr::{self, LqrProblem, LqrSolution};
use crate::prelude::*;
use crate::theta::{sym_unit, SliceKind, ThetaVector};

/// Discrete-time dynamics `x⁺ = F(x, u)` with Jacobians.
pub trait DiscreteModel: Send + Sync + core::fmt::Debug {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Returns `(F(x,u), ∂F/∂x, ∂F/∂u)`.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarSource {
    Fixed(f64),
    Theta(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorSource {
    Fixed(DVector<f64>),
    Theta(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixSource {
    Fixed(DMatrix<f64>),
    /// A `Matrix` slice (row-major).
    Theta(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum HessianSource {
    Fixed(DMatrix<f64>),
    /// A `Symmetric` slice.
    Theta(String),
    /// Stabilizing discounted Riccati matrix of the affine θ-model weighted
    /// by the stage Hessian; only valid as terminal Hessian.
    Riccati,
}

/// `q(z) = ½ dᵀH d + hᵀd + c`, `d = z − center`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticAtom {
    pub dim: usize,
    pub hessian: HessianSource,
    pub gradient: VectorSource,
    pub constant: ScalarSource,
    pub center: DVector<f64>,
}

impl QuadraticAtom {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            hessian: HessianSource::Fixed(DMatrix::zeros(dim, dim)),
            gradient: VectorSource::Fixed(DVector::zeros(dim)),
            constant: ScalarSource::Fixed(0.0),
            center: DVector::zeros(dim),
        }
    }

    /// Fully θ-parametrized quadratic around `center`.
    pub fn parametrized(center: DVector<f64>, hessian: &str, gradient: &str, constant: &str) -> Self {
        Self {
            dim: center.len(),
            hessian: HessianSource::Theta(hessian.to_string()),
            gradient: VectorSource::Theta(gradient.to_string()),
            constant: ScalarSource::Theta(constant.to_string()),
            center,
        }
    }
}

#[derive(Debug, Clone)]
pub enum DynamicsAtom {
    /// `A x + B u + offset`.
    Affine { a: MatrixSource, b: MatrixSource, offset: VectorSource },
    /// `F(x, u) + offset`.
    Model { model: Arc<dyn DiscreteModel>, offset: VectorSource },
}

/// Box row on one entry of `(x, u)` (stage) or `x` (terminal):
/// `h = z[var] − bound` when `upper`, `bound − z[var]` otherwise, with
/// `bound = base + θ[shift]`; enforced as `h ≤ σ[slack]` or `h ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub var: usize,
    pub upper: bool,
    pub base: f64,
    pub shift: Option<(String, usize)>,
    pub slack: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ParametricOcp {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub initial: QuadraticAtom,
    pub stage: QuadraticAtom,
    pub terminal: QuadraticAtom,
    pub dynamics: DynamicsAtom,
    pub stage_rows: Vec<BoundRow>,
    pub terminal_rows: Vec<BoundRow>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
    /// Stage slack weights; their length is the stage slack dimension.
    pub w: DVector<f64>,
    pub wf: DVector<f64>,
    /// When false the stage gradient term `hᵀd` is not discounted.
    pub discount_stage_gradient: bool,
    /// Input used to initialize the solver.
    pub u_guess: DVector<f64>,
}

/// Numeric quadratic.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: f64,
    pub center: DVector<f64>,
}

impl Quadratic {
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        let d = z - &self.center;
        0.5 * d.dot(&(&self.h * &d)) + self.g.dot(&d) + self.c
    }

    /// Quadratic and linear parts separately.
    pub fn parts(&self, z: &DVector<f64>) -> (f64, f64) {
        let d = z - &self.center;
        (0.5 * d.dot(&(&self.h * &d)) + self.c, self.g.dot(&d))
    }

    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.h * (z - &self.center) + &self.g
    }
}

/// Derivative of a [`Quadratic`] w.r.t. one parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuadraticDelta {
    pub h: Option<DMatrix<f64>>,
    pub g: Option<DVector<f64>>,
    pub c: f64,
}

impl QuadraticDelta {
    pub fn is_zero(&self) -> bool {
        self.h.is_none() && self.g.is_none() && self.c == 0.0
    }

    /// `(∂q, ∂q split as (quadratic + constant, linear))`.
    pub fn parts(&self, q: &Quadratic, z: &DVector<f64>) -> (f64, f64) {
        let d = z - &q.center;
        let quad = self.h.as_ref().map_or(0.0, |h| 0.5 * d.dot(&(h * &d))) + self.c;
        let lin = self.g.as_ref().map_or(0.0, |g| g.dot(&d));
        (quad, lin)
    }

    /// Derivative of the gradient, split as (Hessian part, linear part).
    pub fn gradient_parts(&self, q: &Quadratic, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = q.center.len();
        let hp = self.h.as_ref().map_or_else(|| DVector::zeros(n), |h| h * (z - &q.center));
        let gp = self.g.clone().unwrap_or_else(|| DVector::zeros(n));
        (hp, gp)
    }
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    Affine { a: DMatrix<f64>, b: DMatrix<f64>, offset: DVector<f64> },
    Model { model: Arc<dyn DiscreteModel>, offset: DVector<f64> },
}

impl Dynamics {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Affine { a, b, offset } => a * x + b * u + offset,
            Self::Model { model, offset } => model.eval(x, u) + offset,
        }
    }

    pub fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        match self {
            Self::Affine { a, b, offset } => (a * x + b * u + offset, a.clone(), b.clone()),
            Self::Model { model, offset } => {
                let (f, a, b) = model.linearize(x, u);
                (f + offset, a, b)
            }
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Self::Affine { .. })
    }

    /// `∇²_{(x,u)} (χᵀF)` by central differences of the Jacobians; zero for
    /// affine dynamics.
    pub fn curvature(&self, x: &DVector<f64>, u: &DVector<f64>, chi: &DVector<f64>) -> DMatrix<f64> {
        let (nx, nu) = (x.len(), u.len());
        let n = nx + nu;
        let mut h = DMatrix::zeros(n, n);
        if self.is_affine() {
            return h;
        }
        let grad = |x: &DVector<f64>, u: &DVector<f64>| -> DVector<f64> {
            let (_, a, b) = self.linearize(x, u);
            let mut g = DVector::zeros(n);
            g.rows_mut(0, nx).copy_from(&(a.transpose() * chi));
            g.rows_mut(nx, nu).copy_from(&(b.transpose() * chi));
            g
        };
        for i in 0..n {
            let (mut xp, mut up) = (x.clone(), u.clone());
            let (mut xm, mut um) = (x.clone(), u.clone());
            let base = if i < nx { x[i] } else { u[i - nx] };
            let step = 1e-4 * (1.0 + base.abs());
            if i < nx {
                xp[i] += step;
                xm[i] -= step;
            } else {
                up[i - nx] += step;
                um[i - nx] -= step;
            }
            let col = (grad(&xp, &up) - grad(&xm, &um)) / (2.0 * step);
            h.set_column(i, &col);
        }
        crate::linalg::symmetrize(&h)
    }
}

/// Numeric bound row: `h = ±(z[var] − bound)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub var: usize,
    pub upper: bool,
    pub bound: f64,
    pub slack: Option<usize>,
}

impl Row {
    pub fn h(&self, z: &DVector<f64>) -> f64 {
        if self.upper {
            z[self.var] - self.bound
        } else {
            self.bound - z[self.var]
        }
    }
}

/// The OCP at a fixed θ.
#[derive(Debug, Clone)]
pub struct OcpInstance {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub initial: Quadratic,
    pub stage: Quadratic,
    pub terminal: Quadratic,
    pub dynamics: Dynamics,
    pub stage_rows: Vec<Row>,
    pub terminal_rows: Vec<Row>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
    pub w: DVector<f64>,
    pub wf: DVector<f64>,
    pub discount_stage_gradient: bool,
    pub u_guess: DVector<f64>,
    /// Riccati data behind a `Riccati` terminal Hessian.
    pub riccati: Option<(LqrProblem, LqrSolution)>,
}

/// Exact derivative of an [`OcpInstance`] w.r.t. one θ entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OcpDelta {
    pub initial: QuadraticDelta,
    pub stage: QuadraticDelta,
    pub terminal: QuadraticDelta,
    pub da: Option<DMatrix<f64>>,
    pub db: Option<DMatrix<f64>>,
    pub doffset: Option<DVector<f64>>,
    pub stage_rows: Vec<f64>,
    pub terminal_rows: Vec<f64>,
}

impl OcpDelta {
    pub fn is_zero(&self) -> bool {
        self.initial.is_zero()
            && self.stage.is_zero()
            && self.terminal.is_zero()
            && self.da.is_none()
            && self.db.is_none()
            && self.doffset.is_none()
            && self.stage_rows.iter().all(|&v| v == 0.0)
            && self.terminal_rows.iter().all(|&v| v == 0.0)
    }
}

/// States `x₀..x_N`, inputs `u₀..u_{N−1}`, slacks `σ₀..σ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub sigma: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn zeros(nx: usize, nu: usize, ns: usize, nsf: usize, horizon: usize) -> Self {
        let mut sigma = vec![DVector::zeros(ns); horizon];
        sigma.push(DVector::zeros(nsf));
        Self { x: vec![DVector::zeros(nx); horizon + 1], u: vec![DVector::zeros(nu); horizon], sigma }
    }

    pub fn horizon(&self) -> usize {
        self.u.len()
    }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

fn unit_vector(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

fn check_slice(theta: &ThetaVector, name: &str, ok: impl Fn(&SliceKind, usize) -> bool, what: &str) -> Result<()> {
    let s = theta.layout().get(name)?;
    if !ok(&s.kind, s.len) {
        return Err(Error::Layout(format!("slice `{name}` ({}, length {}) cannot serve as {what}", s.kind, s.len)));
    }
    Ok(())
}

impl ScalarSource {
    fn value(&self, theta: &ThetaVector) -> Result<f64> {
        match self {
            Self::Fixed(v) => Ok(*v),
            Self::Theta(n) => Ok(theta.raw(n)?[0]),
        }
    }

    fn check(&self, theta: &ThetaVector) -> Result<()> {
        match self {
            Self::Fixed(_) => Ok(()),
            Self::Theta(n) => check_slice(theta, n, |k, len| matches!(k, SliceKind::Scalar) || len == 1, "a scalar"),
        }
    }

    fn delta(&self, name: &str) -> f64 {
        match self {
            Self::Theta(n) if n == name => 1.0,
            _ => 0.0,
        }
    }
}

impl VectorSource {
    fn value(&self, theta: &ThetaVector) -> Result<DVector<f64>> {
        match self {
            Self::Fixed(v) => Ok(v.clone()),
            Self::Theta(n) => theta.vector(n),
        }
    }

    fn check(&self, theta: &ThetaVector, dim: usize) -> Result<()> {
        match self {
            Self::Fixed(v) if v.len() == dim => Ok(()),
            Self::Fixed(v) => Err(Error::Shape(format!("fixed vector has length {}, expected {dim}", v.len()))),
            Self::Theta(n) => check_slice(
                theta,
                n,
                |k, len| matches!(k, SliceKind::Vector | SliceKind::Scalar) && len == dim,
                &format!("a vector of length {dim}"),
            ),
        }
    }

    fn delta(&self, name: &str, local: usize, dim: usize) -> Option<DVector<f64>> {
        match self {
            Self::Theta(n) if n == name => Some(unit_vector(dim, local)),
            _ => None,
        }
    }
}

impl MatrixSource {
    fn value(&self, theta: &ThetaVector) -> Result<DMatrix<f64>> {
        match self {
            Self::Fixed(m) => Ok(m.clone()),
            Self::Theta(n) => theta.matrix(n),
        }
    }

    fn check(&self, theta: &ThetaVector, rows: usize, cols: usize) -> Result<()> {
        match self {
            Self::Fixed(m) if m.shape() == (rows, cols) => Ok(()),
            Self::Fixed(m) => {
                Err(Error::Shape(format!("fixed matrix is {:?}, expected {:?}", m.shape(), (rows, cols))))
            }
            Self::Theta(n) => {
                check_slice(theta, n, |k, _| *k == SliceKind::Matrix { rows, cols }, &format!("a {rows}x{cols} matrix"))
            }
        }
    }

    fn delta(&self, name: &str, local: usize, rows: usize, cols: usize) -> Option<DMatrix<f64>> {
        match self {
            Self::Theta(n) if n == name => {
                let mut m = DMatrix::zeros(rows, cols);
                m[(local / cols, local % cols)] = 1.0;
                Some(m)
            }
            _ => None,
        }
    }
}

impl ParametricOcp {
    pub fn ns(&self) -> usize {
        self.w.len()
    }

    pub fn nsf(&self) -> usize {
        self.wf.len()
    }

    /// Checks the problem data and that every referenced slice exists with a
    /// compatible shape.
    pub fn validate(&self, theta: &ThetaVector) -> Result<()> {
        let (nx, nu) = (self.nx, self.nu);
        if self.horizon == 0 {
            return Err(Error::Contract("horizon must be at least 1".to_string()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Contract(format!("discount {} outside (0, 1]", self.gamma)));
        }
        if self.w.iter().chain(self.wf.iter()).any(|&v| !(v > 0.0)) {
            return Err(Error::Contract("slack weights must be positive".to_string()));
        }
        if self.u_lb.len() != nu || self.u_ub.len() != nu || self.u_guess.len() != nu {
            return Err(Error::Shape("input bounds or guess have the wrong length".to_string()));
        }
        if let Some(i) = (0..nu).find(|&i| self.u_lb[i] > self.u_ub[i]) {
            return Err(Error::Contract(format!(
                "inconsistent input bounds on u[{i}]: {} > {}",
                self.u_lb[i], self.u_ub[i]
            )));
        }
        for (atom, dim, name) in
            [(&self.initial, nx, "initial"), (&self.stage, nx + nu, "stage"), (&self.terminal, nx, "terminal")]
        {
            if atom.dim != dim || atom.center.len() != dim {
                return Err(Error::Shape(format!("{name} cost has dimension {}, expected {dim}", atom.dim)));
            }
            match &atom.hessian {
                HessianSource::Fixed(m) if m.shape() != (dim, dim) => {
                    return Err(Error::Shape(format!("{name} Hessian is {:?}", m.shape())));
                }
                HessianSource::Fixed(_) => {}
                HessianSource::Theta(n) => check_slice(
                    theta,
                    n,
                    |k, _| *k == SliceKind::Symmetric { n: dim },
                    &format!("a {dim}x{dim} Hessian"),
                )?,
                HessianSource::Riccati => {
                    if name != "terminal"
                        || !matches!(self.dynamics, DynamicsAtom::Affine { .. })
                        || matches!(self.stage.hessian, HessianSource::Riccati)
                    {
                        return Err(Error::Contract(
                            "a Riccati Hessian needs affine dynamics, the terminal slot and a stage Hessian"
                                .to_string(),
                        ));
                    }
                }
            }
            atom.gradient.check(theta, dim)?;
            atom.constant.check(theta)?;
        }
        match &self.dynamics {
            DynamicsAtom::Affine { a, b, offset } => {
                a.check(theta, nx, nx)?;
                b.check(theta, nx, nu)?;
                offset.check(theta, nx)?;
            }
            DynamicsAtom::Model { model, offset } => {
                if model.nx() != nx || model.nu() != nu {
                    return Err(Error::Shape("model dimensions do not match the problem".to_string()));
                }
                offset.check(theta, nx)?;
            }
        }
        for (rows, dim, ns) in [(&self.stage_rows, nx + nu, self.ns()), (&self.terminal_rows, nx, self.nsf())] {
            for r in rows.iter() {
                if r.var >= dim || r.slack.is_some_and(|s| s >= ns) {
                    return Err(Error::Shape(format!("bound row {r:?} out of range")));
                }
                if let Some((n, i)) = &r.shift {
                    let s = theta.layout().get(n)?;
                    if *i >= s.len {
                        return Err(Error::Layout(format!("bound shift `{n}`[{i}] out of range")));
                    }
                }
            }
        }
        Ok(())
    }

    fn quadratic(&self, atom: &QuadraticAtom, theta: &ThetaVector, riccati: Option<&LqrSolution>) -> Result<Quadratic> {
        let h = match &atom.hessian {
            HessianSource::Fixed(m) => m.clone(),
            HessianSource::Theta(n) => theta.symmetric(n)?,
            HessianSource::Riccati => riccati.expect("riccati data").s.clone(),
        };
        Ok(Quadratic { h, g: atom.gradient.value(theta)?, c: atom.constant.value(theta)?, center: atom.center.clone() })
    }

    fn row(&self, r: &BoundRow, theta: &ThetaVector) -> Result<Row> {
        let shift = match &r.shift {
            Some((n, i)) => theta.raw(n)?[*i],
            None => 0.0,
        };
        Ok(Row { var: r.var, upper: r.upper, bound: r.base + shift, slack: r.slack })
    }

    pub fn instantiate(&self, theta: &ThetaVector) -> Result<OcpInstance> {
        self.validate(theta)?;
        let dynamics = match &self.dynamics {
            DynamicsAtom::Affine { a, b, offset } => {
                Dynamics::Affine { a: a.value(theta)?, b: b.value(theta)?, offset: offset.value(theta)? }
            }
            DynamicsAtom::Model { model, offset } => {
                Dynamics::Model { model: model.clone(), offset: offset.value(theta)? }
            }
        };
        let riccati = match (&self.terminal.hessian, &dynamics) {
            (HessianSource::Riccati, Dynamics::Affine { a, b, .. }) => {
                let (nx, nu) = (self.nx, self.nu);
                let weight = &self.quadratic(&self.stage, theta, None)?.h;
                let mut prob = LqrProblem::new(
                    a.clone(),
                    b.clone(),
                    weight.view((0, 0), (nx, nx)).into_owned(),
                    weight.view((nx, nx), (nu, nu)).into_owned(),
                    self.gamma,
                );
                prob.n = weight.view((0, nx), (nx, nu)).into_owned();
                let sol = lqr::solve_discounted_dare(&prob)?;
                Some((prob, sol))
            }
            _ => None,
        };
        let ric = riccati.as_ref().map(|r| &r.1);
        Ok(OcpInstance {
            nx: self.nx,
            nu: self.nu,
            horizon: self.horizon,
            gamma: self.gamma,
            initial: self.quadratic(&self.initial, theta, ric)?,
            stage: self.quadratic(&self.stage, theta, ric)?,
            terminal: self.quadratic(&self.terminal, theta, ric)?,
            dynamics,
            stage_rows: self.stage_rows.iter().map(|r| self.row(r, theta)).collect::<Result<_>>()?,
            terminal_rows: self.terminal_rows.iter().map(|r| self.row(r, theta)).collect::<Result<_>>()?,
            u_lb: self.u_lb.clone(),
            u_ub: self.u_ub.clone(),
            w: self.w.clone(),
            wf: self.wf.clone(),
            discount_stage_gradient: self.discount_stage_gradient,
            u_guess: self.u_guess.clone(),
            riccati,
        })
    }

    fn quadratic_delta(atom: &QuadraticAtom, name: &str, local: usize, kind: &SliceKind) -> QuadraticDelta {
        let h = match (&atom.hessian, kind) {
            (HessianSource::Theta(n), SliceKind::Symmetric { n: dim }) if n == name => Some(sym_unit(*dim, local)),
            _ => None,
        };
        QuadraticDelta { h, g: atom.gradient.delta(name, local, atom.dim), c: atom.constant.delta(name) }
    }

    /// Exact derivative of `instantiate(θ)` w.r.t. `θ[j]`.
    pub fn derivative(&self, inst: &OcpInstance, theta: &ThetaVector, j: usize) -> Result<OcpDelta> {
        let (slice, local) =
            theta.layout().locate(j).ok_or_else(|| Error::Layout(format!("theta index {j} out of range")))?;
        let name = slice.name.as_str();
        let kind = &slice.kind;
        let mut d = OcpDelta {
            initial: Self::quadratic_delta(&self.initial, name, local, kind),
            stage: Self::quadratic_delta(&self.stage, name, local, kind),
            terminal: Self::quadratic_delta(&self.terminal, name, local, kind),
            ..Default::default()
        };
        match &self.dynamics {
            DynamicsAtom::Affine { a, b, offset } => {
                d.da = a.delta(name, local, self.nx, self.nx);
                d.db = b.delta(name, local, self.nx, self.nu);
                d.doffset = offset.delta(name, local, self.nx);
            }
            DynamicsAtom::Model { offset, .. } => d.doffset = offset.delta(name, local, self.nx),
        }
        if let (Some((prob, sol)), true) = (&inst.riccati, d.da.is_some() || d.db.is_some() || d.stage.h.is_some()) {
            let da = d.da.clone().unwrap_or_else(|| DMatrix::zeros(self.nx, self.nx));
            let db = d.db.clone().unwrap_or_else(|| DMatrix::zeros(self.nx, self.nu));
            let dw = d.stage.h.clone().unwrap_or_else(|| DMatrix::zeros(self.nx + self.nu, self.nx + self.nu));
            d.terminal.h = Some(lqr::dare_sensitivity(prob, sol, &da, &db, &dw)?);
        }
        let row_delta = |r: &BoundRow| match &r.shift {
            Some((n, i)) if n == name && *i == local => 1.0,
            _ => 0.0,
        };
        d.stage_rows = self.stage_rows.iter().map(row_delta).collect();
        d.terminal_rows = self.terminal_rows.iter().map(row_delta).collect();
        Ok(d)
    }
}

impl OcpInstance {
    pub fn ns(&self) -> usize {
        self.w.len()
    }

    pub fn nsf(&self) -> usize {
        self.wf.len()
    }

    /// Weights `(quadratic, linear)` multiplying stage `k`.
    pub fn stage_weights(&self, k: usize) -> (f64, f64) {
        let g = self.gamma.powi(k as i32);
        (g, if self.discount_stage_gradient { g } else { 1.0 })
    }

    pub fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (wq, wg) = self.stage_weights(k);
        let (q, l) = self.stage.parts(&stack(x, u));
        wq * q + wg * l
    }

    /// `h(x, u)` per slack index: the largest row value mapped to each slack.
    pub fn slack_demand(rows: &[Row], z: &DVector<f64>, ns: usize) -> DVector<f64> {
        let mut h = DVector::from_element(ns, f64::NEG_INFINITY);
        for r in rows {
            if let Some(s) = r.slack {
                h[s] = h[s].max(r.h(z));
            }
        }
        h
    }

    /// `L_θ(s, a) = l_θ(s, a) + wᵀ max(0, h_θ(s, a))`, undiscounted.
    pub fn relaxed_stage_cost(&self, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        let z = stack(s, a);
        let h = Self::slack_demand(&self.stage_rows, &z, self.ns());
        self.stage.value(&z) + h.iter().zip(self.w.iter()).map(|(h, w)| w * h.max(0.0)).sum::<f64>()
    }

    /// Discounted total cost of a trajectory.
    pub fn total_cost(&self, traj: &Trajectory) -> f64 {
        let n = self.horizon;
        let mut v = self.initial.value(&traj.x[0]);
        for k in 0..n {
            v += self.stage_cost(k, &traj.x[k], &traj.u[k]) + self.gamma.powi(k as i32) * self.w.dot(&traj.sigma[k]);
        }
        v + self.gamma.powi(n as i32) * (self.terminal.value(&traj.x[n]) + self.wf.dot(&traj.sigma[n]))
    }

    /// Rolls the dynamics out from `s` under `inputs`; slacks are set to the
    /// smallest feasible values.
    pub fn rollout(&self, s: &DVector<f64>, inputs: &[DVector<f64>]) -> Trajectory {
        let mut traj = Trajectory::zeros(self.nx, self.nu, self.ns(), self.nsf(), self.horizon);
        traj.x[0] = s.clone();
        for k in 0..self.horizon {
            traj.u[k] = inputs[k].clone();
            traj.x[k + 1] = self.dynamics.eval(&traj.x[k], &traj.u[k]);
        }
        self.fill_slacks(&mut traj);
        traj
    }

    pub fn fill_slacks(&self, traj: &mut Trajectory) {
        for k in 0..self.horizon {
            let h = Self::slack_demand(&self.stage_rows, &stack(&traj.x[k], &traj.u[k]), self.ns());
            traj.sigma[k] = h.map(|v| v.max(0.0));
        }
        let h = Self::slack_demand(&self.terminal_rows, &traj.x[self.horizon], self.nsf());
        traj.sigma[self.horizon] = h.map(|v| v.max(0.0));
    }
}
