//! The concrete MPC schemes: the linear MPC with model bias and gradient
//! terms, the evaporation ENMPC with fully parametrized quadratics, and plain
//! unconstrained LQ problems used as analytic references.

use alloc::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::lqr::{self, LqrProblem};
use crate::ocp::{
    BoundRow, DiscreteModel, DynamicsAtom, HessianSource, MatrixSource, ParametricOcp, QuadraticAtom, ScalarSource,
    VectorSource,
};
use crate::plants::{economic_steady_state, EvaporationPlant, SteadyState};
use crate::prelude::*;
use crate::theta::{SliceKind, ThetaLayout, ThetaVector};

/// Box rows `lower_base + θ[lb] − σ ≤ x ≤ upper_base + θ[ub] + σ` on every
/// state, with one slack per state.
fn state_box_rows(lower: &[f64], upper: &[f64], lb: &str, ub: &str) -> Vec<BoundRow> {
    let mut rows = Vec::new();
    for i in 0..lower.len() {
        rows.push(BoundRow { var: i, upper: false, base: lower[i], shift: Some((lb.to_string(), i)), slack: Some(i) });
        rows.push(BoundRow { var: i, upper: true, base: upper[i], shift: Some((ub.to_string(), i)), slack: Some(i) });
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMpcOptions {
    pub horizon: usize,
    pub gamma: f64,
    pub w: [f64; 2],
    /// Discount the `fᵀ[x; u]` term with the rest of the stage cost.
    pub discount_gradient: bool,
}

impl Default for LinearMpcOptions {
    fn default() -> Self {
        Self { horizon: 10, gamma: 0.9, w: [100.0, 100.0], discount_gradient: true }
    }
}

/// `(V0, x_lb, x_ub, b, f, A, B)`, 16 entries.
pub fn linear_mpc_layout() -> ThetaLayout {
    let mut l = ThetaLayout::new();
    l.push("V0", SliceKind::Scalar, 1, false).unwrap();
    l.push("x_lb", SliceKind::Vector, 2, false).unwrap();
    l.push("x_ub", SliceKind::Vector, 2, false).unwrap();
    l.push("b", SliceKind::Vector, 2, false).unwrap();
    l.push("f", SliceKind::Vector, 3, false).unwrap();
    l.push("A", SliceKind::Matrix { rows: 2, cols: 2 }, 4, false).unwrap();
    l.push("B", SliceKind::Matrix { rows: 2, cols: 1 }, 2, false).unwrap();
    l
}

/// Initial guess: the nominal model `A = [[1, 0.25], [0, 1]]`,
/// `B = [0.0312; 0.25]`, everything else zero.
pub fn linear_mpc_initial_theta() -> ThetaVector {
    let mut t = ThetaVector::zeros(linear_mpc_layout());
    t.set_raw("A", &[1.0, 0.25, 0.0, 1.0]).unwrap();
    t.set_raw("B", &[0.0312, 0.25]).unwrap();
    t
}

/// Stage Hessian of `½‖x‖² + ¼‖u‖²`.
pub fn linear_mpc_stage_hessian() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1.0, 0.5]))
}

/// The linear MPC: stage cost `fᵀ[x; u] + ½‖x‖² + ¼‖u‖² + wᵀσ`, state rows
/// `(0, −1) + x_lb − σ ≤ x ≤ (1, 1) + x_ub + σ`, `−1 ≤ u ≤ 1`, dynamics
/// `Ax + Bu + b`, terminal cost `½xᵀS_N x` with `S_N` the Riccati matrix of
/// the current `(A, B)`, and constant offset `V0`.
pub fn build_linear_mpc(theta: &ThetaVector, opts: &LinearMpcOptions) -> Result<ParametricOcp> {
    let mut initial = QuadraticAtom::zero(2);
    initial.constant = ScalarSource::Theta("V0".into());
    let stage = QuadraticAtom {
        dim: 3,
        hessian: HessianSource::Fixed(linear_mpc_stage_hessian()),
        gradient: VectorSource::Theta("f".into()),
        constant: ScalarSource::Fixed(0.0),
        center: DVector::zeros(3),
    };
    let mut terminal = QuadraticAtom::zero(2);
    terminal.hessian = HessianSource::Riccati;
    let rows = state_box_rows(&[0.0, -1.0], &[1.0, 1.0], "x_lb", "x_ub");
    let w = DVector::from_column_slice(&opts.w);
    let ocp = ParametricOcp {
        nx: 2,
        nu: 1,
        horizon: opts.horizon,
        gamma: opts.gamma,
        initial,
        stage,
        terminal,
        dynamics: DynamicsAtom::Affine {
            a: MatrixSource::Theta("A".into()),
            b: MatrixSource::Theta("B".into()),
            offset: VectorSource::Theta("b".into()),
        },
        stage_rows: rows.clone(),
        terminal_rows: rows,
        u_lb: DVector::from_element(1, -1.0),
        u_ub: DVector::from_element(1, 1.0),
        w: w.clone(),
        wf: w,
        discount_stage_gradient: opts.discount_gradient,
        u_guess: DVector::zeros(1),
    };
    ocp.validate(theta)?;
    Ok(ocp)
}

/// Unconstrained LQ problem written as an OCP: θ = `(A, B, H)` with stage cost
/// `½[x; u]ᵀH[x; u]`, Riccati terminal cost and bounds at `±bound` (slacked
/// state rows, hard input rows). With `H = 2W` for an [`LqrProblem`] weight
/// `W`, `V_θ(s) = sᵀSs` and `π_θ(s) = −Ks`.
pub fn build_lq_ocp(prob: &LqrProblem, horizon: usize, bound: f64) -> Result<(ParametricOcp, ThetaVector)> {
    let (nx, nu) = (prob.nx(), prob.nu());
    let mut layout = ThetaLayout::new();
    layout.push("A", SliceKind::Matrix { rows: nx, cols: nx }, nx * nx, false)?;
    layout.push("B", SliceKind::Matrix { rows: nx, cols: nu }, nx * nu, false)?;
    let m = nx + nu;
    layout.push("H", SliceKind::Symmetric { n: m }, m * (m + 1) / 2, false)?;
    let mut theta = ThetaVector::zeros(layout);
    theta.set_matrix("A", &prob.a)?;
    theta.set_matrix("B", &prob.b)?;
    theta.set_matrix("H", &(prob.stage_matrix() * 2.0))?;
    let rows: Vec<BoundRow> = (0..nx)
        .flat_map(|i| {
            [
                BoundRow { var: i, upper: false, base: -bound, shift: None, slack: Some(i) },
                BoundRow { var: i, upper: true, base: bound, shift: None, slack: Some(i) },
            ]
        })
        .collect();
    let w = DVector::from_element(nx, 1e3);
    let mut terminal = QuadraticAtom::zero(nx);
    terminal.hessian = HessianSource::Riccati;
    let ocp = ParametricOcp {
        nx,
        nu,
        horizon,
        gamma: prob.gamma,
        initial: QuadraticAtom::zero(nx),
        stage: QuadraticAtom {
            dim: m,
            hessian: HessianSource::Theta("H".into()),
            gradient: VectorSource::Fixed(DVector::zeros(m)),
            constant: ScalarSource::Fixed(0.0),
            center: DVector::zeros(m),
        },
        terminal,
        dynamics: DynamicsAtom::Affine {
            a: MatrixSource::Theta("A".into()),
            b: MatrixSource::Theta("B".into()),
            offset: VectorSource::Fixed(DVector::zeros(nx)),
        },
        stage_rows: rows.clone(),
        terminal_rows: rows,
        u_lb: DVector::from_element(nu, -bound),
        u_ub: DVector::from_element(nu, bound),
        w: w.clone(),
        wf: w,
        discount_stage_gradient: true,
        u_guess: DVector::zeros(nu),
    };
    ocp.validate(&theta)?;
    Ok((ocp, theta))
}

#[derive(Debug, Clone)]
pub struct EvaporationScheme {
    pub horizon: usize,
    pub gamma: f64,
    pub w: f64,
    /// Center of the quadratic atoms (steady state and input).
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
    pub model: Arc<dyn DiscreteModel>,
}

impl EvaporationScheme {
    /// Horizon 10, discount 0.99, centered at the cheapest steady state with
    /// `X2` on its lower bound.
    pub fn new(plant: &EvaporationPlant) -> Result<Self> {
        let ss = economic_steady_state(plant, plant.x_lb[0])?;
        Ok(Self::with_reference(plant, &ss))
    }

    pub fn with_reference(plant: &EvaporationPlant, ss: &SteadyState) -> Self {
        Self {
            horizon: 10,
            gamma: 0.99,
            w: 1.0,
            x_ref: DVector::from_column_slice(&ss.x),
            u_ref: DVector::from_column_slice(&ss.u),
            u_lb: DVector::from_column_slice(&plant.u_lb),
            u_ub: DVector::from_column_slice(&plant.u_ub),
            model: Arc::new(plant.model()),
        }
    }
}

/// `(H_λ, h_λ, c_λ, H_Vf, h_Vf, c_Vf, H_l, h_l, c_l, c_f, x_lb, x_ub)`.
pub fn evaporation_layout() -> ThetaLayout {
    let mut l = ThetaLayout::new();
    l.push("H_lambda", SliceKind::Symmetric { n: 2 }, 3, false).unwrap();
    l.push("h_lambda", SliceKind::Vector, 2, false).unwrap();
    l.push("c_lambda", SliceKind::Scalar, 1, false).unwrap();
    l.push("H_Vf", SliceKind::Symmetric { n: 2 }, 3, true).unwrap();
    l.push("h_Vf", SliceKind::Vector, 2, false).unwrap();
    l.push("c_Vf", SliceKind::Scalar, 1, false).unwrap();
    l.push("H_l", SliceKind::Symmetric { n: 4 }, 10, true).unwrap();
    l.push("h_l", SliceKind::Vector, 4, false).unwrap();
    l.push("c_l", SliceKind::Scalar, 1, false).unwrap();
    l.push("c_f", SliceKind::Vector, 2, false).unwrap();
    l.push("x_lb", SliceKind::Vector, 2, false).unwrap();
    l.push("x_ub", SliceKind::Vector, 2, false).unwrap();
    l
}

/// The evaporation ENMPC: centered quadratic `λ_θ`, `l_θ`, `V^f_θ`, model
/// `F(x, u) + c_f`, fixed input bounds and state rows `x_lb − σ ≤ x ≤ x_ub + σ`
/// (stage and terminal) with unit slack weight.
pub fn build_evaporation_ocp(theta: &ThetaVector, scheme: &EvaporationScheme) -> Result<ParametricOcp> {
    for name in ["H_l", "H_Vf"] {
        let h = theta.symmetric(name)?;
        let e = min_eigenvalue(&h);
        if !(e > 0.0) {
            return Err(Error::Contract(format!("{name} is not positive definite (smallest eigenvalue {e:.3e})")));
        }
    }
    let mut zref = DVector::zeros(4);
    zref.rows_mut(0, 2).copy_from(&scheme.x_ref);
    zref.rows_mut(2, 2).copy_from(&scheme.u_ref);
    let rows = state_box_rows(&[0.0, 0.0], &[0.0, 0.0], "x_lb", "x_ub");
    let w = DVector::from_element(2, scheme.w);
    let ocp = ParametricOcp {
        nx: 2,
        nu: 2,
        horizon: scheme.horizon,
        gamma: scheme.gamma,
        initial: QuadraticAtom::parametrized(scheme.x_ref.clone(), "H_lambda", "h_lambda", "c_lambda"),
        stage: QuadraticAtom::parametrized(zref, "H_l", "h_l", "c_l"),
        terminal: QuadraticAtom::parametrized(scheme.x_ref.clone(), "H_Vf", "h_Vf", "c_Vf"),
        dynamics: DynamicsAtom::Model { model: scheme.model.clone(), offset: VectorSource::Theta("c_f".into()) },
        stage_rows: rows.clone(),
        terminal_rows: rows,
        u_lb: scheme.u_lb.clone(),
        u_ub: scheme.u_ub.clone(),
        w: w.clone(),
        wf: w,
        discount_stage_gradient: true,
        u_guess: scheme.u_ref.clone(),
    };
    ocp.validate(theta)?;
    Ok(ocp)
}

/// `H_l = I`, nominal bounds, everything else zero.
pub fn evaporation_naive_theta(plant: &EvaporationPlant) -> ThetaVector {
    let mut t = ThetaVector::zeros(evaporation_layout());
    t.set_matrix("H_l", &DMatrix::identity(4, 4)).unwrap();
    t.set_matrix("H_Vf", &DMatrix::identity(2, 2)).unwrap();
    t.set_raw("x_lb", &plant.x_lb).unwrap();
    t.set_raw("x_ub", &plant.x_ub).unwrap();
    t
}

/// Economic stage cost of the nominal model (no penalties).
fn nominal_economic_cost(plant: &EvaporationPlant, z: &[f64; 4]) -> f64 {
    let al = crate::plants::evaporation_algebra(z[0], z[1], z[2], z[3], &plant.nominal, &plant.ode.constants)
        .map(|al| crate::plants::economic_cost(&al, &plant.nominal, z[3]));
    al.unwrap_or(f64::NAN)
}

/// Nominal economic tuning: `l_θ` is the second-order expansion of the
/// steady-state Lagrangian `ℓ(z) + pᵀ(F(z) − x)` at the reference, with the
/// Hessian lifted to `eig ≥ floor·max eig`, and constants set to the
/// steady-state cost so `V_θ` starts near the discounted economic cost.
/// `V^f_θ` is the Riccati matrix of the linearized model for that Hessian.
pub fn evaporation_nominal_theta(
    plant: &EvaporationPlant,
    scheme: &EvaporationScheme,
    floor: f64,
) -> Result<ThetaVector> {
    let z0 = [scheme.x_ref[0], scheme.x_ref[1], scheme.u_ref[0], scheme.u_ref[1]];
    let cost = |z: &[f64; 4]| nominal_economic_cost(plant, z);
    let grad = |z: &[f64; 4]| -> [f64; 4] {
        let mut g = [0.0; 4];
        for i in 0..4 {
            let h = 1e-4 * (1.0 + z[i].abs());
            let (mut zp, mut zm) = (*z, *z);
            zp[i] += h;
            zm[i] -= h;
            g[i] = (cost(&zp) - cost(&zm)) / (2.0 * h);
        }
        g
    };
    let model = &scheme.model;
    let xr = scheme.x_ref.clone();
    let ur = scheme.u_ref.clone();
    let (_, a, b) = model.linearize(&xr, &ur);
    // Dynamics multipliers from stationarity in u: ∇_uℓ + Bᵀp = 0.
    let g0 = grad(&z0);
    let gu = DVector::from_column_slice(&g0[2..]);
    let p = b
        .transpose()
        .clone()
        .lu()
        .solve(&(-gu))
        .ok_or_else(|| Error::Singular("input Jacobian of the steady state is singular".to_string()))?;
    let lag = |z: &[f64; 4]| -> f64 {
        let x = DVector::from_column_slice(&z[..2]);
        let u = DVector::from_column_slice(&z[2..]);
        cost(z) + p.dot(&(model.eval(&x, &u) - &x))
    };
    let mut h = DMatrix::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            let (hi, hj) = (1e-3 * (1.0 + z0[i].abs()), 1e-3 * (1.0 + z0[j].abs()));
            let mut zs = [z0; 4];
            zs[0][i] += hi;
            zs[0][j] += hj;
            zs[1][i] += hi;
            zs[1][j] -= hj;
            zs[2][i] -= hi;
            zs[2][j] += hj;
            zs[3][i] -= hi;
            zs[3][j] -= hj;
            h[(i, j)] = (lag(&zs[0]) - lag(&zs[1]) - lag(&zs[2]) + lag(&zs[3])) / (4.0 * hi * hj);
        }
    }
    let h = crate::linalg::symmetrize(&h);
    let top = crate::linalg::eigenvalues(&h).iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    let h = crate::linalg::clamp_eigenvalues(&h, floor * top).unwrap_or(h);

    let mut prob =
        LqrProblem::new(a, b, h.view((0, 0), (2, 2)).into_owned(), h.view((2, 2), (2, 2)).into_owned(), scheme.gamma);
    prob.n = h.view((0, 2), (2, 2)).into_owned();
    let sol = lqr::solve_discounted_dare(&prob)?;
    let l_ss = cost(&z0);

    let mut t = ThetaVector::zeros(evaporation_layout());
    t.set_matrix("H_l", &h)?;
    t.set_scalar("c_l", l_ss)?;
    t.set_matrix("H_Vf", &sol.s)?;
    t.set_scalar("c_Vf", l_ss / (1.0 - scheme.gamma))?;
    t.set_raw("x_lb", &plant.x_lb)?;
    t.set_raw("x_ub", &plant.x_ub)?;
    Ok(t)
}
