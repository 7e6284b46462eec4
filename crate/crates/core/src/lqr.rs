//! Discounted linear-quadratic ground truth.
//!
//! Conventions: stage cost `[s;a]ᵀ[[T, N],[Nᵀ, R]][s;a]`, value `sᵀSs + V0`,
//! policy `a = −K s`, with `S`, `K` solving
//!
//! ```text
//! T + γAᵀSA = S + (N + γAᵀSB) K
//! (R + γBᵀSB) K = Nᵀ + γBᵀSA
//! ```

use core::fmt;

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::linalg::{self, spectral_radius, symmetrize};
use crate::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct LqrProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: f64,
}

impl LqrProblem {
    /// Problem with `N = 0` and `Σ = 0`.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, t: DMatrix<f64>, r: DMatrix<f64>, gamma: f64) -> Self {
        let (nx, nu) = (a.nrows(), b.ncols());
        Self { a, b, t, n: DMatrix::zeros(nx, nu), r, sigma: DMatrix::zeros(nx, nx), gamma }
    }

    pub fn scalar(a: f64, b: f64, t: f64, n: f64, r: f64, gamma: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self { a: m(a), b: m(b), t: m(t), n: m(n), r: m(r), sigma: m(0.0), gamma }
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu) = (self.nx(), self.nu());
        let shapes = [
            (self.a.shape(), (nx, nx), "A"),
            (self.b.shape(), (nx, nu), "B"),
            (self.t.shape(), (nx, nx), "T"),
            (self.n.shape(), (nx, nu), "N"),
            (self.r.shape(), (nu, nu), "R"),
            (self.sigma.shape(), (nx, nx), "Sigma"),
        ];
        for (got, want, name) in shapes {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Contract(format!("discount {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Stage-cost matrix `W = [[T, N],[Nᵀ, R]]`.
    pub fn stage_matrix(&self) -> DMatrix<f64> {
        stage_matrix(&self.t, &self.n, &self.r)
    }
}

pub fn stage_matrix(t: &DMatrix<f64>, n: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (nx, nu) = n.shape();
    let mut w = DMatrix::zeros(nx + nu, nx + nu);
    w.view_mut((0, 0), (nx, nx)).copy_from(t);
    w.view_mut((0, nx), (nx, nu)).copy_from(n);
    w.view_mut((nx, 0), (nu, nx)).copy_from(&n.transpose());
    w.view_mut((nx, nx), (nu, nu)).copy_from(r);
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub s: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `γ/(1−γ)·tr(SΣ)`; `+∞` for `γ = 1` with `Σ ≠ 0`.
    pub v0: f64,
    /// Spectral radius of `√γ(A − BK)`.
    pub rho: f64,
}

impl LqrSolution {
    /// `Q(s,a) = [s;a]ᵀ H [s;a] + V0`.
    pub fn action_value_matrix(&self, prob: &LqrProblem) -> DMatrix<f64> {
        action_value_matrix(prob, &self.s)
    }
}

pub fn action_value_matrix(prob: &LqrProblem, s: &DMatrix<f64>) -> DMatrix<f64> {
    let g = prob.gamma;
    let t = &prob.t + prob.a.transpose() * s * &prob.a * g;
    let n = &prob.n + prob.a.transpose() * s * &prob.b * g;
    let r = &prob.r + prob.b.transpose() * s * &prob.b * g;
    symmetrize(&stage_matrix(&t, &n, &r))
}

/// Gain minimizing the action-value form for a given `S`.
pub fn gain_for(prob: &LqrProblem, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = prob.gamma;
    let lhs = &prob.r + prob.b.transpose() * s * &prob.b * g;
    let rhs = prob.n.transpose() + prob.b.transpose() * s * &prob.a * g;
    lhs.lu().solve(&rhs).ok_or_else(|| Error::Singular("R + γBᵀSB is singular".to_string()))
}

/// Residual infinity norms of both Riccati equations.
pub fn dare_residuals(prob: &LqrProblem, s: &DMatrix<f64>, k: &DMatrix<f64>) -> (f64, f64) {
    let g = prob.gamma;
    let (a, b) = (&prob.a, &prob.b);
    let ra = &prob.t + a.transpose() * s * a * g - s - (&prob.n + a.transpose() * s * b * g) * k;
    let rb = (&prob.r + b.transpose() * s * b * g) * k - prob.n.transpose() - b.transpose() * s * a * g;
    (ra.amax(), rb.amax())
}

fn closed_loop(prob: &LqrProblem, k: &DMatrix<f64>) -> DMatrix<f64> {
    (&prob.a - &prob.b * k) * prob.gamma.sqrt()
}

fn v0(prob: &LqrProblem, s: &DMatrix<f64>) -> f64 {
    let tr = (s * &prob.sigma).trace();
    if prob.gamma < 1.0 {
        prob.gamma / (1.0 - prob.gamma) * tr
    } else if prob.sigma.amax() == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Reduction to an undiscounted, cross-term-free DARE: the input shift
/// `u = v − R⁻¹Nᵀs` removes `N`, the `√γ` scaling removes `γ`.
struct Reduced {
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    q: DMatrix<f64>,
}

fn reduce(prob: &LqrProblem) -> Result<Reduced> {
    let rinv = prob.r.clone().try_inverse().ok_or_else(|| Error::Singular("R is singular".to_string()))?;
    let sg = prob.gamma.sqrt();
    let a = (&prob.a - &prob.b * &rinv * prob.n.transpose()) * sg;
    let b = &prob.b * sg;
    let q = symmetrize(&(&prob.t - &prob.n * &rinv * prob.n.transpose()));
    let g = symmetrize(&(&b * &rinv * b.transpose()));
    Ok(Reduced { a, g, q })
}

/// Structured doubling iteration; converges quadratically to the
/// stabilizing solution when one exists.
fn sda(red: &Reduced) -> Option<DMatrix<f64>> {
    let n = red.a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let (mut a, mut g, mut h) = (red.a.clone(), red.g.clone(), red.q.clone());
    for _ in 0..100 {
        let w = &id + &g * &h;
        let lu = w.lu();
        let wa = lu.solve(&a)?;
        let wg = lu.solve(&g)?;
        let a1 = &a * &wa;
        let g1 = symmetrize(&(&g + &a * &wg * a.transpose()));
        let h1 = symmetrize(&(&h + a.transpose() * &h * &wa));
        let delta = (&h1 - &h).amax();
        let scale = h1.amax().max(1.0);
        a = a1;
        g = g1;
        h = h1;
        if !h.iter().all(|v| v.is_finite()) {
            return None;
        }
        if delta <= 1e-15 * scale && a.amax() < 1e-8 {
            return Some(h);
        }
    }
    if a.amax() < 1e-6 {
        Some(h)
    } else {
        None
    }
}

/// Newton polishing step for an (approximate) solution: one Kleinman
/// iteration `S ← Stein(A_cl, [I;−K]ᵀW[I;−K])`.
fn kleinman(prob: &LqrProblem, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = gain_for(prob, s)?;
    let nx = prob.nx();
    let mut m = DMatrix::zeros(nx + prob.nu(), nx);
    m.view_mut((0, 0), (nx, nx)).fill_with_identity();
    m.view_mut((nx, 0), (prob.nu(), nx)).copy_from(&(-&k));
    let q = m.transpose() * prob.stage_matrix() * &m;
    linalg::stein_solve(&(&prob.a - &prob.b * &k), &q, prob.gamma)
}

/// Stabilizing solution of the discounted DARE.
pub fn solve_discounted_dare(prob: &LqrProblem) -> Result<LqrSolution> {
    prob.validate()?;
    let red = reduce(prob)?;
    let mut candidate = sda(&red);
    if candidate.is_none() && prob.nx() <= 3 {
        candidate = dare_solution_branches_reduced(prob)?.into_iter().find(|b| b.stabilizing).map(|b| b.s);
    }
    let Some(mut s) = candidate else {
        return Err(Error::NoStabilizingSolution { closest: closest_eigenvalue(&red) });
    };
    // Two polishing steps bring the residual to rounding level.
    for _ in 0..2 {
        if let Ok(next) = kleinman(prob, &s) {
            if next.iter().all(|v| v.is_finite()) {
                s = next;
            }
        }
    }
    let s = symmetrize(&s);
    let k = gain_for(prob, &s)?;
    let rho = spectral_radius(&closed_loop(prob, &k));
    if rho >= 1.0 {
        return Err(Error::NoStabilizingSolution { closest: rho });
    }
    let v0 = v0(prob, &s);
    Ok(LqrSolution { s, k, v0, rho })
}

/// Modulus of the eigenvalue of the symplectic matrix closest to the unit
/// circle (diagnostic for failed solves).
fn closest_eigenvalue(red: &Reduced) -> f64 {
    match symplectic(red) {
        Some(z) => linalg::eigenvalues(&z)
            .iter()
            .map(|l| l.re.hypot(l.im))
            .min_by(|x, y| (x - 1.0).abs().total_cmp(&(y - 1.0).abs()))
            .unwrap_or(f64::NAN),
        None => f64::NAN,
    }
}

/// `Z = [[A + G A⁻ᵀ Q, −G A⁻ᵀ], [−A⁻ᵀ Q, A⁻ᵀ]]`.
fn symplectic(red: &Reduced) -> Option<DMatrix<f64>> {
    let n = red.a.nrows();
    let ait = red.a.transpose().try_inverse()?;
    let mut z = DMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&(&red.a + &red.g * &ait * &red.q));
    z.view_mut((0, n), (n, n)).copy_from(&(-&red.g * &ait));
    z.view_mut((n, 0), (n, n)).copy_from(&(-&ait * &red.q));
    z.view_mut((n, n), (n, n)).copy_from(&ait);
    Some(z)
}

/// One real symmetric solution of a DARE.
#[derive(Debug, Clone, PartialEq)]
pub struct DareBranch {
    pub s: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Spectral radius of `√γ(A − BK)`.
    pub rho: f64,
    pub stabilizing: bool,
    pub residual: f64,
}

/// All real symmetric solutions of the DARE with model `(Â, B̂)` and weights
/// `(T̂, N̂, R̂)`, from invariant subspaces of the symplectic matrix.
pub fn dare_solution_branches(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t: &DMatrix<f64>,
    n: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
) -> Result<Vec<DareBranch>> {
    let prob = LqrProblem {
        a: a.clone(),
        b: b.clone(),
        t: t.clone(),
        n: n.clone(),
        r: r.clone(),
        sigma: DMatrix::zeros(a.nrows(), a.nrows()),
        gamma,
    };
    prob.validate()?;
    dare_solution_branches_reduced(&prob)
}

fn dare_solution_branches_reduced(prob: &LqrProblem) -> Result<Vec<DareBranch>> {
    let nx = prob.nx();
    if nx > 3 {
        return Err(Error::Unsupported(format!("branch enumeration needs n <= 3, got {nx}")));
    }
    let red = reduce(prob)?;
    let z = symplectic(&red).ok_or_else(|| Error::Unsupported("singular reduced state matrix".to_string()))?;
    let eig = linalg::eigenvalues(&z);
    let zc: DMatrix<Complex<f64>> = z.map(|v| Complex::new(v, 0.0));
    let scale = z.amax().max(1.0);
    let mut vecs = Vec::with_capacity(eig.len());
    for &l in &eig {
        let m = &zc - DMatrix::<Complex<f64>>::identity(2 * nx, 2 * nx) * l;
        let svd = m.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let (imin, smin) =
            svd.singular_values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
        if smin > 1e-8 * scale {
            return Err(Error::Singular(format!("eigenvector extraction failed (σ_min = {smin:e})")));
        }
        let v: Vec<Complex<f64>> = (0..2 * nx).map(|j| vt[(imin, j)].conj()).collect();
        vecs.push(v);
    }
    let mut out: Vec<DareBranch> = Vec::new();
    let total = eig.len();
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != nx {
            continue;
        }
        let idx: Vec<usize> = (0..total).filter(|i| mask & (1 << i) != 0).collect();
        let mut u = DMatrix::<Complex<f64>>::zeros(nx, nx);
        let mut v = DMatrix::<Complex<f64>>::zeros(nx, nx);
        for (c, &i) in idx.iter().enumerate() {
            for r in 0..nx {
                u[(r, c)] = vecs[i][r];
                v[(r, c)] = vecs[i][nx + r];
            }
        }
        let Some(uinv) = u.try_inverse() else { continue };
        let x = v * uinv;
        if x.iter().any(|c| c.im.abs() > 1e-8 * (1.0 + c.re.abs())) {
            continue;
        }
        let xr = symmetrize(&x.map(|c| c.re));
        if (&xr - x.map(|c| c.re)).amax() > 1e-8 * xr.amax().max(1.0) {
            continue;
        }
        // The reduced DARE shares its solution with the original one.
        let Ok(k) = gain_for(prob, &xr) else { continue };
        let (ra, rb) = dare_residuals(prob, &xr, &k);
        let residual = ra.max(rb);
        if !(residual <= 1e-8 * xr.amax().max(1.0)) {
            continue;
        }
        if out.iter().any(|o| (&o.s - &xr).amax() <= 1e-9 * xr.amax().max(1.0)) {
            continue;
        }
        let rho = spectral_radius(&closed_loop(prob, &k));
        out.push(DareBranch { s: xr, k, rho, stabilizing: rho < 1.0, residual });
    }
    out.sort_by(|x, y| x.s.trace().total_cmp(&y.s.trace()));
    Ok(out)
}

/// `(T̂, N̂, R̂)` such that the model `(Â, B̂)` with these weights has the
/// true action-value function: `T̂ = T + γAᵀSA − γÂᵀSÂ` and likewise.
pub fn modified_cost_matrices(
    prob: &LqrProblem,
    model_a: &DMatrix<f64>,
    model_b: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if model_a.shape() != prob.a.shape() || model_b.shape() != prob.b.shape() {
        return Err(Error::Shape("model matrices do not match the problem".to_string()));
    }
    let g = prob.gamma;
    let (a, b) = (&prob.a, &prob.b);
    let t = &prob.t + (a.transpose() * s * a - model_a.transpose() * s * model_a) * g;
    let n = &prob.n + (a.transpose() * s * b - model_a.transpose() * s * model_b) * g;
    let r = &prob.r + (b.transpose() * s * b - model_b.transpose() * s * model_b) * g;
    Ok((symmetrize(&t), n, symmetrize(&r)))
}

/// Derivative of the stabilizing solution: solves
/// `dS − γA_clᵀ dS A_cl = [I;−K]ᵀ dW [I;−K] + γ(dA − dB K)ᵀ S A_cl + γA_clᵀ S (dA − dB K)`.
pub fn dare_sensitivity(
    prob: &LqrProblem,
    sol: &LqrSolution,
    da: &DMatrix<f64>,
    db: &DMatrix<f64>,
    dw: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (nx, nu) = (prob.nx(), prob.nu());
    let k = &sol.k;
    let acl = &prob.a - &prob.b * k;
    let mut m = DMatrix::zeros(nx + nu, nx);
    m.view_mut((0, 0), (nx, nx)).fill_with_identity();
    m.view_mut((nx, 0), (nu, nx)).copy_from(&(-k));
    let dcl = da - db * k;
    let cross = dcl.transpose() * &sol.s * &acl * prob.gamma;
    let rhs = m.transpose() * dw * &m + &cross + cross.transpose();
    linalg::stein_solve(&acl, &symmetrize(&rhs), prob.gamma)
}

/// Quadratic rotation matrices `(δW_L, δW_L⁰, δW_L¹)`.
pub fn rotation_matrices(
    dr: &DMatrix<f64>,
    ds: &DMatrix<f64>,
    model_a: &DMatrix<f64>,
    model_b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    gamma: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (nx, nu) = (model_a.nrows(), model_b.ncols());
    if dr.shape() != (nu, nu) || ds.shape() != (nx, nx) || k.shape() != (nu, nx) {
        return Err(Error::Shape("rotation inputs have inconsistent shapes".to_string()));
    }
    if linalg::min_eigenvalue(dr) < -1e-12 || (dr - dr.transpose()).amax() > 1e-12 {
        return Err(Error::Contract("δR must be symmetric positive semidefinite".to_string()));
    }
    let w0 = stage_matrix(&(k.transpose() * dr * k), &(k.transpose() * dr), dr);
    let t1 = model_a.transpose() * ds * model_a * gamma - ds;
    let n1 = model_a.transpose() * ds * model_b * gamma;
    let r1 = model_b.transpose() * ds * model_b * gamma;
    let w1 = -symmetrize(&stage_matrix(&t1, &n1, &r1));
    Ok((&w0 + &w1, symmetrize(&w0), w1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    /// `λ_min(W + δW_L)`.
    pub min_eig_rotated: f64,
    /// `λ_min(δW_L¹)`.
    pub min_eig_dissipation: f64,
    pub threshold: f64,
}

impl PositivityReport {
    pub fn rotated_positive(&self) -> bool {
        self.min_eig_rotated >= self.threshold
    }

    pub fn strictly_dissipative(&self) -> bool {
        self.min_eig_dissipation >= self.threshold
    }
}

impl fmt::Display for PositivityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "min_eig_rotated = {:e}", self.min_eig_rotated)?;
        writeln!(f, "min_eig_dissipation = {:e}", self.min_eig_dissipation)?;
        writeln!(f, "rotated_positive = {}", self.rotated_positive())?;
        writeln!(f, "strictly_dissipative = {}", self.strictly_dissipative())
    }
}

pub fn positivity_checks(w: &DMatrix<f64>, dw: &DMatrix<f64>, dw1: &DMatrix<f64>, threshold: f64) -> PositivityReport {
    PositivityReport {
        min_eig_rotated: linalg::min_eigenvalue(&(w + dw)),
        min_eig_dissipation: linalg::min_eigenvalue(dw1),
        threshold,
    }
}

/// Result of the scalar grid search for a positivity-enforcing rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSearch {
    pub ds: DMatrix<f64>,
    pub dr: DMatrix<f64>,
    pub report: PositivityReport,
}

/// Coarse-to-fine search over `δS = σ_s I`, `δR = σ_r I` maximizing
/// `λ_min(W + δW_L)`. Returns the best point found; check
/// `report.rotated_positive()` for success.
pub fn search_rotation(
    w: &DMatrix<f64>,
    model_a: &DMatrix<f64>,
    model_b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    gamma: f64,
    threshold: f64,
) -> Result<RotationSearch> {
    let (nx, nu) = (model_a.nrows(), model_b.ncols());
    let eval = |s: f64, r: f64| -> Result<f64> {
        let (dw, _, _) = rotation_matrices(
            &(DMatrix::identity(nu, nu) * r),
            &(DMatrix::identity(nx, nx) * s),
            model_a,
            model_b,
            k,
            gamma,
        )?;
        Ok(linalg::min_eigenvalue(&(w + dw)))
    };
    let span = 10.0 * w.amax().max(1.0);
    let (mut cs, mut cr, mut hs, mut hr) = (0.0, span / 2.0, span, span / 2.0);
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for _ in 0..40 {
        let steps = 20;
        for i in 0..=steps {
            for j in 0..=steps {
                let s = cs - hs + 2.0 * hs * i as f64 / steps as f64;
                let r = (cr - hr + 2.0 * hr * j as f64 / steps as f64).max(0.0);
                let v = eval(s, r)?;
                if v > best.0 {
                    best = (v, s, r);
                }
            }
        }
        cs = best.1;
        cr = best.2;
        hs *= 0.3;
        hr *= 0.3;
    }
    let ds = DMatrix::identity(nx, nx) * best.1;
    let dr = DMatrix::identity(nu, nu) * best.2;
    let (dw, _, dw1) = rotation_matrices(&dr, &ds, model_a, model_b, k, gamma)?;
    Ok(RotationSearch { report: positivity_checks(w, &dw, &dw1, threshold), ds, dr })
}

/// Text rendering of the scalar worked example used by the `lqr-demo`
/// command.
pub fn scalar_example_report() -> Result<String> {
    let prob = LqrProblem::scalar(1.0, 1.0, 1.0, 0.0, 2.0, 1.0);
    let sol = solve_discounted_dare(&prob)?;
    let m = |v| DMatrix::from_element(1, 1, v);
    let (ah, bh) = (m(2.0), m(1.0));
    let (t, n, r) = modified_cost_matrices(&prob, &ah, &bh, &sol.s)?;
    let branches = dare_solution_branches(&ah, &bh, &t, &n, &r, prob.gamma)?;
    let acl_star = ah[(0, 0)] - bh[(0, 0)] * sol.k[(0, 0)];
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line("problem = scalar discounted LQR".to_string());
    line(format!("A = {}", prob.a[(0, 0)]));
    line(format!("B = {}", prob.b[(0, 0)]));
    line(format!("T = {}", prob.t[(0, 0)]));
    line(format!("N = {}", prob.n[(0, 0)]));
    line(format!("R = {}", prob.r[(0, 0)]));
    line(format!("gamma = {}", prob.gamma));
    line(format!("S = {}", fmt_num(sol.s[(0, 0)])));
    line(format!("K = {}", fmt_num(sol.k[(0, 0)])));
    line(format!("model_A = {}", ah[(0, 0)]));
    line(format!("model_B = {}", bh[(0, 0)]));
    line(format!("T_hat = {}", fmt_num(t[(0, 0)])));
    line(format!("N_hat = {}", fmt_num(n[(0, 0)])));
    line(format!("R_hat = {}", fmt_num(r[(0, 0)])));
    line(format!("model_closed_loop_with_K = {}", fmt_num(acl_star)));
    line(format!("branches = {}", branches.len()));
    for (i, b) in branches.iter().enumerate() {
        line(format!(
            "branch {i}: S_hat = {} K_hat = {} rho = {} stabilizing = {}",
            fmt_num(b.s[(0, 0)]),
            fmt_num(b.k[(0, 0)]),
            fmt_num(b.rho),
            b.stabilizing
        ));
    }
    Ok(out)
}

/// Rounds to 10 decimals so golden output is stable across platforms.
fn fmt_num(v: f64) -> String {
    let r = (v * 1e10).round() / 1e10;
    if r == 0.0 {
        "0".to_string()
    } else {
        format!("{r}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn m(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn random_problem(nx: usize, nu: usize, gamma: f64, rng: &mut ChaCha8Rng) -> LqrProblem {
        let a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0));
        let lt = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0));
        let lr = DMatrix::from_fn(nu, nu, |_, _| rng.random_range(-1.0..1.0));
        let t = &lt * lt.transpose() + DMatrix::identity(nx, nx) * 0.1;
        let r = &lr * lr.transpose() + DMatrix::identity(nu, nu) * 0.5;
        let n = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-0.1..0.1));
        LqrProblem { a, b, t, n, r, sigma: DMatrix::zeros(nx, nx), gamma }
    }

    #[test]
    fn golden_scalar_example() {
        let prob = LqrProblem::scalar(1.0, 1.0, 1.0, 0.0, 2.0, 1.0);
        let sol = solve_discounted_dare(&prob).unwrap();
        assert!((sol.s[(0, 0)] - 2.0).abs() <= 1e-12);
        assert!((sol.k[(0, 0)] - 0.5).abs() <= 1e-12);
        let (t, n, r) = modified_cost_matrices(&prob, &m(2.0), &m(1.0), &sol.s).unwrap();
        assert!((t[(0, 0)] + 5.0).abs() <= 1e-12);
        assert!((n[(0, 0)] + 2.0).abs() <= 1e-12);
        assert!((r[(0, 0)] - 2.0).abs() <= 1e-12);
        let br = dare_solution_branches(&m(2.0), &m(1.0), &t, &n, &r, 1.0).unwrap();
        assert_eq!(br.len(), 2);
        assert!((br[0].s[(0, 0)] - 2.0).abs() <= 1e-10);
        assert!((br[0].k[(0, 0)] - 0.5).abs() <= 1e-10);
        assert!((br[0].rho - 1.5).abs() <= 1e-10);
        assert!(!br[0].stabilizing);
        assert!((br[1].s[(0, 0)] - 7.0).abs() <= 1e-10);
        assert!((br[1].k[(0, 0)] - 4.0 / 3.0).abs() <= 1e-10);
        assert!((br[1].rho - 2.0 / 3.0).abs() <= 1e-10);
        assert!(br[1].stabilizing);
    }

    #[test]
    fn no_control_authority_is_lyapunov() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let prob = LqrProblem::new(a.clone(), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), m(1.0), 1.0);
        let sol = solve_discounted_dare(&prob).unwrap();
        assert!(sol.k.amax() < 1e-14);
        let r = DMatrix::identity(2, 2) + a.transpose() * &sol.s * &a - &sol.s;
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn random_problem_residual_and_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prob = random_problem(3, 2, 0.9, &mut rng);
        let sol = solve_discounted_dare(&prob).unwrap();
        let (ra, rb) = dare_residuals(&prob, &sol.s, &sol.k);
        assert!(ra <= 1e-10 && rb <= 1e-10, "{ra} {rb}");
        let w = prob.stage_matrix();
        let s0 = nalgebra::DVector::from_vec(vec![1.0, -0.5, 0.3]);
        let mut s = s0.clone();
        let (mut total, mut disc) = (0.0, 1.0);
        for _ in 0..10_000 {
            let a = -&sol.k * &s;
            let z = nalgebra::DVector::from_iterator(5, s.iter().chain(a.iter()).copied());
            total += disc * (z.transpose() * &w * &z)[(0, 0)];
            disc *= prob.gamma;
            s = &prob.a * &s + &prob.b * &a;
        }
        let exact = (s0.transpose() * &sol.s * &s0)[(0, 0)];
        assert!((total - exact).abs() <= 0.01 * exact.abs());
    }

    #[test]
    fn discount_equals_scaled_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let prob = random_problem(2, 1, 0.8, &mut rng);
            let a = solve_discounted_dare(&prob).unwrap();
            let sg = prob.gamma.sqrt();
            let scaled = LqrProblem { a: &prob.a * sg, b: &prob.b * sg, gamma: 1.0, ..prob.clone() };
            let b = solve_discounted_dare(&scaled).unwrap();
            assert!((&a.s - &b.s).amax() <= 1e-10);
        }
    }

    #[test]
    fn exact_model_keeps_weights_and_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prob = random_problem(2, 1, 0.9, &mut rng);
        let sol = solve_discounted_dare(&prob).unwrap();
        let (t, n, r) = modified_cost_matrices(&prob, &prob.a, &prob.b, &sol.s).unwrap();
        assert!((&t - &prob.t).amax() < 1e-12 && (&n - &prob.n).amax() < 1e-12 && (&r - &prob.r).amax() < 1e-12);
        let br = dare_solution_branches(&prob.a, &prob.b, &t, &n, &r, prob.gamma).unwrap();
        let st: Vec<_> = br.iter().filter(|b| b.stabilizing).collect();
        assert_eq!(st.len(), 1);
        assert!((&st[0].s - &sol.s).amax() < 1e-9);
    }

    #[test]
    fn modified_weights_reproduce_true_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let prob = random_problem(2, 1, 0.9, &mut rng);
            let sol = solve_discounted_dare(&prob).unwrap();
            let ah = &prob.a + DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.2..0.2));
            let bh = &prob.b + DMatrix::from_fn(2, 1, |_, _| rng.random_range(-0.2..0.2));
            let (t, n, r) = modified_cost_matrices(&prob, &ah, &bh, &sol.s).unwrap();
            let model = LqrProblem { a: ah, b: bh, t, n, r, ..prob.clone() };
            let (ra, rb) = dare_residuals(&model, &sol.s, &sol.k);
            assert!(ra <= 1e-10 && rb <= 1e-10);
        }
    }

    #[test]
    fn random_scalar_branches_satisfy_dare() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (a, b) = (rng.random_range(0.5..2.0), rng.random_range(0.2..1.5));
            let (t, r) = (rng.random_range(-1.0..2.0), rng.random_range(0.5..2.0));
            let br = dare_solution_branches(&m(a), &m(b), &m(t), &m(0.0), &m(r), 0.95).unwrap();
            for x in &br {
                let p = LqrProblem::scalar(a, b, t, 0.0, r, 0.95);
                let (ra, rb) = dare_residuals(&p, &x.s, &x.k);
                assert!(ra <= 1e-10 && rb <= 1e-10);
            }
        }
    }

    #[test]
    fn branch_enumeration_rejects_large_systems() {
        let z = DMatrix::identity(4, 4);
        let e = dare_solution_branches(&z, &DMatrix::identity(4, 1), &z, &DMatrix::zeros(4, 1), &m(1.0), 1.0);
        assert!(matches!(e, Err(Error::Unsupported(_))));
    }

    #[test]
    fn unstabilizable_problem_fails() {
        // Unstable mode without control authority.
        let prob = LqrProblem::new(m(2.0), m(0.0), m(1.0), m(1.0), 1.0);
        assert!(matches!(solve_discounted_dare(&prob), Err(Error::NoStabilizingSolution { .. })));
    }

    #[test]
    fn v0_formula_and_undiscounted_warning() {
        let mut prob = LqrProblem::scalar(0.9, 1.0, 1.0, 0.0, 1.0, 0.9);
        prob.sigma = m(0.04);
        let sol = solve_discounted_dare(&prob).unwrap();
        assert!((sol.v0 - 9.0 * sol.s[(0, 0)] * 0.04).abs() < 1e-12);
        prob.gamma = 1.0;
        assert_eq!(solve_discounted_dare(&prob).unwrap().v0, f64::INFINITY);
    }

    #[test]
    fn v0_matches_monte_carlo() {
        let mut prob = LqrProblem::scalar(0.8, 1.0, 1.0, 0.0, 1.0, 0.9);
        prob.sigma = m(0.25);
        let sol = solve_discounted_dare(&prob).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Discounted cost from s = 0 averaged over independent restarts.
        let (runs, len) = (1000, 100);
        let mut acc = 0.0;
        for _ in 0..runs {
            let (mut s, mut disc, mut tot) = (0.0f64, 1.0, 0.0);
            for _ in 0..len {
                let a = -sol.k[(0, 0)] * s;
                tot += disc * (s * s + a * a);
                disc *= 0.9;
                let e: f64 = StandardNormal.sample(&mut rng);
                s = 0.8 * s + a + 0.5 * e;
            }
            acc += tot;
        }
        let mc = acc / runs as f64;
        assert!((mc - sol.v0).abs() <= 0.05 * sol.v0, "{mc} vs {}", sol.v0);
    }

    #[test]
    fn rotation_matrix_cases() {
        let (a, b, k) = (m(2.0), m(1.0), m(0.5));
        let (w, w0, w1) = rotation_matrices(&m(0.0), &m(0.0), &a, &b, &k, 1.0).unwrap();
        assert_eq!(w.amax() + w0.amax() + w1.amax(), 0.0);
        assert!(rotation_matrices(&m(-1.0), &m(0.0), &a, &b, &k, 1.0).is_err());
        // δR = 0: Λ(s,a) = sᵀδS s, so E[Λ(s⁺)] − Λ(s) is the whole form.
        let ds = m(0.7);
        let (dw, _, _) = rotation_matrices(&m(0.0), &ds, &a, &b, &k, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (s, u): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let z = nalgebra::DVector::from_vec(vec![s, u]);
            let q = (z.transpose() * &dw * &z)[(0, 0)];
            let sp = 2.0 * s + u;
            assert!((q - (0.7 * s * s - 0.9 * 0.7 * sp * sp)).abs() < 1e-12);
        }
        // δR = I: Λ⁰(s,a) = (a + K s)ᵀ δR (a + K s).
        let (_, w0, _) = rotation_matrices(&m(1.0), &m(0.0), &a, &b, &k, 1.0).unwrap();
        for _ in 0..20 {
            let (s, u): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let z = nalgebra::DVector::from_vec(vec![s, u]);
            let q = (z.transpose() * &w0 * &z)[(0, 0)];
            assert!((q - (u + 0.5 * s).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_without_rotation_fails_checks() {
        let w = stage_matrix(&m(-1.0), &m(0.0), &m(1.0));
        let z = m(0.0);
        let (dw, _, dw1) = rotation_matrices(&z, &z, &m(0.5), &m(1.0), &m(0.1), 1.0).unwrap();
        let rep = positivity_checks(&w, &dw, &dw1, 1e-6);
        assert!(!rep.rotated_positive() && !rep.strictly_dissipative());
    }

    /// An economic problem built by un-rotating a PD one: its optimal gain is
    /// the PD problem's gain, and the grid search recovers a certificate.
    #[test]
    fn grid_search_finds_positive_rotation() {
        let (a, b, gamma) =
            (DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.0, 0.8]), DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), 0.95);
        let wpd = stage_matrix(&DMatrix::identity(2, 2), &DMatrix::zeros(2, 1), &m(1.0));
        let pd = LqrProblem::new(a.clone(), b.clone(), DMatrix::identity(2, 2), m(1.0), gamma);
        let kpd = solve_discounted_dare(&pd).unwrap().k;
        let (dw, _, _) = rotation_matrices(&m(0.5), &(DMatrix::identity(2, 2) * 3.0), &a, &b, &kpd, gamma).unwrap();
        let w = &wpd - &dw;
        assert!(linalg::min_eigenvalue(&w) < 0.0);
        let econ = LqrProblem {
            a: a.clone(),
            b: b.clone(),
            t: w.view((0, 0), (2, 2)).into(),
            n: w.view((0, 2), (2, 1)).into(),
            r: w.view((2, 2), (1, 1)).into(),
            sigma: DMatrix::zeros(2, 2),
            gamma,
        };
        let sol = solve_discounted_dare(&econ).unwrap();
        assert!((&sol.k - &kpd).amax() < 1e-9);
        let found = search_rotation(&w, &a, &b, &sol.k, gamma, 1e-6).unwrap();
        assert!(found.report.rotated_positive(), "{}", found.report);
        // The rotated stage cost yields the same optimal gain.
        let (dw, _, _) = rotation_matrices(&found.dr, &found.ds, &a, &b, &sol.k, gamma).unwrap();
        let rotated = rotated_problem(&econ, &(&w + &dw));
        let rsol = solve_discounted_dare(&rotated).unwrap();
        assert!((&rsol.k - &sol.k).amax() < 1e-9);
        assert!((&rsol.s - (&sol.s + &found.ds)).amax() < 1e-8);
    }

    fn rotated_problem(p: &LqrProblem, w: &DMatrix<f64>) -> LqrProblem {
        let (nx, nu) = (p.nx(), p.nu());
        LqrProblem {
            t: w.view((0, 0), (nx, nx)).into(),
            n: w.view((0, nx), (nx, nu)).into(),
            r: w.view((nx, nx), (nu, nu)).into(),
            ..p.clone()
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            /// Rotating the stage cost by an admissible (δR ⪰ 0, δS) keeps the
            /// optimal gain whenever the rotated cost is positive definite.
            #[test]
            fn rotation_preserves_gain(seed in 0u64..10_000, dr in 0.0f64..2.0, ds in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let prob = random_problem(2, 1, 0.9, &mut rng);
                let sol = solve_discounted_dare(&prob).unwrap();
                let (dw, _, _) = rotation_matrices(&m(dr), &(DMatrix::identity(2, 2) * ds), &prob.a, &prob.b, &sol.k, prob.gamma).unwrap();
                let w = prob.stage_matrix() + dw;
                prop_assume!(linalg::min_eigenvalue(&w) > 1e-6);
                let rsol = solve_discounted_dare(&rotated_problem(&prob, &w)).unwrap();
                prop_assert!((&rsol.k - &sol.k).amax() < 1e-8);
            }

            /// With the stabilizing branch, (Ŝ, K̂) = (S, K★) solves the model DARE.
            #[test]
            fn modified_weights_keep_solution(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let prob = random_problem(2, 1, 0.95, &mut rng);
                let sol = solve_discounted_dare(&prob).unwrap();
                let ah = &prob.a + DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.3..0.3));
                let bh = &prob.b + DMatrix::from_fn(2, 1, |_, _| rng.random_range(-0.3..0.3));
                let (t, n, r) = modified_cost_matrices(&prob, &ah, &bh, &sol.s).unwrap();
                let model = LqrProblem { a: ah, b: bh, t, n, r, ..prob.clone() };
                let (ra, rb) = dare_residuals(&model, &sol.s, &sol.k);
                prop_assert!(ra <= 1e-10 * sol.s.amax().max(1.0) && rb <= 1e-10 * sol.s.amax().max(1.0));
            }
        }
    }

    #[test]
    fn dissipation_lower_bound() {
        let (a, b, k) = (m(0.5), m(1.0), m(0.2));
        let w = stage_matrix(&m(1.0), &m(0.0), &m(1.0));
        let (dw, _, dw1) = rotation_matrices(&m(0.0), &m(1.0), &a, &b, &k, 1.0).unwrap();
        let rep = positivity_checks(&w, &dw, &dw1, 1e-6);
        let rho = rep.min_eig_dissipation;
        if rep.strictly_dissipative() {
            let h = &w + &dw;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..20 {
                let s: f64 = rng.random_range(-3.0..3.0);
                let z = nalgebra::DVector::from_vec(vec![s, -0.2 * s]);
                let l = (z.transpose() * &h * &z)[(0, 0)];
                assert!(l >= rho * s * s - 1e-12);
            }
        }
    }

    #[test]
    fn sensitivity_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prob = random_problem(2, 1, 0.9, &mut rng);
        let sol = solve_discounted_dare(&prob).unwrap();
        let da = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let db = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
        let dwr = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let dw = symmetrize(&dwr);
        let ds = dare_sensitivity(&prob, &sol, &da, &db, &dw).unwrap();
        let h = 1e-6;
        let shift = |e: f64| {
            let w = prob.stage_matrix() + &dw * e;
            let p = LqrProblem {
                a: &prob.a + &da * e,
                b: &prob.b + &db * e,
                t: w.view((0, 0), (2, 2)).into(),
                n: w.view((0, 2), (2, 1)).into(),
                r: w.view((2, 2), (1, 1)).into(),
                ..prob.clone()
            };
            solve_discounted_dare(&p).unwrap().s
        };
        let fd = (shift(h) - shift(-h)) / (2.0 * h);
        assert!((&fd - &ds).amax() <= 1e-6 * ds.amax().max(1.0));
    }

    #[test]
    fn demo_report_lists_both_branches() {
        let rep = scalar_example_report().unwrap();
        assert!(rep.contains("S = 2\n"));
        assert!(rep.contains("branch 1: S_hat = 7 K_hat = 1.3333333333 rho = 0.6666666667 stabilizing = true"));
    }
}
