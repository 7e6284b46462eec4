use enmpc_core::lqr::{solve_discounted_dare, LqrProblem};
use enmpc_core::plants::{LinearPlant, Plant, PlantStep};
use enmpc_core::rl::*;
use enmpc_core::schemes::*;
use enmpc_core::sensitivity::grad_q;
use enmpc_core::theta::{SliceKind, ThetaLayout, EPS_PD};
use enmpc_core::{Result, Solver, SolverOptions, ThetaVector};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Deterministic plant equal to an LQ model, cost `zᵀWz`.
struct LqPlant(LqrProblem);

impl Plant for LqPlant {
    fn nx(&self) -> usize {
        self.0.nx()
    }
    fn nu(&self) -> usize {
        self.0.nu()
    }
    fn disturbance(&self, _k: usize) -> Vec<f64> {
        Vec::new()
    }
    fn apply(&self, _k: usize, s: &DVector<f64>, a: &DVector<f64>, _d: &[f64]) -> Result<PlantStep> {
        let mut z = DVector::zeros(s.len() + a.len());
        z.rows_mut(0, s.len()).copy_from(s);
        z.rows_mut(s.len(), a.len()).copy_from(a);
        let cost = z.dot(&(self.0.stage_matrix() * &z));
        Ok(PlantStep { next: &self.0.a * s + &self.0.b * a, cost, disturbance: Vec::new() })
    }
}

fn scalar_lq() -> LqrProblem {
    LqrProblem::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 2.0),
        0.9,
    )
}

fn two_state_lq() -> LqrProblem {
    LqrProblem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.03, 0.25]),
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 0.5),
        0.9,
    )
}

#[test]
fn td_error_matches_hand_arithmetic() {
    // Scalar LQ, horizon 1: Q(s,a) = s² + 2a² + γS(s + a)², V(s') = Ss'².
    let prob = scalar_lq();
    let (ocp, theta) = build_lq_ocp(&prob, 1, 1e3).unwrap();
    // S = 1 + 2γS/(2 + γS), i.e. γS² + (2 − 3γ)S − 2 = 0.
    let g = 0.9;
    let (qa, qb, qc): (f64, f64, f64) = (g, 2.0 - 3.0 * g, -2.0);
    let big_s = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
    let (s, a, sn, cost) = (0.7, -0.3, 0.45, 1.25);
    let tr = Transition { step: 0, s: v(&[s]), a: v(&[a]), cost, s_next: v(&[sn]), explored: false };
    let q = s * s + 2.0 * a * a + g * big_s * (s + a) * (s + a);
    let vn = big_s * sn * sn;
    let mut solver = Solver::default();
    let td = td_error(&tr, &ocp, &theta, TdCost::Plant, &mut solver).unwrap();
    assert!((td.q - q).abs() <= 1e-7 * q, "{} vs {q}", td.q);
    assert!((td.tau - (cost + g * vn - q)).abs() <= 1e-7, "{} vs {}", td.tau, cost + g * vn - q);
    let td = td_error(&tr, &ocp, &theta, TdCost::Model, &mut solver).unwrap();
    let l = s * s + 2.0 * a * a;
    assert!((td.cost - l).abs() <= 1e-12);
    assert!((td.tau - (l + g * vn - q)).abs() <= 1e-7);
}

#[test]
fn model_td_cost_carries_the_violation_penalty() {
    let theta = linear_mpc_initial_theta();
    let ocp = build_linear_mpc(&theta, &LinearMpcOptions::default()).unwrap();
    let mut solver = Solver::default();
    let (a, sn) = (v(&[0.4]), v(&[0.1, 0.2]));
    let inside =
        Transition { step: 0, s: v(&[0.1, 0.3]), a: a.clone(), cost: 0.0, s_next: sn.clone(), explored: false };
    let outside = Transition { s: v(&[-0.2, 0.3]), ..inside.clone() };
    let ti = td_error(&inside, &ocp, &theta, TdCost::Model, &mut solver).unwrap();
    let to = td_error(&outside, &ocp, &theta, TdCost::Model, &mut solver).unwrap();
    let smooth = |s: &DVector<f64>| 0.5 * s.norm_squared() + 0.25 * a.norm_squared();
    assert!((ti.cost - smooth(&inside.s)).abs() <= 1e-12);
    assert!((to.cost - (smooth(&outside.s) + 100.0 * 0.2)).abs() <= 1e-12);
    assert!((to.tau - (to.cost + 0.9 * to.v_next - to.q)).abs() <= 1e-12);
}

#[test]
fn td_vanishes_on_a_bellman_consistent_scheme() {
    let prob = two_state_lq();
    let (ocp, theta) = build_lq_ocp(&prob, 5, 1e3).unwrap();
    let plant = LqPlant(prob);
    let config = LearnerConfig {
        alpha: 0.0,
        update: UpdateOptions { td_cost: TdCost::Plant, ..Default::default() },
        ..Default::default()
    };
    let tol = SolverOptions::default().tol;
    for td_cost in [TdCost::Plant, TdCost::Model] {
        let cfg = LearnerConfig { update: UpdateOptions { td_cost, ..config.update }, ..config.clone() };
        let mut learner =
            Learner::new(ocp.clone(), &plant, theta.clone(), v(&[0.8, -0.5]), cfg, SolverOptions::default()).unwrap();
        for _ in 0..30 {
            let rec = learner.step().unwrap();
            assert!(rec.tau.unwrap().abs() <= 10.0 * tol, "{:?}", rec.tau);
        }
    }
}

#[test]
fn zero_steps_leave_theta_bitwise_unchanged() {
    let theta = linear_mpc_initial_theta();
    let ocp = build_linear_mpc(&theta, &LinearMpcOptions::default()).unwrap();
    let (t, n, clipped, projected) = apply_step(&theta, &DVector::zeros(theta.len()), 1e-3, 1e3).unwrap();
    assert_eq!(t, theta);
    assert_eq!((n, clipped, projected), (0.0, false, false));
    let tr =
        Transition { step: 0, s: v(&[0.5, -0.1]), a: v(&[0.2]), cost: 3.0, s_next: v(&[0.4, 0.0]), explored: false };
    let mut solver = Solver::default();
    let u = q_step_on_policy(&ocp, &theta, &tr, 0.0, &UpdateOptions::default(), &mut solver).unwrap();
    assert!(u.tau != 0.0);
    assert_eq!(u.theta, theta);
}

#[test]
fn on_policy_step_replays_from_logged_quantities() {
    let theta = linear_mpc_initial_theta();
    let ocp = build_linear_mpc(&theta, &LinearMpcOptions::default()).unwrap();
    let plant = LinearPlant::new(42);
    let mut solver = Solver::default();
    let s = v(&[0.3, -0.2]);
    let a = solver.policy(&ocp.instantiate(&theta).unwrap(), &s).unwrap();
    let ps = plant.step(0, &s, &a).unwrap();
    let tr = Transition { step: 0, s: s.clone(), a: a.clone(), cost: ps.cost, s_next: ps.next, explored: false };
    let alpha = 1e-2;
    let opts = UpdateOptions { td_cost: TdCost::Plant, ..Default::default() };
    let u = q_step_on_policy(&ocp, &theta, &tr, alpha, &opts, &mut solver).unwrap();
    // Independent script: τ from the logged pieces, gradient from grad_q.
    let td = td_error(&tr, &ocp, &theta, TdCost::Plant, &mut solver).unwrap();
    let g = grad_q(&ocp, &theta, &s, &a, &mut solver).unwrap().gradient;
    let expected: Vec<f64> = theta.values().iter().zip(g.iter()).map(|(t, g)| t + alpha * (td.tau * g)).collect();
    assert_eq!(u.tau, td.tau);
    assert_eq!(u.theta.values(), &expected[..]);
}

#[test]
fn off_policy_step_with_equal_parameters_is_the_on_policy_step() {
    let theta = linear_mpc_initial_theta();
    let ocp = build_linear_mpc(&theta, &LinearMpcOptions::default()).unwrap();
    let tr =
        Transition { step: 3, s: v(&[0.9, 0.4]), a: v(&[-0.6]), cost: 1.1, s_next: v(&[1.0, 0.3]), explored: true };
    let mut solver = Solver::default();
    let on = q_step_on_policy(&ocp, &theta, &tr, 1e-3, &UpdateOptions::default(), &mut solver).unwrap();
    let off = q_step_off_policy(&ocp, &theta, &theta, &tr, 1e-3, &UpdateOptions::default(), &mut solver).unwrap();
    assert_eq!(on.theta, off.theta);
    assert_eq!(on.tau, off.tau);
}

#[test]
fn batch_learning_keeps_behavior_parameters_within_a_batch() {
    let theta = linear_mpc_initial_theta();
    let ocp = build_linear_mpc(&theta, &LinearMpcOptions::default()).unwrap();
    let plant = LinearPlant::new(7);
    let config =
        LearnerConfig { algorithm: Algorithm::Batch { period: 6 }, alpha: 1e-3, epsilon: 0.3, ..Default::default() };
    let mut learner =
        Learner::new(ocp, &plant, theta.clone(), v(&[0.5, 0.0]), config, SolverOptions::default()).unwrap();
    let start = learner.theta().clone();
    for k in 0..12 {
        let rec = learner.step().unwrap();
        if k == 5 || k == 11 {
            assert!(rec.swapped);
            assert_eq!(learner.theta(), learner.theta_learn());
        } else {
            assert!(!rec.swapped);
            if k < 5 {
                assert_eq!(learner.theta(), &start);
            }
            assert_ne!(learner.theta(), learner.theta_learn());
        }
    }
    assert_ne!(learner.theta(), &start);
}

#[test]
fn greedy_without_exploration_returns_the_optimal_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (lb, ub) = (v(&[-1.0]), v(&[1.0]));
    for _ in 0..1000 {
        let a = v(&[rng.random_range(-1.0..1.0)]);
        let (out, explored) = epsilon_greedy(&a, &lb, &ub, 0.0, 1.0, &mut rng);
        assert_eq!(out, a);
        assert!(!explored);
    }
}

#[test]
fn exploration_saturates_at_the_bounds() {
    let (lb, ub) = (v(&[100.0, 100.0]), v(&[400.0, 400.0]));
    let a = v(&[400.0, 400.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hits = 0;
    for _ in 0..2000 {
        let (out, explored) = epsilon_greedy(&a, &lb, &ub, 0.5, 1.0, &mut rng);
        if explored {
            for i in 0..2 {
                assert!(out[i] <= 400.0 && out[i] >= 100.0);
                if out[i] == 400.0 {
                    hits += 1;
                }
            }
        }
    }
    // About half the noise draws are positive and land exactly on the bound.
    assert!(hits > 700, "{hits}");
}

#[test]
fn exploration_frequency_matches_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (lb, ub) = (v(&[-1.0]), v(&[1.0]));
    let a = v(&[0.0]);
    let n = 100_000;
    let count = (0..n).filter(|_| epsilon_greedy(&a, &lb, &ub, 0.1, 1.0, &mut rng).1).count();
    let freq = count as f64 / n as f64;
    assert!((freq - 0.1).abs() <= 0.005, "{freq}");
}

#[test]
fn critic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let critic = QuadraticCritic {
        ns: 2,
        na: 2,
        w: DVector::from_fn(QuadraticCritic::feature_count(2, 2), |_, _| rng.random_range(-1.0..1.0)),
    };
    for _ in 0..10 {
        let s = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
        let a = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
        let g = critic.grad_a(&s, &a);
        for i in 0..2 {
            let h = 1e-6;
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap[i] += h;
            am[i] -= h;
            let fd = (critic.value(&s, &ap) - critic.value(&s, &am)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-7 * (1.0 + fd.abs()));
        }
        // Linear in w: the gradient in w is the feature vector.
        let mut c2 = critic.clone();
        c2.w[3] += 1.0;
        assert!((c2.value(&s, &a) - critic.value(&s, &a) - critic.features(&s, &a)[3]).abs() <= 1e-12);
    }
}

#[test]
fn lqr_critic_is_the_action_value_function() {
    let prob = two_state_lq();
    let sol = solve_discounted_dare(&prob).unwrap();
    let critic = QuadraticCritic::from_lqr(&prob, &sol);
    let h = sol.action_value_matrix(&prob);
    let z = v(&[0.3, -0.7, 0.2]);
    assert!((critic.value(&z.rows(0, 2).into_owned(), &z.rows(2, 1).into_owned()) - z.dot(&(&h * &z))).abs() <= 1e-12);
    // The optimal input zeroes the action gradient.
    let s = v(&[0.3, -0.7]);
    let a = -(&sol.k * &s);
    assert!(critic.grad_a(&s, &a).amax() <= 1e-10);
}

#[test]
fn dpg_with_zero_steps_changes_nothing() {
    let prob = two_state_lq();
    let (ocp, theta) = build_lq_ocp(&prob, 5, 1e3).unwrap();
    let critic = QuadraticCritic::zeros(2, 1);
    let tr =
        Transition { step: 0, s: v(&[0.5, 0.1]), a: v(&[0.2]), cost: 1.0, s_next: v(&[0.4, 0.2]), explored: false };
    let mut solver = Solver::default();
    let u = dpg_actor_critic_step(&ocp, &theta, &critic, &tr, 0.0, 0.0, 1e3, &mut solver).unwrap();
    assert_eq!(u.theta, theta);
    assert_eq!(u.critic, critic);
}

#[test]
fn dpg_direction_vanishes_at_the_optimum_with_the_exact_critic() {
    let prob = two_state_lq();
    let sol = solve_discounted_dare(&prob).unwrap();
    let (ocp, theta) = build_lq_ocp(&prob, 5, 1e3).unwrap();
    let critic = QuadraticCritic::from_lqr(&prob, &sol);
    let plant = LqPlant(prob);
    let mut solver = Solver::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..10 {
        let s = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let a = v(&[rng.random_range(-1.0..1.0)]);
        let ps = plant.step(k, &s, &a).unwrap();
        let tr = Transition { step: k, s, a, cost: ps.cost, s_next: ps.next, explored: true };
        let u = dpg_actor_critic_step(&ocp, &theta, &critic, &tr, 0.0, 1.0, 1e3, &mut solver).unwrap();
        assert!(u.direction_norm <= 1e-6, "{}", u.direction_norm);
        // The exact critic is Bellman-consistent on the true cost.
        assert!(u.tau.abs() <= 1e-9 * (1.0 + tr.cost.abs()), "{}", u.tau);
    }
}

#[test]
fn dpg_fixed_point_recovers_the_riccati_gain() {
    let prob = two_state_lq();
    let sol = solve_discounted_dare(&prob).unwrap();
    let (ocp, mut theta) = build_lq_ocp(&prob, 3, 1e3).unwrap();
    // Mis-tuned input weight; the actor must undo it.
    let mut h = theta.symmetric("H").unwrap();
    h[(2, 2)] *= 3.0;
    theta.set_matrix("H", &h).unwrap();
    let critic = QuadraticCritic::from_lqr(&prob, &sol);
    let plant = LqPlant(prob.clone());
    let mut solver = Solver::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..300 {
        let s = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let ps = plant.step(k, &s, &v(&[0.0])).unwrap();
        let tr = Transition { step: k, s, a: v(&[0.0]), cost: ps.cost, s_next: ps.next, explored: false };
        theta = dpg_actor_critic_step(&ocp, &theta, &critic, &tr, 0.0, 0.05, 1e3, &mut solver).unwrap().theta;
    }
    let inst = ocp.instantiate(&theta).unwrap();
    let gain = DMatrix::from_fn(1, 2, |_, j| {
        let mut e = DVector::zeros(2);
        e[j] = 1.0;
        -solver.policy(&inst, &e).unwrap()[0]
    });
    let err = (&gain - &sol.k).amax();
    assert!(err <= 1e-4, "gain {gain} vs {}", sol.k);
}

#[test]
fn projection_keeps_pd_slices_bitwise_and_clamps_others() {
    let layout = ThetaLayout::new()
        .with("H", SliceKind::Symmetric { n: 2 }, 3, true)
        .unwrap()
        .with("g", SliceKind::Vector, 2, false)
        .unwrap();
    let theta = ThetaVector::from_values(layout.clone(), vec![2.0, 0.3, 1.0, -5.0, 7.0]).unwrap();
    assert_eq!(project_parameters(&theta), theta);
    // diag(1, −0.5) → diag(1, ε); the unconstrained slice is untouched.
    let theta = ThetaVector::from_values(layout, vec![1.0, 0.0, -0.5, -5.0, 7.0]).unwrap();
    let p = project_parameters(&theta);
    let ev = p.symmetric("H").unwrap().symmetric_eigen().eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    assert!((hi - 1.0).abs() <= 1e-15 && (lo - EPS_PD).abs() <= 1e-15, "{ev}");
    assert_eq!(p.raw("g").unwrap(), &[-5.0, 7.0]);
}

proptest! {
    #[test]
    fn projection_is_idempotent(vals in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let layout = ThetaLayout::new().with("H", SliceKind::Symmetric { n: 3 }, 6, true).unwrap();
        let theta = ThetaVector::from_values(layout, vals).unwrap();
        let once = project_parameters(&theta);
        let twice = project_parameters(&once);
        prop_assert_eq!(&once, &twice);
        let ev = once.symmetric("H").unwrap().symmetric_eigen().eigenvalues;
        prop_assert!(ev.min() >= EPS_PD * (1.0 - 1e-6));
    }

    #[test]
    fn exploration_stays_within_bounds(seed in 0u64..1000, a0 in -2.0f64..2.0, scale in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lb, ub) = (v(&[-1.0]), v(&[1.0]));
        let a = v(&[a0.clamp(-1.0, 1.0)]);
        let (out, _) = epsilon_greedy(&a, &lb, &ub, 0.9, scale, &mut rng);
        prop_assert!(out[0] >= -1.0 && out[0] <= 1.0);
    }
}

fn run(learner: &mut Learner<'_, LinearPlant>, n: usize) -> Vec<StepRecord> {
    (0..n).map(|_| learner.step().unwrap()).collect()
}

#[test]
fn learner_runs_are_deterministic_and_resumable() {
    let theta = linear_mpc_initial_theta();
    let ocp = build_linear_mpc(&theta, &LinearMpcOptions::default()).unwrap();
    let plant = LinearPlant::new(11);
    let config = LearnerConfig { alpha: 1e-6, epsilon: 0.2, seed: 99, ..Default::default() };
    let make = || {
        Learner::new(ocp.clone(), &plant, theta.clone(), v(&[0.5, 0.5]), config.clone(), SolverOptions::default())
            .unwrap()
    };
    let mut a = make();
    let mut b = make();
    let ra = run(&mut a, 40);
    let rb = run(&mut b, 40);
    assert_eq!(ra, rb);
    assert_eq!(a.checkpoint(), b.checkpoint());
    assert!(ra.iter().any(|r| r.explored));

    let mut c = make();
    let _ = run(&mut c, 17);
    let ck = c.checkpoint();
    let mut d = Learner::resume(ocp.clone(), &plant, ck, config.clone(), SolverOptions::default()).unwrap();
    let rd = run(&mut d, 23);
    assert_eq!(&ra[17..], &rd[..]);
    assert_eq!(d.checkpoint(), a.checkpoint());
}

#[test]
fn zero_step_size_keeps_theta_constant() {
    let theta = linear_mpc_initial_theta();
    let ocp = build_linear_mpc(&theta, &LinearMpcOptions::default()).unwrap();
    let plant = LinearPlant::new(1);
    let config = LearnerConfig { alpha: 0.0, ..Default::default() };
    let mut l = Learner::new(ocp, &plant, theta.clone(), v(&[0.2, 0.0]), config, SolverOptions::default()).unwrap();
    for _ in 0..20 {
        assert!(l.step().unwrap().tau.is_some());
    }
    assert_eq!(l.theta(), &theta);
}

#[test]
fn invalid_learner_configs_are_rejected() {
    let bad = [
        LearnerConfig { alpha: -1.0, ..Default::default() },
        LearnerConfig { epsilon: 1.0, ..Default::default() },
        LearnerConfig { algorithm: Algorithm::Batch { period: 0 }, ..Default::default() },
        LearnerConfig { update: UpdateOptions { clip_norm: 0.0, ..Default::default() }, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
}
