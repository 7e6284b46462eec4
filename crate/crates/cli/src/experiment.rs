//! Closed-loop runs: plant + scheme + learner wired from an [`ExperimentConfig`].

use std::collections::BTreeMap;

use enmpc_core::plants::{bound_violation, EvaporationPlant, LinearPlant, Plant, PlantStep};
use enmpc_core::rl::{Learner, LearnerState};
use enmpc_core::schemes::{
    build_evaporation_ocp, build_linear_mpc, evaporation_layout, evaporation_naive_theta, evaporation_nominal_theta,
    linear_mpc_initial_theta, linear_mpc_layout, EvaporationScheme, LinearMpcOptions,
};
use enmpc_core::{ParametricOcp, SolverOptions, ThetaLayout, ThetaVector};
use nalgebra::DVector;

use crate::config::{ExperimentConfig, ExperimentKind, ThetaInit};
use crate::error::CliError;

/// Eigenvalue floor (relative) of the nominal evaporation stage Hessian.
pub const NOMINAL_HESSIAN_FLOOR: f64 = 1e-3;

/// Default initial state of the linear example.
pub const LINEAR_INITIAL_STATE: [f64; 2] = [0.5, 0.5];

/// Plant and prediction scheme of one experiment kind.
pub enum Setup {
    Linear { plant: LinearPlant, opts: LinearMpcOptions },
    Evaporation { plant: EvaporationPlant, scheme: Box<EvaporationScheme>, init: ThetaInit },
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> enmpc_core::Result<Self> {
        match cfg.kind {
            ExperimentKind::LinearMpc => {
                let mut plant = LinearPlant::new(cfg.plant_seed);
                if cfg.deterministic_plant {
                    plant.noise = (0.0, 0.0);
                }
                Ok(Self::Linear { plant, opts: LinearMpcOptions::default() })
            }
            ExperimentKind::Evaporation => {
                let mut plant = EvaporationPlant::new(cfg.plant_seed);
                if cfg.deterministic_plant {
                    plant = plant.deterministic();
                }
                let scheme = Box::new(EvaporationScheme::new(&plant)?);
                Ok(Self::Evaporation { plant, scheme, init: cfg.theta_init })
            }
            k => Err(enmpc_core::Error::Unsupported(format!("{} is not a closed-loop experiment", k.name()))),
        }
    }

    pub fn plant(&self) -> &dyn Plant {
        match self {
            Self::Linear { plant, .. } => plant,
            Self::Evaporation { plant, .. } => plant,
        }
    }

    /// Preset parameters before file and slice overrides.
    pub fn base_theta(&self) -> ThetaVector {
        match self {
            Self::Linear { .. } => linear_mpc_initial_theta(),
            Self::Evaporation { plant, init: ThetaInit::Naive, .. } => evaporation_naive_theta(plant),
            Self::Evaporation { plant, scheme, .. } => evaporation_nominal_theta(plant, scheme, NOMINAL_HESSIAN_FLOOR)
                .expect("nominal tuning exists for the shipped plant"),
        }
    }

    pub fn ocp(&self, theta: &ThetaVector) -> enmpc_core::Result<ParametricOcp> {
        match self {
            Self::Linear { opts, .. } => build_linear_mpc(theta, opts),
            Self::Evaporation { scheme, .. } => build_evaporation_ocp(theta, scheme),
        }
    }

    pub fn default_initial_state(&self) -> DVector<f64> {
        match self {
            Self::Linear { .. } => DVector::from_column_slice(&LINEAR_INITIAL_STATE),
            Self::Evaporation { scheme, .. } => scheme.x_ref.clone(),
        }
    }

    /// True state bounds `(lb, ub)` used for violation counts.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Linear { plant, .. } => (plant.x_lb.to_vec(), plant.x_ub.to_vec()),
            Self::Evaporation { plant, .. } => (plant.x_lb.to_vec(), plant.x_ub.to_vec()),
        }
    }
}

/// Parameter layout of a closed-loop experiment kind.
pub fn layout_for(kind: ExperimentKind) -> enmpc_core::Result<ThetaLayout> {
    match kind {
        ExperimentKind::LinearMpc => Ok(linear_mpc_layout()),
        ExperimentKind::Evaporation => Ok(evaporation_layout()),
        k => Err(enmpc_core::Error::Unsupported(format!("{} has no parameter vector", k.name()))),
    }
}

/// A plant whose disturbances come from a log where one is available.
pub struct ReplayPlant<'a> {
    pub inner: &'a dyn Plant,
    pub log: BTreeMap<usize, Vec<f64>>,
}

impl<'a> ReplayPlant<'a> {
    pub fn new(inner: &'a dyn Plant, log: &RunLog) -> Self {
        Self { inner, log: log.rows.iter().map(|r| (r.step, r.disturbance.clone())).collect() }
    }
}

impl Plant for ReplayPlant<'_> {
    fn nx(&self) -> usize {
        self.inner.nx()
    }

    fn nu(&self) -> usize {
        self.inner.nu()
    }

    fn disturbance(&self, k: usize) -> Vec<f64> {
        self.log.get(&k).cloned().unwrap_or_else(|| self.inner.disturbance(k))
    }

    fn apply(&self, k: usize, s: &DVector<f64>, a: &DVector<f64>, d: &[f64]) -> enmpc_core::Result<PlantStep> {
        self.inner.apply(k, s, a, d)
    }
}

/// Identification of a run, enough to check that two runs are comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub kind: ExperimentKind,
    pub plant_seed: u64,
    pub learner_seed: u64,
    pub start_step: usize,
    pub steps: usize,
    pub nx: usize,
    pub nu: usize,
    pub nd: usize,
    pub x_lb: Vec<f64>,
    pub x_ub: Vec<f64>,
    pub summary_window: usize,
    pub theta_labels: Vec<String>,
}

/// One closed-loop step as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Realized plant stage cost.
    pub cost: f64,
    pub tau: Option<f64>,
    pub grad_norm: f64,
    pub explored: bool,
    pub projected: bool,
    pub clipped: bool,
    pub swapped: bool,
    /// Unweighted distance of `s` outside the true state bounds.
    pub violation: f64,
    pub disturbance: Vec<f64>,
}

/// Deployed parameters at the start of `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaCheckpoint {
    pub step: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub meta: RunMeta,
    pub rows: Vec<StepRow>,
    pub thetas: Vec<ThetaCheckpoint>,
    /// Learner states at the checkpoint steps, the last one being where the
    /// run stopped.
    pub checkpoints: Vec<LearnerState>,
}

/// Statistics of a run, a pure function of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub steps: usize,
    pub window: usize,
    pub mean_cost: f64,
    pub total_cost: f64,
    pub window_mean_cost: Vec<f64>,
    /// Moving average of |τ| over consecutive windows (steps without τ skipped).
    pub window_mean_abs_tau: Vec<f64>,
    pub window_mean_tau: Vec<f64>,
    pub window_violations: Vec<usize>,
    pub violations: usize,
    pub component_violations: Vec<usize>,
    pub mean_state: Vec<f64>,
    pub explored: usize,
}

impl RunLog {
    pub fn summary(&self) -> Summary {
        Summary::from_rows(&self.rows, &self.meta)
    }

    pub fn final_theta(&self) -> Option<&ThetaCheckpoint> {
        self.thetas.last()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl Summary {
    pub fn from_rows(rows: &[StepRow], meta: &RunMeta) -> Self {
        let n = rows.len();
        let window = if meta.summary_window > 0 { meta.summary_window } else { (n / 10).max(1) };
        let outside = |r: &StepRow, i: usize| r.s[i] < meta.x_lb[i] || r.s[i] > meta.x_ub[i];
        let windows: Vec<&[StepRow]> = rows.chunks(window).collect();
        Self {
            steps: n,
            window,
            mean_cost: mean(rows.iter().map(|r| r.cost)),
            total_cost: rows.iter().fold(0.0, |s, r| s + r.cost),
            window_mean_cost: windows.iter().map(|w| mean(w.iter().map(|r| r.cost))).collect(),
            window_mean_abs_tau: windows.iter().map(|w| mean(w.iter().filter_map(|r| r.tau.map(f64::abs)))).collect(),
            window_mean_tau: windows.iter().map(|w| mean(w.iter().filter_map(|r| r.tau))).collect(),
            window_violations: windows.iter().map(|w| w.iter().filter(|r| r.violation > 0.0).count()).collect(),
            violations: rows.iter().filter(|r| r.violation > 0.0).count(),
            component_violations: (0..meta.nx).map(|i| rows.iter().filter(|r| outside(r, i)).count()).collect(),
            mean_state: (0..meta.nx).map(|i| mean(rows.iter().map(|r| r.s[i]))).collect(),
            explored: rows.iter().filter(|r| r.explored).count(),
        }
    }
}

/// A run that stopped on a solver or plant failure. The log holds every
/// completed step and a checkpoint of the last good state.
#[derive(Debug)]
pub struct Aborted {
    pub log: RunLog,
    pub error: enmpc_core::Error,
}

#[derive(Debug)]
pub enum RunError {
    Config(CliError),
    Aborted(Box<Aborted>),
}

impl From<CliError> for RunError {
    fn from(e: CliError) -> Self {
        Self::Config(e)
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(e) => write!(f, "{e}"),
            Self::Aborted(a) => {
                write!(f, "run aborted at step {}: {}", a.log.meta.start_step + a.log.rows.len(), a.error)
            }
        }
    }
}

impl std::error::Error for RunError {}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(e) => e.exit_code(),
            Self::Aborted(_) => 3,
        }
    }
}

fn config_err(e: enmpc_core::Error) -> RunError {
    RunError::Config(CliError::Config(e.to_string()))
}

/// Runs the closed loop described by `cfg` from step 0.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunLog, RunError> {
    let setup = Setup::new(cfg).map_err(config_err)?;
    let theta = cfg.initial_theta(setup.base_theta())?;
    let s0 = match &cfg.initial_state {
        Some(s) => DVector::from_column_slice(s),
        None => setup.default_initial_state(),
    };
    let ocp = setup.ocp(&theta).map_err(config_err)?;
    let plant = setup.plant();
    let learner = Learner::new(ocp, plant, theta, s0, cfg.learner_config(plant.nu()), SolverOptions::default())
        .map_err(config_err)?;
    drive(cfg, &setup, learner)
}

/// Continues a run from a learner checkpoint. Disturbances of steps present
/// in `replay` are taken from it instead of the plant's generator.
pub fn resume_experiment(
    cfg: &ExperimentConfig,
    state: LearnerState,
    replay: Option<&RunLog>,
) -> Result<RunLog, RunError> {
    let setup = Setup::new(cfg).map_err(config_err)?;
    let ocp = setup.ocp(&state.theta).map_err(config_err)?;
    let replayed = replay.map(|log| ReplayPlant::new(setup.plant(), log));
    let plant: &dyn Plant = match &replayed {
        Some(p) => p,
        None => setup.plant(),
    };
    let learner = Learner::resume(ocp, plant, state, cfg.learner_config(plant.nu()), SolverOptions::default())
        .map_err(config_err)?;
    drive(cfg, &setup, learner)
}

fn drive(cfg: &ExperimentConfig, setup: &Setup, mut learner: Learner<'_, dyn Plant + '_>) -> Result<RunLog, RunError> {
    let (x_lb, x_ub) = setup.bounds();
    let start = learner.state().step;
    let plant = setup.plant();
    let meta = RunMeta {
        kind: cfg.kind,
        plant_seed: cfg.plant_seed,
        learner_seed: cfg.learner_seed,
        start_step: start,
        steps: cfg.steps,
        nx: plant.nx(),
        nu: plant.nu(),
        nd: plant.disturbance(0).len(),
        x_lb,
        x_ub,
        summary_window: cfg.summary_window,
        theta_labels: (0..learner.theta().len()).map(|i| learner.theta().layout().label(i)).collect(),
    };
    let ones = vec![1.0; meta.nx];
    let mut log = RunLog { meta, rows: Vec::new(), thetas: Vec::new(), checkpoints: Vec::new() };
    log.thetas.push(ThetaCheckpoint { step: start, values: learner.theta().values().to_vec() });
    while learner.state().step < cfg.steps {
        let rec = match learner.step() {
            Ok(r) => r,
            Err(error) => {
                log.checkpoints.push(learner.checkpoint());
                return Err(RunError::Aborted(Box::new(Aborted { log, error })));
            }
        };
        let violation = bound_violation(&rec.s, &log.meta.x_lb, &log.meta.x_ub, &ones);
        log.rows.push(StepRow {
            step: rec.step,
            s: rec.s.as_slice().to_vec(),
            a: rec.a.as_slice().to_vec(),
            cost: rec.cost,
            tau: rec.tau,
            grad_norm: rec.grad_norm,
            explored: rec.explored,
            projected: rec.projected,
            clipped: rec.clipped,
            swapped: rec.swapped,
            violation,
            disturbance: rec.disturbance,
        });
        let k = learner.state().step;
        if (cfg.checkpoint_period > 0 && k % cfg.checkpoint_period == 0) || k == cfg.steps {
            log.thetas.push(ThetaCheckpoint { step: k, values: learner.theta().values().to_vec() });
            log.checkpoints.push(learner.checkpoint());
        }
    }
    if log.checkpoints.is_empty() {
        log.checkpoints.push(learner.checkpoint());
    }
    Ok(log)
}
