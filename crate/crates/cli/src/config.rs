//! Experiment configuration: a flat TOML file layered over per-kind presets.
//!
//! ```toml
//! kind = "evaporation"        # linear-mpc | evaporation | lqr-demo | oracle-suite
//! preset = "nominal"          # evaporation only: nominal | naive
//! steps = 20000               # closed-loop steps
//! checkpoint_period = 2000    # theta snapshot every k steps (0: start and end only)
//! summary_window = 2000       # window of the summary means (0: steps / 10)
//! out = "runs/evaporation"
//!
//! [seeds]                     # required, nothing is drawn from ambient entropy
//! plant = 1
//! learner = 2
//!
//! [learner]
//! algorithm = "batch"         # evaluate | on-policy | batch | actor-critic
//! batch_period = 2000         # N_upd
//! alpha = 1e-4
//! alpha_w = 0.0               # actor-critic only
//! alpha_theta = 0.0           # actor-critic only
//! epsilon = 0.1
//! noise_scale = 1.0           # std of the exploration draw, per input
//! clip_norm = 1e3
//! td_cost = "plant"           # model | plant
//!
//! [plant]
//! deterministic = false
//! initial_state = [26.0, 50.0]
//!
//! [theta]
//! file = "runs/learn/theta.csv"   # last row of a theta.csv
//! [theta.values]
//! c_f = [0.0, 0.0]
//!
//! [oracle]                    # oracle-suite only
//! instances = 100
//! seed = 0
//! ```
//!
//! Every key is optional except `kind` and, for closed-loop kinds, the seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use enmpc_core::rl::{Algorithm, LearnerConfig, QuadraticCritic, TdCost, UpdateOptions};
use enmpc_core::ThetaVector;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LinearMpc,
    Evaporation,
    LqrDemo,
    OracleSuite,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinearMpc => "linear-mpc",
            Self::Evaporation => "evaporation",
            Self::LqrDemo => "lqr-demo",
            Self::OracleSuite => "oracle-suite",
        }
    }

    pub fn is_closed_loop(self) -> bool {
        matches!(self, Self::LinearMpc | Self::Evaporation)
    }
}

/// Starting parameters before the file and per-slice overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaInit {
    /// Linear: nominal model, everything else zero. Evaporation: nominal economic tuning.
    Nominal,
    /// Evaporation only: `H_l = I`, nominal bounds.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Evaluate,
    OnPolicy,
    Batch,
    ActorCritic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub theta_init: ThetaInit,
    pub steps: usize,
    pub checkpoint_period: usize,
    pub summary_window: usize,
    pub out: PathBuf,
    pub plant_seed: u64,
    pub learner_seed: u64,
    pub algorithm: AlgorithmKind,
    pub batch_period: usize,
    pub alpha: f64,
    pub alpha_w: f64,
    pub alpha_theta: f64,
    pub epsilon: f64,
    pub noise_scale: f64,
    pub clip_norm: f64,
    pub td_cost: TdCost,
    pub deterministic_plant: bool,
    pub initial_state: Option<Vec<f64>>,
    pub theta_file: Option<PathBuf>,
    pub theta_values: BTreeMap<String, Vec<f64>>,
    pub oracle_instances: usize,
    pub oracle_seed: u64,
}

impl ExperimentConfig {
    /// Defaults of a kind. Closed-loop seeds start at 0 here; files must set them.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            theta_init: ThetaInit::Nominal,
            steps: 0,
            checkpoint_period: 0,
            summary_window: 0,
            out: PathBuf::from("runs").join(kind.name()),
            plant_seed: 0,
            learner_seed: 0,
            algorithm: AlgorithmKind::Evaluate,
            batch_period: 1,
            alpha: 0.0,
            alpha_w: 0.0,
            alpha_theta: 0.0,
            epsilon: 0.0,
            noise_scale: 1.0,
            clip_norm: 1e3,
            td_cost: TdCost::Model,
            deterministic_plant: false,
            initial_state: None,
            theta_file: None,
            theta_values: BTreeMap::new(),
            oracle_instances: 100,
            oracle_seed: 0,
        };
        match kind {
            ExperimentKind::LinearMpc => {
                Self { steps: 3000, checkpoint_period: 300, algorithm: AlgorithmKind::OnPolicy, alpha: 1e-6, ..base }
            }
            ExperimentKind::Evaporation => Self {
                steps: 20000,
                checkpoint_period: 2000,
                summary_window: 2000,
                algorithm: AlgorithmKind::Batch,
                batch_period: 2000,
                alpha: 1e-4,
                epsilon: 0.1,
                noise_scale: 10.0,
                td_cost: TdCost::Plant,
                ..base
            },
            ExperimentKind::LqrDemo | ExperimentKind::OracleSuite => base,
        }
    }

    /// The "naive initial guess" evaporation variant: `H_l = I`, N_upd = 20000.
    pub fn evaporation_naive() -> Self {
        Self {
            theta_init: ThetaInit::Naive,
            batch_period: 20000,
            steps: 60000,
            checkpoint_period: 20000,
            summary_window: 20000,
            ..Self::preset(ExperimentKind::Evaporation)
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(f) = &cfg.theta_file {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.theta_file = Some(dir.join(f));
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = match (raw.kind, raw.preset.as_deref()) {
            (k, None | Some("nominal")) => Self::preset(k),
            (ExperimentKind::Evaporation, Some("naive")) => Self::evaporation_naive(),
            (k, Some(p)) => return Err(CliError::Config(format!("unknown preset {p:?} for {}", k.name()))),
        };
        if cfg.kind.is_closed_loop() {
            match (raw.seeds.plant, raw.seeds.learner) {
                (Some(p), Some(l)) => {
                    cfg.plant_seed = p;
                    cfg.learner_seed = l;
                }
                _ => return Err(CliError::Config("[seeds] plant and learner must both be set".to_string())),
            }
        }
        set(&mut cfg.steps, raw.steps);
        set(&mut cfg.checkpoint_period, raw.checkpoint_period);
        set(&mut cfg.summary_window, raw.summary_window);
        set(&mut cfg.out, raw.out);
        let l = raw.learner;
        set(&mut cfg.algorithm, l.algorithm);
        set(&mut cfg.batch_period, l.batch_period);
        set(&mut cfg.alpha, l.alpha);
        set(&mut cfg.alpha_w, l.alpha_w);
        set(&mut cfg.alpha_theta, l.alpha_theta);
        set(&mut cfg.epsilon, l.epsilon);
        set(&mut cfg.noise_scale, l.noise_scale);
        set(&mut cfg.clip_norm, l.clip_norm);
        if let Some(t) = l.td_cost {
            cfg.td_cost = match t.as_str() {
                "model" => TdCost::Model,
                "plant" => TdCost::Plant,
                other => return Err(CliError::Config(format!("td_cost must be model or plant, got {other:?}"))),
            };
        }
        set(&mut cfg.deterministic_plant, raw.plant.deterministic);
        if raw.plant.initial_state.is_some() {
            cfg.initial_state = raw.plant.initial_state;
        }
        if let Some(init) = raw.theta.init {
            cfg.theta_init = init;
        }
        cfg.theta_file = raw.theta.file;
        cfg.theta_values = raw.theta.values;
        set(&mut cfg.oracle_instances, raw.oracle.instances);
        set(&mut cfg.oracle_seed, raw.oracle.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn learner_config(&self, nu: usize) -> LearnerConfig {
        let algorithm = match self.algorithm {
            AlgorithmKind::Evaluate => Algorithm::Evaluate,
            AlgorithmKind::OnPolicy => Algorithm::OnPolicy,
            AlgorithmKind::Batch => Algorithm::Batch { period: self.batch_period },
            AlgorithmKind::ActorCritic => Algorithm::ActorCritic { critic: QuadraticCritic::zeros(2, nu) },
        };
        LearnerConfig {
            algorithm,
            alpha: self.alpha,
            alpha_w: self.alpha_w,
            alpha_theta: self.alpha_theta,
            epsilon: self.epsilon,
            noise_scale: self.noise_scale,
            update: UpdateOptions { clip_norm: self.clip_norm, td_cost: self.td_cost },
            seed: self.learner_seed,
        }
    }

    /// Checks everything that can be checked without running: learner
    /// parameters, the initial state and that every referenced slice exists.
    pub fn validate(&self) -> Result<(), CliError> {
        if !self.kind.is_closed_loop() {
            return Ok(());
        }
        if self.theta_init == ThetaInit::Naive && self.kind != ExperimentKind::Evaporation {
            return Err(CliError::Config("theta init \"naive\" exists only for evaporation".to_string()));
        }
        self.learner_config(2).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = &self.initial_state {
            if s.len() != 2 || s.iter().any(|x| !x.is_finite()) {
                return Err(CliError::Config(format!("initial_state must be two finite numbers, got {s:?}")));
            }
        }
        let setup = crate::experiment::Setup::new(self).map_err(|e| CliError::Config(e.to_string()))?;
        self.initial_theta(setup.base_theta())?;
        Ok(())
    }

    /// Applies the theta file and per-slice overrides on top of `base`.
    pub fn initial_theta(&self, base: ThetaVector) -> Result<ThetaVector, CliError> {
        let mut theta = base;
        if let Some(path) = &self.theta_file {
            let values = crate::report::read_last_theta(path, theta.layout())
                .map_err(|e| CliError::Config(format!("theta file {}: {e:#}", path.display())))?;
            theta = theta.with_values(values).map_err(|e| CliError::Config(e.to_string()))?;
        }
        for (name, values) in &self.theta_values {
            theta.set_raw(name, values).map_err(|e| CliError::Config(format!("theta.values.{name}: {e}")))?;
        }
        if let Some(i) = theta.values().iter().position(|v| !v.is_finite()) {
            return Err(CliError::Config(format!("parameter {} is not finite", theta.layout().label(i))));
        }
        Ok(theta)
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: ExperimentKind,
    preset: Option<String>,
    steps: Option<usize>,
    checkpoint_period: Option<usize>,
    summary_window: Option<usize>,
    out: Option<PathBuf>,
    #[serde(default)]
    seeds: RawSeeds,
    #[serde(default)]
    learner: RawLearner,
    #[serde(default)]
    plant: RawPlant,
    #[serde(default)]
    theta: RawTheta,
    #[serde(default)]
    oracle: RawOracle,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSeeds {
    plant: Option<u64>,
    learner: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawLearner {
    algorithm: Option<AlgorithmKind>,
    batch_period: Option<usize>,
    alpha: Option<f64>,
    alpha_w: Option<f64>,
    alpha_theta: Option<f64>,
    epsilon: Option<f64>,
    noise_scale: Option<f64>,
    clip_norm: Option<f64>,
    td_cost: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    deterministic: Option<bool>,
    initial_state: Option<Vec<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTheta {
    init: Option<ThetaInit>,
    file: Option<PathBuf>,
    #[serde(default)]
    values: BTreeMap<String, Vec<f64>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOracle {
    instances: Option<usize>,
    seed: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_apply_under_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            "kind = \"linear-mpc\"\nsteps = 10\n[seeds]\nplant = 3\nlearner = 4\n[learner]\nalpha = 0.0\n",
        )
        .unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.alpha, 0.0);
        assert_eq!(cfg.algorithm, AlgorithmKind::OnPolicy);
        assert_eq!((cfg.plant_seed, cfg.learner_seed), (3, 4));
        assert_eq!(cfg.td_cost, TdCost::Model);
    }

    #[test]
    fn naive_preset() {
        let cfg = ExperimentConfig::from_toml_str(
            "kind = \"evaporation\"\npreset = \"naive\"\n[seeds]\nplant = 0\nlearner = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.theta_init, ThetaInit::Naive);
        assert_eq!(cfg.batch_period, 20000);
        assert_eq!(cfg.td_cost, TdCost::Plant);
    }

    #[test]
    fn seeds_are_required_for_closed_loop_kinds() {
        let e = ExperimentConfig::from_toml_str("kind = \"linear-mpc\"\n").unwrap_err();
        assert!(matches!(e, CliError::Config(ref m) if m.contains("seeds")));
        assert!(ExperimentConfig::from_toml_str("kind = \"lqr-demo\"\n").is_ok());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let seeds = "[seeds]\nplant = 0\nlearner = 0\n";
        for body in [
            "kind = \"linear-mpc\"\nbogus = 1\n",
            "kind = \"linear-mpc\"\n[theta.values]\nnope = [1.0]\n",
            "kind = \"linear-mpc\"\n[theta.values]\nf = [1.0]\n",
            "kind = \"linear-mpc\"\n[learner]\nepsilon = 1.5\n",
            "kind = \"linear-mpc\"\n[learner]\ntd_cost = \"other\"\n",
            "kind = \"linear-mpc\"\npreset = \"naive\"\n",
            "kind = \"linear-mpc\"\n[theta]\ninit = \"naive\"\n",
            "kind = \"evaporation\"\n[learner]\nalgorithm = \"batch\"\nbatch_period = 0\n",
            "kind = \"linear-mpc\"\n[plant]\ninitial_state = [1.0]\n",
            "kind = \"linear-mpc\"\n[theta]\nfile = \"/nonexistent/theta.csv\"\n",
        ] {
            let text = if body.contains('[') {
                let (head, tail) = body.split_at(body.find('[').unwrap());
                format!("{head}{seeds}{tail}")
            } else {
                format!("{body}{seeds}")
            };
            assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn slice_overrides_land_in_theta() {
        let cfg = ExperimentConfig::from_toml_str(
            "kind = \"linear-mpc\"\n[seeds]\nplant = 0\nlearner = 0\n[theta.values]\nb = [0.5, -0.5]\n",
        )
        .unwrap();
        let setup = crate::experiment::Setup::new(&cfg).unwrap();
        let theta = cfg.initial_theta(setup.base_theta()).unwrap();
        assert_eq!(theta.raw("b").unwrap(), &[0.5, -0.5]);
        assert_eq!(theta.raw("A").unwrap(), &[1.0, 0.25, 0.0, 1.0]);
    }
}
