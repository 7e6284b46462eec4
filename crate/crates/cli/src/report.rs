//! Run directories: `steps.csv`, `theta.csv`, `summary.txt`, `checkpoint.toml`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! file back gives the logged values bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use enmpc_core::rl::LearnerState;
use enmpc_core::{ThetaLayout, ThetaVector};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentKind;
use crate::experiment::{RunLog, RunMeta, StepRow, ThetaCheckpoint};

pub const STEPS_FILE: &str = "steps.csv";
pub const THETA_FILE: &str = "theta.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.toml";

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn step_columns(meta: &RunMeta) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend((0..meta.nx).map(|i| format!("s{i}")));
    h.extend((0..meta.nu).map(|i| format!("a{i}")));
    for c in ["cost", "tau", "grad_norm", "explored", "projected", "clipped", "swapped", "violation"] {
        h.push(c.to_string());
    }
    h.extend((0..meta.nd).map(|i| format!("d{i}")));
    h
}

pub fn theta_columns(meta: &RunMeta) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend(meta.theta_labels.iter().cloned());
    h
}

/// Writes the run directory and returns the paths written.
pub fn emit_report(log: &RunLog, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let meta = &log.meta;
    let steps_path = out_dir.join(STEPS_FILE);
    let mut w = csv::Writer::from_path(&steps_path).with_context(|| format!("writing {}", steps_path.display()))?;
    w.write_record(step_columns(meta))?;
    for r in &log.rows {
        let mut rec = vec![r.step.to_string()];
        rec.extend(r.s.iter().map(|&x| num(x)));
        rec.extend(r.a.iter().map(|&x| num(x)));
        rec.push(num(r.cost));
        rec.push(r.tau.map(num).unwrap_or_default());
        rec.push(num(r.grad_norm));
        for b in [r.explored, r.projected, r.clipped, r.swapped] {
            rec.push(flag(b).to_string());
        }
        rec.push(num(r.violation));
        rec.extend(r.disturbance.iter().map(|&x| num(x)));
        w.write_record(rec)?;
    }
    w.flush()?;

    let theta_path = out_dir.join(THETA_FILE);
    let mut w = csv::Writer::from_path(&theta_path).with_context(|| format!("writing {}", theta_path.display()))?;
    w.write_record(theta_columns(meta))?;
    for t in &log.thetas {
        let mut rec = vec![t.step.to_string()];
        rec.extend(t.values.iter().map(|&x| num(x)));
        w.write_record(rec)?;
    }
    w.flush()?;

    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary_text(log)).with_context(|| format!("writing {}", summary_path.display()))?;
    let mut written = vec![steps_path, theta_path, summary_path];
    if let Some(state) = log.checkpoints.last() {
        let p = out_dir.join(CHECKPOINT_FILE);
        write_checkpoint(&p, meta, state)?;
        written.push(p);
    }
    Ok(written)
}

/// `summary.txt` is TOML: run identification, statistics, and the column
/// orders of both CSV files.
pub fn summary_text(log: &RunLog) -> String {
    let meta = &log.meta;
    let s = log.summary();
    let list = |xs: &[f64]| xs.iter().map(|&x| toml_num(x)).collect::<Vec<_>>().join(", ");
    let ints = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
    let strs = |xs: &[String]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
    let mut t = String::new();
    if s.steps == 0 {
        t.push_str("# zero steps: the CSV files carry headers only\n");
    }
    let _ = writeln!(t, "kind = {:?}", meta.kind.name());
    let _ = writeln!(t, "plant_seed = {}", meta.plant_seed);
    let _ = writeln!(t, "learner_seed = {}", meta.learner_seed);
    let _ = writeln!(t, "start_step = {}", meta.start_step);
    let _ = writeln!(t, "planned_steps = {}", meta.steps);
    let _ = writeln!(t, "steps = {}", s.steps);
    let _ = writeln!(t, "nx = {}\nnu = {}\nnd = {}", meta.nx, meta.nu, meta.nd);
    let _ = writeln!(t, "x_lb = [{}]", list(&meta.x_lb));
    let _ = writeln!(t, "x_ub = [{}]", list(&meta.x_ub));
    let _ = writeln!(t, "summary_window = {}", meta.summary_window);
    t.push_str("\n[statistics]\n");
    t.push_str("# means over consecutive windows of `window` steps; tau means skip steps without tau\n");
    let _ = writeln!(t, "window = {}", s.window);
    let _ = writeln!(t, "mean_cost = {}", toml_num(s.mean_cost));
    let _ = writeln!(t, "total_cost = {}", toml_num(s.total_cost));
    let _ = writeln!(t, "violations = {}", s.violations);
    let _ = writeln!(t, "component_violations = [{}]", ints(&s.component_violations));
    let _ = writeln!(t, "mean_state = [{}]", list(&s.mean_state));
    let _ = writeln!(t, "explored = {}", s.explored);
    let _ = writeln!(t, "window_mean_cost = [{}]", list(&s.window_mean_cost));
    let _ = writeln!(t, "window_mean_abs_tau = [{}]", list(&s.window_mean_abs_tau));
    let _ = writeln!(t, "window_mean_tau = [{}]", list(&s.window_mean_tau));
    let _ = writeln!(t, "window_violations = [{}]", ints(&s.window_violations));
    t.push_str("\n[columns]\n");
    t.push_str("# steps.csv: s = state at the step, a = applied input, cost = realized plant stage cost,\n");
    t.push_str("# tau = TD error (empty when not learning), grad_norm = |grad_theta Q| used by the update,\n");
    t.push_str("# flags are 0/1, violation = distance of s outside the state bounds, d = plant disturbance\n");
    let _ = writeln!(t, "steps = [{}]", strs(&step_columns(meta)));
    t.push_str("# theta.csv: deployed parameters at the start of `step`\n");
    let _ = writeln!(t, "theta = [{}]", strs(&theta_columns(meta)));
    t
}

/// TOML has no bare NaN spelling that `{:?}` produces.
fn toml_num(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        let s = num(x);
        if s.contains(['.', 'e', 'E']) {
            s
        } else {
            format!("{s}.0")
        }
    }
}

#[derive(Deserialize)]
struct SummaryFile {
    kind: ExperimentKind,
    plant_seed: u64,
    learner_seed: u64,
    start_step: usize,
    planned_steps: usize,
    nx: usize,
    nu: usize,
    nd: usize,
    x_lb: Vec<f64>,
    x_ub: Vec<f64>,
    summary_window: usize,
    columns: SummaryColumns,
}

#[derive(Deserialize)]
struct SummaryColumns {
    steps: Vec<String>,
    theta: Vec<String>,
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| anyhow!("bad number {s:?}: {e}"))
}

fn parse_flag(s: &str) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => bail!("bad flag {other:?}"),
    }
}

/// Reads a run directory written by [`emit_report`]. Learner checkpoints
/// other than `checkpoint.toml` are not part of the directory.
pub fn read_log(dir: &Path) -> Result<RunLog> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE))
        .with_context(|| format!("reading {}", dir.join(SUMMARY_FILE).display()))?;
    let sf: SummaryFile = toml::from_str(&text).context("parsing summary.txt")?;
    let meta = RunMeta {
        kind: sf.kind,
        plant_seed: sf.plant_seed,
        learner_seed: sf.learner_seed,
        start_step: sf.start_step,
        steps: sf.planned_steps,
        nx: sf.nx,
        nu: sf.nu,
        nd: sf.nd,
        x_lb: sf.x_lb,
        x_ub: sf.x_ub,
        summary_window: sf.summary_window,
        theta_labels: sf.columns.theta.iter().skip(1).cloned().collect(),
    };
    if sf.columns.steps != step_columns(&meta) {
        bail!("steps.csv column order in summary.txt does not match nx/nu/nd");
    }
    let mut rd = csv::Reader::from_path(dir.join(STEPS_FILE))?;
    if rd.headers()?.iter().collect::<Vec<_>>() != sf.columns.steps {
        bail!("steps.csv header differs from summary.txt");
    }
    let (nx, nu, nd) = (meta.nx, meta.nu, meta.nd);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f = |i: usize| parse_f64(&rec[i]);
        let vec_at =
            |start: usize, n: usize| (start..start + n).map(|i| parse_f64(&rec[i])).collect::<Result<Vec<_>>>();
        let c = 1 + nx + nu;
        rows.push(StepRow {
            step: rec[0].parse()?,
            s: vec_at(1, nx)?,
            a: vec_at(1 + nx, nu)?,
            cost: f(c)?,
            tau: if rec[c + 1].is_empty() { None } else { Some(f(c + 1)?) },
            grad_norm: f(c + 2)?,
            explored: parse_flag(&rec[c + 3])?,
            projected: parse_flag(&rec[c + 4])?,
            clipped: parse_flag(&rec[c + 5])?,
            swapped: parse_flag(&rec[c + 6])?,
            violation: f(c + 7)?,
            disturbance: vec_at(c + 8, nd)?,
        });
    }
    let mut rd = csv::Reader::from_path(dir.join(THETA_FILE))?;
    let mut thetas = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        thetas.push(ThetaCheckpoint {
            step: rec[0].parse()?,
            values: rec.iter().skip(1).map(parse_f64).collect::<Result<_>>()?,
        });
    }
    let mut log = RunLog { meta, rows, thetas, checkpoints: Vec::new() };
    let cp = dir.join(CHECKPOINT_FILE);
    if cp.exists() {
        let state = read_checkpoint_raw(&cp)?.into_state(&log.meta)?;
        log.checkpoints.push(state);
    }
    Ok(log)
}

/// Last row of a `theta.csv`, matched to `layout` by column label.
pub fn read_last_theta(path: &Path, layout: &ThetaLayout) -> Result<Vec<f64>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let last = rd.records().last().ok_or_else(|| anyhow!("no rows"))??;
    let labels: Vec<String> = (0..layout.len()).map(|i| layout.label(i)).collect();
    if header.len() != labels.len() + 1 || header[1..] != labels[..] {
        bail!("columns do not match the parameter layout of this experiment");
    }
    last.iter().skip(1).map(parse_f64).collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    kind: ExperimentKind,
    plant_seed: u64,
    learner_seed: u64,
    step: usize,
    s: Vec<f64>,
    theta_labels: Vec<String>,
    theta: Vec<f64>,
    theta_learn: Vec<f64>,
    critic: Option<Vec<f64>>,
    /// Decimal, since TOML integers stop at 2⁶³.
    rng_word_pos: String,
}

impl CheckpointFile {
    fn into_state(self, meta: &RunMeta) -> Result<LearnerState> {
        if self.theta_labels != meta.theta_labels {
            bail!("checkpoint parameter labels differ from the run");
        }
        let layout = crate::experiment::layout_for(meta.kind)?;
        self.into_state_with(&layout)
    }

    fn into_state_with(self, layout: &ThetaLayout) -> Result<LearnerState> {
        let labels: Vec<String> = (0..layout.len()).map(|i| layout.label(i)).collect();
        if labels != self.theta_labels {
            bail!("checkpoint parameter labels do not match the experiment layout");
        }
        Ok(LearnerState {
            step: self.step,
            s: DVector::from_vec(self.s),
            theta: ThetaVector::from_values(layout.clone(), self.theta)?,
            theta_learn: ThetaVector::from_values(layout.clone(), self.theta_learn)?,
            critic: self.critic.map(DVector::from_vec),
            rng_word_pos: self.rng_word_pos.parse().context("rng_word_pos")?,
        })
    }
}

pub fn write_checkpoint(path: &Path, meta: &RunMeta, state: &LearnerState) -> Result<()> {
    let file = CheckpointFile {
        kind: meta.kind,
        plant_seed: meta.plant_seed,
        learner_seed: meta.learner_seed,
        step: state.step,
        s: state.s.as_slice().to_vec(),
        theta_labels: meta.theta_labels.clone(),
        theta: state.theta.values().to_vec(),
        theta_learn: state.theta_learn.values().to_vec(),
        critic: state.critic.as_ref().map(|w| w.as_slice().to_vec()),
        rng_word_pos: state.rng_word_pos.to_string(),
    };
    let text = toml::to_string(&file)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_checkpoint_raw(path: &Path) -> Result<CheckpointFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Identification carried by a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub kind: ExperimentKind,
    pub plant_seed: u64,
    pub learner_seed: u64,
}

/// Reads a checkpoint for an experiment whose parameters use `layout`.
pub fn read_checkpoint(path: &Path, layout: &ThetaLayout) -> Result<(CheckpointInfo, LearnerState)> {
    let raw = read_checkpoint_raw(path)?;
    let info = CheckpointInfo { kind: raw.kind, plant_seed: raw.plant_seed, learner_seed: raw.learner_seed };
    Ok((info, raw.into_state_with(layout)?))
}
