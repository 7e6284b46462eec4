//! Common-random-number comparison of two closed-loop runs.

use std::fmt;

use thiserror::Error;

use crate::experiment::RunLog;

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("comparison invalid: experiment kinds differ ({0} vs {1})")]
    Kind(String, String),
    #[error("comparison invalid: plant seeds differ ({0} vs {1})")]
    Seed(u64, u64),
    #[error("comparison invalid: runs cover different steps ({0} vs {1})")]
    Steps(String, String),
    #[error("comparison invalid: disturbance realizations differ at step {0}")]
    Disturbance(usize),
}

/// Differences are `learned − baseline`.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub steps: usize,
    pub cost_diff: Vec<f64>,
    pub state_diff: Vec<Vec<f64>>,
    pub baseline_total: f64,
    pub learned_total: f64,
    /// `(baseline_total − learned_total) / |baseline_total|`, positive when
    /// the learned controller is cheaper.
    pub relative_improvement: f64,
    /// Running value of the relative improvement after each step.
    pub cumulative_improvement: Vec<f64>,
    pub baseline_mean_state: Vec<f64>,
    pub learned_mean_state: Vec<f64>,
    pub mean_state_diff: Vec<f64>,
    pub baseline_violations: Vec<usize>,
    pub learned_violations: Vec<usize>,
}

pub fn compare_runs(baseline: &RunLog, learned: &RunLog) -> Result<Comparison, CompareError> {
    let (b, l) = (&baseline.meta, &learned.meta);
    if b.kind != l.kind {
        return Err(CompareError::Kind(b.kind.name().to_string(), l.kind.name().to_string()));
    }
    if b.plant_seed != l.plant_seed {
        return Err(CompareError::Seed(b.plant_seed, l.plant_seed));
    }
    let span = |log: &RunLog| format!("{}..{}", log.meta.start_step, log.meta.start_step + log.rows.len());
    if b.start_step != l.start_step || baseline.rows.len() != learned.rows.len() {
        return Err(CompareError::Steps(span(baseline), span(learned)));
    }
    for (rb, rl) in baseline.rows.iter().zip(&learned.rows) {
        if rb.disturbance != rl.disturbance {
            return Err(CompareError::Disturbance(rb.step));
        }
    }
    let n = baseline.rows.len();
    let cost_diff: Vec<f64> = baseline.rows.iter().zip(&learned.rows).map(|(rb, rl)| rl.cost - rb.cost).collect();
    let state_diff = baseline
        .rows
        .iter()
        .zip(&learned.rows)
        .map(|(rb, rl)| rl.s.iter().zip(&rb.s).map(|(x, y)| x - y).collect())
        .collect();
    let mut cumulative_improvement = Vec::with_capacity(n);
    let (mut cb, mut cl) = (0.0, 0.0);
    for (rb, rl) in baseline.rows.iter().zip(&learned.rows) {
        cb += rb.cost;
        cl += rl.cost;
        cumulative_improvement.push((cb - cl) / cb.abs());
    }
    let sb = baseline.summary();
    let sl = learned.summary();
    Ok(Comparison {
        steps: n,
        cost_diff,
        state_diff,
        baseline_total: sb.total_cost,
        learned_total: sl.total_cost,
        relative_improvement: cumulative_improvement.last().copied().unwrap_or(0.0),
        cumulative_improvement,
        mean_state_diff: sl.mean_state.iter().zip(&sb.mean_state).map(|(x, y)| x - y).collect(),
        baseline_mean_state: sb.mean_state,
        learned_mean_state: sl.mean_state,
        baseline_violations: sb.component_violations,
        learned_violations: sl.component_violations,
    })
}

impl Comparison {
    /// `step, cost_diff, ds0, ds1, ..., cumulative_improvement` rows.
    pub fn write_csv(&self, path: &std::path::Path, start_step: usize) -> anyhow::Result<()> {
        let nx = self.state_diff.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string(), "cost_diff".to_string()];
        header.extend((0..nx).map(|i| format!("ds{i}")));
        header.push("cumulative_improvement".to_string());
        w.write_record(&header)?;
        for k in 0..self.steps {
            let mut rec = vec![(start_step + k).to_string(), format!("{:?}", self.cost_diff[k])];
            rec.extend(self.state_diff[k].iter().map(|x| format!("{x:?}")));
            rec.push(format!("{:?}", self.cumulative_improvement[k]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "steps = {}", self.steps)?;
        writeln!(f, "baseline_total_cost = {:?}", self.baseline_total)?;
        writeln!(f, "learned_total_cost = {:?}", self.learned_total)?;
        writeln!(f, "relative_improvement = {:?}", self.relative_improvement)?;
        writeln!(f, "relative_improvement_percent = {:.4}", 100.0 * self.relative_improvement)?;
        writeln!(f, "baseline_mean_state = {:?}", self.baseline_mean_state)?;
        writeln!(f, "learned_mean_state = {:?}", self.learned_mean_state)?;
        writeln!(f, "mean_state_diff = {:?}", self.mean_state_diff)?;
        writeln!(f, "baseline_bound_violations = {:?}", self.baseline_violations)?;
        writeln!(f, "learned_bound_violations = {:?}", self.learned_violations)
    }
}
