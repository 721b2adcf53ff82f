use std::fs;
use std::path::Path;

use crate::dp::{compose_budget, MechanismParams};
use crate::error::{Error, Result};
use crate::fedsim::round::{RoundMetrics, Simulation};
use crate::fedsim::settings::{Strategy, TrainConfig};
use crate::output::{num, write_csv, METRICS_HEADER};

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub strategy: Strategy,
    pub dp_enabled: bool,
    pub mechanism: MechanismParams,
    pub initial_loss: f64,
    pub optimum_loss: f64,
    pub metrics: Vec<RoundMetrics>,
    /// `rounds * (eps_b + eps_a)` for private runs with at least one round.
    pub naive_epsilon: Option<f64>,
}

impl ExperimentOutcome {
    /// Loss after the last round, or the initial loss when no round ran.
    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(self.initial_loss, |m| m.mean_train_loss)
    }

    pub fn metrics_rows(&self, config: &TrainConfig) -> Vec<String> {
        let eps = num(config.dp.budget_b.epsilon());
        let clip = num(self.mechanism.clip_b.value());
        self.metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    m.round,
                    self.strategy,
                    self.dp_enabled,
                    eps,
                    clip,
                    num(m.mean_train_loss),
                    num(m.global_delta_norm),
                    num(m.expectation_diff),
                    num(m.total_variance),
                    num(m.wall_ms.unwrap_or(0.0)),
                )
            })
            .collect()
    }

    /// `key = value` lines describing the run.
    pub fn summary_lines(&self, config: &TrainConfig) -> Vec<String> {
        let mut out = vec![
            format!("strategy = {}", self.strategy),
            format!("dp_enabled = {}", self.dp_enabled),
            format!("rounds = {}", self.metrics.len()),
            format!("initial_loss = {}", num(self.initial_loss)),
            format!("final_loss = {}", num(self.final_loss())),
            format!("optimum_loss = {}", num(self.optimum_loss)),
        ];
        if self.dp_enabled {
            out.extend([
                format!("epsilon_b = {}", num(config.dp.budget_b.epsilon())),
                format!("epsilon_a = {}", num(config.dp.budget_a.epsilon())),
                format!("delta = {}", num(config.dp.budget_b.delta())),
                format!("clip_b = {}", num(self.mechanism.clip_b.value())),
                format!("clip_a = {}", num(self.mechanism.clip_a.value())),
                format!("sigma_b = {}", num(self.mechanism.sigma_b)),
                format!("sigma_a = {}", num(self.mechanism.sigma_a)),
            ]);
            if let Some(eps) = self.naive_epsilon {
                out.push(format!("naive_total_epsilon = {}", num(eps)));
            }
        }
        out
    }
}

/// Runs every round in memory.
pub fn simulate(config: &TrainConfig) -> Result<ExperimentOutcome> {
    let mut sim = Simulation::new(config.clone())?;
    let initial_loss = sim.mean_loss();
    let optimum_loss = sim.task.least_squares_loss()?;
    let mut metrics = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        metrics.push(sim.run_round()?);
    }
    let naive_epsilon = if config.dp_enabled && config.rounds > 0 {
        Some(compose_budget(
            config.dp.budget_b.epsilon(),
            config.dp.budget_a.epsilon(),
            config.rounds as u64,
        )?)
    } else {
        None
    };
    Ok(ExperimentOutcome {
        strategy: config.strategy,
        dp_enabled: config.dp_enabled,
        mechanism: sim.mechanism,
        initial_loss,
        optimum_loss,
        metrics,
        naive_epsilon,
    })
}

/// Runs the experiment and writes `metrics.csv` and `summary.txt` into
/// `run_dir` (created if needed).
pub fn run_experiment(config: &TrainConfig, run_dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let outcome = simulate(config)?;
    write_csv(&run_dir.join("metrics.csv"), METRICS_HEADER, &outcome.metrics_rows(config))?;
    let summary = run_dir.join("summary.txt");
    let mut text = outcome.summary_lines(config).join("\n");
    text.push('\n');
    fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
    Ok(outcome)
}
