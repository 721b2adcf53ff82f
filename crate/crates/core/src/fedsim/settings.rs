use std::fmt;
use std::str::FromStr;

use crate::dp::PrivacyBudget;
use crate::error::{Error, Result};
use crate::fedsim::task::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    FedAvg,
    FedProx,
    Scaffold,
    FedAvgM,
    FedAdagrad,
    FedYogi,
    FedAdam,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::Scaffold,
        Strategy::FedAvgM,
        Strategy::FedAdagrad,
        Strategy::FedYogi,
        Strategy::FedAdam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::Scaffold => "scaffold",
            Strategy::FedAvgM => "fedavgm",
            Strategy::FedAdagrad => "fedadagrad",
            Strategy::FedYogi => "fedyogi",
            Strategy::FedAdam => "fedadam",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy '{s}'")))
    }
}

/// Server-side optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServerHyper {
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub momentum: f64,
}

impl Default for ServerHyper {
    fn default() -> Self {
        Self {
            server_lr: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClipMode {
    /// Fixed thresholds for `B` and `A`.
    Absolute { clip_b: f64, clip_a: f64 },
    /// Thresholds are `quantile` of the factor norms seen in a short
    /// non-private calibration pass, times `multiplier`.
    Calibrated { quantile: f64, multiplier: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpSettings {
    pub budget_b: PrivacyBudget,
    pub budget_a: PrivacyBudget,
    pub clip: ClipMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub rounds: usize,
    pub sampled_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub dp_enabled: bool,
    pub dp: DpSettings,
    /// One rank per client.
    pub ranks: Vec<usize>,
    pub lora_scale: f64,
    pub strategy: Strategy,
    pub hyper: ServerHyper,
    /// FedProx coefficient; only used by [`Strategy::FedProx`].
    pub prox_mu: f64,
    /// Local optimizer gradient-norm cap (not part of the privacy mechanism).
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    /// Train sampled clients on the rayon pool.
    pub parallel: bool,
    /// Record per-round wall time. Off by default so metrics stay
    /// byte-reproducible.
    pub record_timing: bool,
}

impl TrainConfig {
    pub fn clients(&self) -> usize {
        self.task.clients
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clients();
        if self.sampled_per_round == 0 || self.sampled_per_round > k {
            return Err(Error::invalid(
                "sampled_per_round",
                format!("{} must lie in 1..={k}", self.sampled_per_round),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr_end > 0.0) || !(self.lr_start >= self.lr_end) || !self.lr_start.is_finite() {
            return Err(Error::invalid(
                "learning rate",
                format!("need lr_start ({}) >= lr_end ({}) > 0", self.lr_start, self.lr_end),
            ));
        }
        if self.ranks.len() != k {
            return Err(Error::invalid(
                "ranks",
                format!("{} ranks for {k} clients", self.ranks.len()),
            ));
        }
        if self.ranks.contains(&0) {
            return Err(Error::invalid("ranks", "every rank must be >= 1"));
        }
        if !(self.lora_scale > 0.0) {
            return Err(Error::invalid("lora_scale", "must be > 0"));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return Err(Error::invalid("max_grad_norm", format!("{g} must be > 0")));
            }
        }
        if !(self.prox_mu >= 0.0) {
            return Err(Error::invalid("prox_mu", "must be >= 0"));
        }
        let h = &self.hyper;
        if !(h.server_lr > 0.0) || !(h.tau > 0.0) {
            return Err(Error::invalid("server hyper", "server_lr and tau must be > 0"));
        }
        for (name, v) in [("beta1", h.beta1), ("beta2", h.beta2), ("momentum", h.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid("server hyper", format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        match self.dp.clip {
            ClipMode::Absolute { clip_b, clip_a } => {
                if !(clip_b > 0.0) || !(clip_a > 0.0) {
                    return Err(Error::invalid("clip", "absolute thresholds must be > 0"));
                }
            }
            ClipMode::Calibrated { quantile, multiplier } => {
                if !(0.0..=1.0).contains(&quantile) || !(multiplier > 0.0) {
                    return Err(Error::invalid(
                        "clip",
                        format!("quantile {quantile} must lie in [0, 1], multiplier {multiplier} > 0"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Cosine decay from `lr_start` (round 0) to `lr_end` (last round).
    pub fn learning_rate(&self, round: usize) -> f64 {
        if self.rounds <= 1 {
            return self.lr_start;
        }
        let progress = round.min(self.rounds - 1) as f64 / (self.rounds - 1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fedsgd".parse::<Strategy>().is_err());
        assert_eq!("FedAdam".parse::<Strategy>().unwrap(), Strategy::FedAdam);
    }
}
