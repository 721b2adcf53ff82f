//! The run configuration file: flat `key = value` lines, `#` starts a comment.
//!
//! ```text
//! # ten rounds of non-private FedProx
//! mode = run
//! experiment_name = prox-small
//! strategy = fedprox
//! rounds = 10
//! dp_enabled = false
//! ```
//!
//! Every key is optional; an empty file is the reference setup. Unknown
//! keys, repeated keys, malformed lines and out-of-range values are rejected
//! with the offending line number. [`RunConfig::snapshot`] prints every key
//! and re-parses to an equal value.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dp::PrivacyBudget;
use crate::error::{Error, Result};
use crate::fedsim::{ClipMode, DpSettings, ServerHyper, Strategy, TaskSpec, TrainConfig};

/// Threshold that a calibrated `clip` value is measured against: `clip = 0.1`
/// means "the calibration quantile itself", `clip = 1.0` ten times that.
pub const CLIP_REFERENCE: f64 = 0.1;

/// Seed override read between the config file and the `--seed` flag.
pub const SEED_ENV: &str = "FEDLORA_DP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Run,
    Verify,
    SweepEpsilon,
    SweepClip,
    SweepRank,
    SweepSize,
    Mia,
    Report,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Run,
        Mode::Verify,
        Mode::SweepEpsilon,
        Mode::SweepClip,
        Mode::SweepRank,
        Mode::SweepSize,
        Mode::Mia,
        Mode::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Verify => "verify",
            Mode::SweepEpsilon => "sweep_epsilon",
            Mode::SweepClip => "sweep_clip",
            Mode::SweepRank => "sweep_rank",
            Mode::SweepSize => "sweep_size",
            Mode::Mia => "mia",
            Mode::Report => "report",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("mode", format!("unknown mode '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipKind {
    Calibrated,
    Absolute,
}

/// Everything a `fedlora-dp` invocation needs. Field names are the config
/// keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub experiment_name: String,
    pub output_dir: PathBuf,

    // synthetic task
    pub m: usize,
    pub n: usize,
    pub target_rank: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub sigma_obs: f64,
    pub heterogeneity: f64,

    // schedule
    pub rounds: usize,
    pub sampled_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub max_grad_norm: Option<f64>,

    // adapters and server
    pub rank: usize,
    /// Per-client ranks; overrides `rank` when non-empty.
    pub ranks: Vec<usize>,
    pub lora_scale: f64,
    pub strategy: Strategy,
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub server_momentum: f64,
    pub prox_mu: f64,

    // privacy
    pub dp_enabled: bool,
    pub epsilon_b: f64,
    pub epsilon_a: f64,
    pub delta: f64,
    pub clip_mode: ClipKind,
    /// Absolute threshold, or relative to [`CLIP_REFERENCE`] when calibrated.
    pub clip_b: f64,
    pub clip_a: f64,
    pub clip_quantile: f64,

    pub seed: u64,
    pub parallel: bool,
    pub record_timing: bool,

    // sweeps
    pub sweep_epsilon: Vec<f64>,
    pub sweep_clip: Vec<f64>,
    pub sweep_rank: Vec<usize>,
    pub sweep_size: Vec<(usize, usize)>,

    // noise analysis
    pub noise_m: usize,
    pub noise_n: usize,
    pub noise_rank: usize,
    pub noise_sigma_b: f64,
    pub noise_sigma_a: f64,
    pub noise_norm_b: f64,
    pub noise_norm_a: f64,
    pub noise_draws: usize,

    // membership inference
    pub mia_epsilon: f64,
    pub mia_trials: usize,

    // verification
    pub verify_fast: bool,
    /// Multiplies the calibrated noise in the DP bound check. Anything other
    /// than 1 deliberately breaks the mechanism.
    pub verify_sigma_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Run,
            experiment_name: "default".into(),
            output_dir: PathBuf::from("runs"),
            m: 32,
            n: 16,
            target_rank: 4,
            clients: 20,
            samples_per_client: 64,
            sigma_obs: 0.0,
            heterogeneity: 0.5,
            rounds: 200,
            sampled_per_round: 2,
            local_epochs: 10,
            batch_size: 16,
            lr_start: 0.05,
            lr_end: 0.005,
            max_grad_norm: Some(1.0),
            rank: 32,
            ranks: Vec::new(),
            lora_scale: 64.0,
            strategy: Strategy::FedAvg,
            server_lr: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            server_momentum: 0.9,
            prox_mu: 0.01,
            dp_enabled: true,
            epsilon_b: 25.0,
            epsilon_a: 25.0,
            delta: 1e-5,
            clip_mode: ClipKind::Calibrated,
            clip_b: CLIP_REFERENCE,
            clip_a: CLIP_REFERENCE,
            clip_quantile: 0.9,
            seed: 0,
            parallel: true,
            record_timing: false,
            sweep_epsilon: vec![5.0, 10.0, 15.0, 25.0],
            sweep_clip: vec![0.1, 1.0],
            sweep_rank: vec![8, 16, 32, 64, 128],
            sweep_size: vec![(32, 32), (40, 40)],
            noise_m: 16,
            noise_n: 16,
            noise_rank: 32,
            noise_sigma_b: 1.0,
            noise_sigma_a: 1.0,
            noise_norm_b: 1.0,
            noise_norm_a: 1.0,
            noise_draws: 100_000,
            mia_epsilon: 1.0,
            mia_trials: 10_000,
            verify_fast: false,
            verify_sigma_scale: 1.0,
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_value(p.trim())).collect()
}

fn parse_sizes(v: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            let (a, b) = p
                .trim()
                .split_once('x')
                .ok_or_else(|| format!("size '{}' is not of the form MxN", p.trim()))?;
            Ok((parse_value(a.trim())?, parse_value(b.trim())?))
        })
        .collect()
}

fn positive(v: f64) -> std::result::Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a finite number > 0"))
    }
}

fn non_negative(v: f64) -> std::result::Result<f64, String> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a finite number >= 0"))
    }
}

fn at_least_one(v: usize) -> std::result::Result<usize, String> {
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be >= 1".into())
    }
}

fn unit_open(v: f64) -> std::result::Result<f64, String> {
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} must lie in [0, 1)"))
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "mode" => self.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "experiment_name" => {
                if v.is_empty() || v.split('/').any(|p| p.is_empty() || p == "..") {
                    return Err(format!("'{v}' is not a usable directory name"));
                }
                self.experiment_name = v.into()
            }
            "output_dir" => {
                if v.is_empty() {
                    return Err("must not be empty".into());
                }
                self.output_dir = v.into()
            }
            "m" => self.m = at_least_one(parse_value(v)?)?,
            "n" => self.n = at_least_one(parse_value(v)?)?,
            "target_rank" => self.target_rank = at_least_one(parse_value(v)?)?,
            "clients" => self.clients = at_least_one(parse_value(v)?)?,
            "samples_per_client" => self.samples_per_client = at_least_one(parse_value(v)?)?,
            "sigma_obs" => self.sigma_obs = non_negative(parse_value(v)?)?,
            "heterogeneity" => self.heterogeneity = non_negative(parse_value(v)?)?,
            "rounds" => self.rounds = parse_value(v)?,
            "sampled_per_round" => self.sampled_per_round = at_least_one(parse_value(v)?)?,
            "local_epochs" => self.local_epochs = parse_value(v)?,
            "batch_size" => self.batch_size = at_least_one(parse_value(v)?)?,
            "lr_start" => self.lr_start = positive(parse_value(v)?)?,
            "lr_end" => self.lr_end = positive(parse_value(v)?)?,
            "max_grad_norm" => {
                self.max_grad_norm = match v {
                    "none" | "off" => None,
                    _ => Some(positive(parse_value(v)?)?),
                }
            }
            "rank" => self.rank = at_least_one(parse_value(v)?)?,
            "ranks" => {
                let ranks: Vec<usize> = parse_list(v)?;
                if ranks.contains(&0) {
                    return Err("every rank must be >= 1".into());
                }
                self.ranks = ranks
            }
            "lora_scale" => self.lora_scale = positive(parse_value(v)?)?,
            "strategy" => self.strategy = v.parse().map_err(|e: Error| e.to_string())?,
            "server_lr" => self.server_lr = positive(parse_value(v)?)?,
            "beta1" => self.beta1 = unit_open(parse_value(v)?)?,
            "beta2" => self.beta2 = unit_open(parse_value(v)?)?,
            "tau" => self.tau = positive(parse_value(v)?)?,
            "server_momentum" => self.server_momentum = unit_open(parse_value(v)?)?,
            "prox_mu" => self.prox_mu = non_negative(parse_value(v)?)?,
            "dp_enabled" => self.dp_enabled = parse_bool(v)?,
            "epsilon" => {
                let e = positive(parse_value(v)?)?;
                self.epsilon_b = e;
                self.epsilon_a = e;
            }
            "epsilon_b" => self.epsilon_b = positive(parse_value(v)?)?,
            "epsilon_a" => self.epsilon_a = positive(parse_value(v)?)?,
            "delta" => {
                let d: f64 = parse_value(v)?;
                if !(d > 0.0 && d < 1.0) {
                    return Err(format!("{d} must lie in (0, 1)"));
                }
                self.delta = d
            }
            "clip_mode" => {
                self.clip_mode = match v {
                    "calibrated" => ClipKind::Calibrated,
                    "absolute" => ClipKind::Absolute,
                    _ => return Err(format!("expected calibrated or absolute, got '{v}'")),
                }
            }
            "clip" => {
                let c = positive(parse_value(v)?)?;
                self.clip_b = c;
                self.clip_a = c;
            }
            "clip_b" => self.clip_b = positive(parse_value(v)?)?,
            "clip_a" => self.clip_a = positive(parse_value(v)?)?,
            "clip_quantile" => {
                let q: f64 = parse_value(v)?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(format!("{q} must lie in [0, 1]"));
                }
                self.clip_quantile = q
            }
            "seed" => self.seed = parse_value(v)?,
            "parallel" => self.parallel = parse_bool(v)?,
            "record_timing" => self.record_timing = parse_bool(v)?,
            "sweep_epsilon" => self.sweep_epsilon = parse_list::<f64>(v)?.into_iter().map(positive).collect::<std::result::Result<_, _>>()?,
            "sweep_clip" => self.sweep_clip = parse_list::<f64>(v)?.into_iter().map(positive).collect::<std::result::Result<_, _>>()?,
            "sweep_rank" => self.sweep_rank = parse_list::<usize>(v)?.into_iter().map(at_least_one).collect::<std::result::Result<_, _>>()?,
            "sweep_size" => self.sweep_size = parse_sizes(v)?,
            "noise_m" => self.noise_m = at_least_one(parse_value(v)?)?,
            "noise_n" => self.noise_n = at_least_one(parse_value(v)?)?,
            "noise_rank" => self.noise_rank = at_least_one(parse_value(v)?)?,
            "noise_sigma_b" => self.noise_sigma_b = non_negative(parse_value(v)?)?,
            "noise_sigma_a" => self.noise_sigma_a = non_negative(parse_value(v)?)?,
            "noise_norm_b" => self.noise_norm_b = non_negative(parse_value(v)?)?,
            "noise_norm_a" => self.noise_norm_a = non_negative(parse_value(v)?)?,
            "noise_draws" => {
                let d: usize = parse_value(v)?;
                if d < 1000 {
                    return Err(format!("{d} must be >= 1000"));
                }
                self.noise_draws = d
            }
            "mia_epsilon" => self.mia_epsilon = positive(parse_value(v)?)?,
            "mia_trials" => {
                let t: usize = parse_value(v)?;
                if t < 100 {
                    return Err(format!("{t} must be >= 100"));
                }
                self.mia_trials = t
            }
            "verify_fast" => self.verify_fast = parse_bool(v)?,
            "verify_sigma_scale" => self.verify_sigma_scale = positive(parse_value(v)?)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses config text. `line` in errors is 1-based; 0 marks a problem
    /// spanning several keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected 'key = value', found '{content}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config {
                    line,
                    reason: "missing key before '='".into(),
                });
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(Error::Config {
                    line,
                    reason: format!("'{key}' already set on line {first}"),
                });
            }
            cfg.set(key, value).map_err(|reason| Error::Config {
                line,
                reason: format!("{key}: {reason}"),
            })?;
            seen.push((key.to_string(), line));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-key checks.
    pub fn validate(&self) -> Result<()> {
        let cross = |reason: String| Error::Config { line: 0, reason };
        if !self.ranks.is_empty() && self.ranks.len() != self.clients {
            return Err(cross(format!(
                "ranks lists {} values for {} clients",
                self.ranks.len(),
                self.clients
            )));
        }
        let sweep_empty = match self.mode {
            Mode::SweepEpsilon => self.sweep_epsilon.is_empty(),
            Mode::SweepClip => self.sweep_clip.is_empty(),
            Mode::SweepRank => self.sweep_rank.is_empty(),
            Mode::SweepSize => self.sweep_size.is_empty(),
            _ => false,
        };
        if sweep_empty {
            return Err(cross(format!("mode {} needs a non-empty sweep list", self.mode)));
        }
        if self.mode == Mode::SweepRank && self.sweep_rank.windows(2).any(|w| w[0] >= w[1]) {
            return Err(cross("sweep_rank must be strictly increasing".into()));
        }
        self.train_config()
            .validate()
            .map_err(|e| cross(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies the seed precedence `config < FEDLORA_DP_SEED < flag`.
    pub fn apply_seed_overrides(&mut self, env: Option<&str>, flag: Option<u64>) -> Result<()> {
        if let Some(v) = env {
            self.seed = v.trim().parse().map_err(|_| {
                Error::invalid("seed", format!("{SEED_ENV}='{v}' is not an unsigned integer"))
            })?;
        }
        if let Some(s) = flag {
            self.seed = s;
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.experiment_name)
    }

    pub fn client_ranks(&self) -> Vec<usize> {
        if self.ranks.is_empty() {
            vec![self.rank; self.clients]
        } else {
            self.ranks.clone()
        }
    }

    pub fn clip_mode(&self) -> ClipMode {
        match self.clip_mode {
            ClipKind::Absolute => ClipMode::Absolute {
                clip_b: self.clip_b,
                clip_a: self.clip_a,
            },
            // Both factors share one multiplier in calibrated mode.
            ClipKind::Calibrated => ClipMode::Calibrated {
                quantile: self.clip_quantile,
                multiplier: self.clip_b / CLIP_REFERENCE,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        // Ranges were checked when the keys were set.
        let budget = |e: f64| PrivacyBudget::new(e, self.delta).expect("checked by set");
        TrainConfig {
            task: TaskSpec {
                m: self.m,
                n: self.n,
                target_rank: self.target_rank,
                clients: self.clients,
                samples_per_client: self.samples_per_client,
                sigma_obs: self.sigma_obs,
                heterogeneity: self.heterogeneity,
            },
            rounds: self.rounds,
            sampled_per_round: self.sampled_per_round,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            dp_enabled: self.dp_enabled,
            dp: DpSettings {
                budget_b: budget(self.epsilon_b),
                budget_a: budget(self.epsilon_a),
                clip: self.clip_mode(),
            },
            ranks: self.client_ranks(),
            lora_scale: self.lora_scale,
            strategy: self.strategy,
            hyper: ServerHyper {
                server_lr: self.server_lr,
                beta1: self.beta1,
                beta2: self.beta2,
                tau: self.tau,
                momentum: self.server_momentum,
            },
            prox_mu: self.prox_mu,
            max_grad_norm: self.max_grad_norm,
            seed: self.seed,
            parallel: self.parallel,
            record_timing: self.record_timing,
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn snapshot(&self) -> String {
        let clip_mode = match self.clip_mode {
            ClipKind::Calibrated => "calibrated",
            ClipKind::Absolute => "absolute",
        };
        let sizes = self
            .sweep_size
            .iter()
            .map(|(m, n)| format!("{m}x{n}"))
            .collect::<Vec<_>>()
            .join(", ");
        let entries: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("experiment_name", self.experiment_name.clone()),
            ("output_dir", self.output_dir.display().to_string()),
            ("m", self.m.to_string()),
            ("n", self.n.to_string()),
            ("target_rank", self.target_rank.to_string()),
            ("clients", self.clients.to_string()),
            ("samples_per_client", self.samples_per_client.to_string()),
            ("sigma_obs", self.sigma_obs.to_string()),
            ("heterogeneity", self.heterogeneity.to_string()),
            ("rounds", self.rounds.to_string()),
            ("sampled_per_round", self.sampled_per_round.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_start", self.lr_start.to_string()),
            ("lr_end", self.lr_end.to_string()),
            ("max_grad_norm", self.max_grad_norm.map_or("none".into(), |g| g.to_string())),
            ("rank", self.rank.to_string()),
            ("ranks", join(&self.ranks)),
            ("lora_scale", self.lora_scale.to_string()),
            ("strategy", self.strategy.to_string()),
            ("server_lr", self.server_lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("tau", self.tau.to_string()),
            ("server_momentum", self.server_momentum.to_string()),
            ("prox_mu", self.prox_mu.to_string()),
            ("dp_enabled", self.dp_enabled.to_string()),
            ("epsilon_b", self.epsilon_b.to_string()),
            ("epsilon_a", self.epsilon_a.to_string()),
            ("delta", self.delta.to_string()),
            ("clip_mode", clip_mode.into()),
            ("clip_b", self.clip_b.to_string()),
            ("clip_a", self.clip_a.to_string()),
            ("clip_quantile", self.clip_quantile.to_string()),
            ("seed", self.seed.to_string()),
            ("parallel", self.parallel.to_string()),
            ("record_timing", self.record_timing.to_string()),
            ("sweep_epsilon", join(&self.sweep_epsilon)),
            ("sweep_clip", join(&self.sweep_clip)),
            ("sweep_rank", join(&self.sweep_rank)),
            ("sweep_size", sizes),
            ("noise_m", self.noise_m.to_string()),
            ("noise_n", self.noise_n.to_string()),
            ("noise_rank", self.noise_rank.to_string()),
            ("noise_sigma_b", self.noise_sigma_b.to_string()),
            ("noise_sigma_a", self.noise_sigma_a.to_string()),
            ("noise_norm_b", self.noise_norm_b.to_string()),
            ("noise_norm_a", self.noise_norm_a.to_string()),
            ("noise_draws", self.noise_draws.to_string()),
            ("mia_epsilon", self.mia_epsilon.to_string()),
            ("mia_trials", self.mia_trials.to_string()),
            ("verify_fast", self.verify_fast.to_string()),
            ("verify_sigma_scale", self.verify_sigma_scale.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of [`snapshot`](Self::snapshot).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let t = cfg.train_config();
        assert_eq!((t.clients(), t.sampled_per_round, t.rounds, t.local_epochs, t.batch_size), (20, 2, 200, 10, 16));
        assert_eq!(t.ranks, vec![32; 20]);
        assert_eq!(t.lora_scale, 64.0);
        assert_eq!(t.dp.budget_b.epsilon(), 25.0);
        assert_eq!(t.dp.budget_b.delta(), 1e-5);
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = RunConfig::parse("# c\n\nepsilon = -1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{msg}");
        assert!(msg.contains("epsilon"), "{msg}");

        let err = RunConfig::parse("rounds = 2\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
        assert!(err.to_string().contains("bogus"));

        assert!(matches!(RunConfig::parse("rounds 2").unwrap_err(), Error::Config { line: 1, .. }));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2").unwrap_err(),
            Error::Config { line: 2, .. }
        ));
        assert!(matches!(
            RunConfig::parse("clients = 3\nsampled_per_round = 4").unwrap_err(),
            Error::Config { line: 0, .. }
        ));
    }

    #[test]
    fn topology_keys() {
        let cfg = RunConfig::parse("rounds = 200\nclients = 20 # K\nsampled_per_round = 2\n").unwrap();
        assert_eq!((cfg.rounds, cfg.clients, cfg.sampled_per_round), (200, 20, 2));
    }

    #[test]
    fn snapshot_round_trips() {
        let text = "mode = sweep_size\nstrategy = fedyogi\nranks = 1, 2, 3\nclients = 3\nepsilon_b = 0.3\n\
                    max_grad_norm = none\nsweep_size = 4x8, 16x2\nclip_mode = absolute\nclip = 0.7\n\
                    lr_start = 0.1234567890123\nexperiment_name = a/b\n";
        let cfg = RunConfig::parse(text).unwrap();
        let back = RunConfig::parse(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::parse("seed = 1").unwrap();
        cfg.apply_seed_overrides(None, None).unwrap();
        assert_eq!(cfg.seed, 1);
        cfg.apply_seed_overrides(Some("2"), None).unwrap();
        assert_eq!(cfg.seed, 2);
        cfg.apply_seed_overrides(Some("2"), Some(3)).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(cfg.apply_seed_overrides(Some("x"), None).is_err());
    }

    #[test]
    fn calibrated_clip_is_relative_to_reference() {
        let cfg = RunConfig::parse("clip = 1.0").unwrap();
        assert_eq!(
            cfg.clip_mode(),
            ClipMode::Calibrated {
                quantile: 0.9,
                multiplier: 10.0
            }
        );
    }
}
