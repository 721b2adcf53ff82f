//! The federated round loop.

use std::time::Instant;

use rayon::prelude::*;

use crate::dp::{privatize, ClipThreshold, MechanismParams};
use crate::error::{Error, Result};
use crate::fedsim::server::ServerState;
use crate::fedsim::settings::{ClipMode, Strategy, TrainConfig};
use crate::fedsim::task::{generate_task, Dataset, SyntheticTask};
use crate::fedsim::train::{local_train, shuffle_stream, LocalRound};
use crate::lora::{aggregate_stack, global_delta, init_adapter, ClientUpdate};
use crate::matrix::Matrix;
use crate::noise::{exact_total_variance, NoiseModel};
use crate::random::{kind, RngStream};

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub rank: usize,
    pub prox_mu: f64,
    /// SCAFFOLD client control variate `c_k`, dense `m x n`.
    pub control_variate: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round number.
    pub round: usize,
    pub sampled: Vec<usize>,
    pub mean_train_loss: f64,
    pub client_losses: Vec<f64>,
    pub global_delta_norm: f64,
    /// Mean entry of the realised noise in the aggregated delta.
    pub expectation_diff: f64,
    /// Closed-form total variance of the aggregated delta given the round's
    /// clipped factors and noise scales.
    pub total_variance: f64,
    /// Only recorded when `TrainConfig::record_timing` is set.
    pub wall_ms: Option<f64>,
}

struct ClientResult {
    id: usize,
    clipped_b: Matrix,
    clipped_a: Matrix,
    b_tilde: Matrix,
    a_tilde: Matrix,
    steps: usize,
    scale: f64,
    samples: usize,
}

/// A running experiment: task, clients, server and resolved mechanism.
pub struct Simulation {
    pub config: TrainConfig,
    pub task: SyntheticTask,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub mechanism: MechanismParams,
    root: RngStream,
}

impl Simulation {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let task = generate_task(&config.task, config.seed)?;
        Self::with_task(config, task)
    }

    pub fn with_task(config: TrainConfig, task: SyntheticTask) -> Result<Self> {
        config.validate()?;
        if task.datasets.len() != config.clients() {
            return Err(Error::invalid(
                "task",
                format!("{} datasets for {} clients", task.datasets.len(), config.clients()),
            ));
        }
        let (m, n) = task.dims();
        let prox_mu = if config.strategy == Strategy::FedProx { config.prox_mu } else { 0.0 };
        let clients = task
            .datasets
            .iter()
            .enumerate()
            .map(|(id, data)| ClientState {
                id,
                data: data.clone(),
                rank: config.ranks[id],
                prox_mu,
                control_variate: Matrix::zeros(m, n),
            })
            .collect::<Vec<_>>();
        let root = RngStream::root(config.seed);
        let server = ServerState::new(task.base.clone(), config.strategy, config.hyper);
        let mut sim = Self {
            mechanism: MechanismParams::disabled(),
            config,
            task,
            clients,
            server,
            root,
        };
        if sim.config.dp_enabled {
            sim.mechanism = sim.resolve_mechanism()?;
        }
        Ok(sim)
    }

    fn resolve_mechanism(&self) -> Result<MechanismParams> {
        let dp = self.config.dp;
        let (clip_b, clip_a) = match dp.clip {
            ClipMode::Absolute { clip_b, clip_a } => (clip_b, clip_a),
            ClipMode::Calibrated { quantile, multiplier } => {
                let (b_norms, a_norms) = self.calibration_norms()?;
                (
                    quantile_of(&b_norms, quantile) * multiplier,
                    quantile_of(&a_norms, quantile) * multiplier,
                )
            }
        };
        MechanismParams::calibrated(
            ClipThreshold::new(clip_b)?,
            ClipThreshold::new(clip_a)?,
            dp.budget_b,
            dp.budget_a,
        )
    }

    /// Factor norms after one non-private round of local training on every
    /// client, starting from the untouched base.
    pub fn calibration_norms(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.task.base.weight();
        let (m, n) = self.task.dims();
        let settings = LocalRound {
            round: 0,
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            lr: self.config.lr_start,
            prox_mu: 0.0,
            max_grad_norm: self.config.max_grad_norm,
            correction: None,
        };
        let mut b_norms = Vec::with_capacity(self.clients.len());
        let mut a_norms = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let stream = self.root.derive(&[kind::CALIBRATION, c.id as u64]);
            let start = init_adapter(m, n, c.rank, self.config.lora_scale, &mut stream.derive(&[kind::INIT]))?;
            let out = local_train(c.id, &c.data, w, start, &settings, &mut stream.derive(&[kind::SHUFFLE]))?;
            b_norms.push(out.adapter.b().frobenius_norm());
            a_norms.push(out.adapter.a().frobenius_norm());
        }
        Ok((b_norms, a_norms))
    }

    pub fn mean_loss(&self) -> f64 {
        self.task.mean_loss(&self.server.delta_acc)
    }

    /// Clients sampled in round `t` (0-based), ascending.
    pub fn sample_clients(&self, round: usize) -> Vec<usize> {
        sample_clients(&self.root, round, self.config.clients(), self.config.sampled_per_round)
    }

    /// One full round: sample, train, privatize, stack, apply, evaluate.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let started = Instant::now();
        let t = self.server.round_index;
        let sampled = self.sample_clients(t);
        if sampled.is_empty() {
            return Err(Error::Empty("client sample"));
        }
        let w_eff = self.server.effective_weight();
        let lr = self.config.learning_rate(t);

        let work = |id: usize| self.client_round(id, t, lr, &w_eff);
        let results: Vec<ClientResult> = if self.config.parallel {
            sampled.par_iter().map(|&id| work(id)).collect::<Result<_>>()?
        } else {
            sampled.iter().map(|&id| work(id)).collect::<Result<_>>()?
        };

        let total: usize = results.iter().map(|r| r.samples).sum();
        let weight = |r: &ClientResult| r.samples as f64 / total as f64;
        let released = results
            .iter()
            .map(|r| Ok(ClientUpdate::new(r.id, r.b_tilde.clone(), r.a_tilde.clone(), weight(r))?.with_scale(r.scale)))
            .collect::<Result<Vec<_>>>()?;
        let delta = global_delta(&aggregate_stack(&released)?);

        let (expectation_diff, total_variance) = if self.config.dp_enabled {
            let clean = results
                .iter()
                .map(|r| Ok(ClientUpdate::new(r.id, r.clipped_b.clone(), r.clipped_a.clone(), weight(r))?.with_scale(r.scale)))
                .collect::<Result<Vec<_>>>()?;
            let clean_delta = global_delta(&aggregate_stack(&clean)?);
            let model = NoiseModel::new(self.mechanism.sigma_b, self.mechanism.sigma_a)?;
            let mut var = 0.0;
            for r in &results {
                let f = weight(r) * r.scale;
                var += f * f * exact_total_variance(&r.clipped_b, &r.clipped_a, &model)?;
            }
            (delta.sub(&clean_delta)?.mean(), var)
        } else {
            (0.0, 0.0)
        };

        if self.config.strategy == Strategy::Scaffold {
            self.update_control_variates(&results, lr)?;
        }
        self.server.apply(&delta)?;
        if !self.server.delta_acc.all_finite() {
            return Err(Error::NonFinite(format!("round {}: accumulated delta", t + 1)));
        }

        let client_losses = self.task.client_losses(&self.server.delta_acc);
        let mean_train_loss = client_losses.iter().sum::<f64>() / client_losses.len() as f64;
        if !mean_train_loss.is_finite() {
            return Err(Error::NonFinite(format!("round {}: mean loss {mean_train_loss}", t + 1)));
        }
        Ok(RoundMetrics {
            round: t + 1,
            sampled,
            mean_train_loss,
            client_losses,
            global_delta_norm: delta.frobenius_norm(),
            expectation_diff,
            total_variance,
            wall_ms: self
                .config
                .record_timing
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        })
    }

    fn client_round(&self, id: usize, t: usize, lr: f64, w_eff: &Matrix) -> Result<ClientResult> {
        let client = &self.clients[id];
        let (m, n) = self.task.dims();
        let path = |k: u64| [kind::ROUND, t as u64, id as u64, k];
        let start = init_adapter(m, n, client.rank, self.config.lora_scale, &mut self.root.derive(&path(kind::INIT)))?;
        let correction = if self.config.strategy == Strategy::Scaffold {
            Some(self.server.server_c.sub(&client.control_variate)?)
        } else {
            None
        };
        let settings = LocalRound {
            round: t,
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            lr,
            prox_mu: client.prox_mu,
            max_grad_norm: self.config.max_grad_norm,
            correction: correction.as_ref(),
        };
        let out = local_train(id, &client.data, w_eff, start, &settings, &mut shuffle_stream(&self.root, t, id))?;
        let scale = out.adapter.scaling();
        let (b, a) = out.adapter.into_factors();
        let (clipped_b, clipped_a, b_tilde, a_tilde) = if self.config.dp_enabled {
            let mech = &self.mechanism;
            let clipped_b = crate::dp::clip_frobenius(&b, mech.clip_b)?;
            let clipped_a = crate::dp::clip_frobenius(&a, mech.clip_a)?;
            let b_tilde = privatize(&b, mech.clip_b, mech.sigma_b, &mut self.root.derive(&path(kind::NOISE_B)))?;
            let a_tilde = privatize(&a, mech.clip_a, mech.sigma_a, &mut self.root.derive(&path(kind::NOISE_A)))?;
            (clipped_b, clipped_a, b_tilde, a_tilde)
        } else {
            (b.clone(), a.clone(), b, a)
        };
        Ok(ClientResult {
            id,
            clipped_b,
            clipped_a,
            b_tilde,
            a_tilde,
            steps: out.steps,
            scale,
            samples: client.data.len(),
        })
    }

    /// SCAFFOLD option-II refresh, on dense deltas. The dense step size of
    /// a fresh adapter is about `lr * s^2`, which normalises the update.
    fn update_control_variates(&mut self, results: &[ClientResult], lr: f64) -> Result<()> {
        let k = self.clients.len() as f64;
        let mut server_shift = Matrix::zeros(self.server.server_c.rows(), self.server.server_c.cols());
        for r in results {
            if r.steps == 0 {
                continue;
            }
            let client_delta = r.b_tilde.matmul(&r.a_tilde)?.scale(r.scale);
            let denom = r.steps as f64 * lr * r.scale * r.scale;
            let old = &self.clients[r.id].control_variate;
            let mut new = old.sub(&self.server.server_c)?;
            new.axpy(-1.0 / denom, &client_delta)?;
            server_shift.add_assign(&new.sub(old)?)?;
            self.clients[r.id].control_variate = new;
        }
        self.server.server_c.axpy(1.0 / k, &server_shift)?;
        Ok(())
    }
}

/// `k` of `clients` drawn uniformly without replacement for round `round`.
pub fn sample_clients(root: &RngStream, round: usize, clients: usize, k: usize) -> Vec<usize> {
    root.derive(&[kind::ROUND, round as u64, kind::SAMPLE_CLIENTS])
        .choose_distinct(clients, k)
}

/// Linear-interpolation quantile (type 7).
pub fn quantile_of(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile_of(&v, 0.0), 1.0);
        assert_eq!(quantile_of(&v, 1.0), 4.0);
        assert_eq!(quantile_of(&v, 0.5), 2.5);
        assert!((quantile_of(&(0..11).map(f64::from).collect::<Vec<_>>(), 0.9) - 9.0).abs() < 1e-12);
    }
}
