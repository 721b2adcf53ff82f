//! Federated simulation over synthetic low-rank regression tasks.
//!
//! Each round samples clients, trains a fresh adapter per sampled client on
//! top of `W + delta_acc`, optionally clips and noises both factors, stacks
//! the released factors and hands the dense aggregated delta to the server
//! strategy. Clients then fold the new `delta_acc` in and start the next
//! round from a freshly initialised adapter, so ranks never grow.

pub mod experiment;
pub mod round;
pub mod server;
pub mod settings;
pub mod task;
pub mod train;

pub use experiment::{run_experiment, simulate, ExperimentOutcome};
pub use round::{sample_clients, ClientState, RoundMetrics, Simulation};
pub use server::ServerState;
pub use settings::{ClipMode, DpSettings, ServerHyper, Strategy, TrainConfig};
pub use task::{generate_task, Dataset, Record, SyntheticTask, TaskSpec};
pub use train::{local_train, loss_and_grads, Gradients, LocalRound, Proximal};

use crate::dp::PrivacyBudget;

impl Default for TrainConfig {
    /// Topology and schedule shape of the reference setup (20 clients, 2 per
    /// round, 200 rounds, 10 local epochs, batch 16, rank 32 with scale 64,
    /// epsilon 25, delta 1e-5) on a desk-sized synthetic task.
    fn default() -> Self {
        let budget = PrivacyBudget::new(25.0, 1e-5).expect("valid default budget");
        let task = TaskSpec {
            m: 32,
            n: 16,
            target_rank: 4,
            clients: 20,
            samples_per_client: 64,
            sigma_obs: 0.0,
            heterogeneity: 0.5,
        };
        Self {
            task,
            rounds: 200,
            sampled_per_round: 2,
            local_epochs: 10,
            batch_size: 16,
            lr_start: 0.05,
            lr_end: 0.005,
            dp_enabled: true,
            dp: DpSettings {
                budget_b: budget,
                budget_a: budget,
                clip: ClipMode::Calibrated {
                    quantile: 0.9,
                    multiplier: 1.0,
                },
            },
            ranks: vec![32; task.clients],
            lora_scale: 64.0,
            strategy: Strategy::FedAvg,
            hyper: ServerHyper::default(),
            prox_mu: 0.01,
            max_grad_norm: Some(1.0),
            seed: 0,
            parallel: true,
            record_timing: false,
        }
    }
}
