//! Client-side mini-batch training of the adapter factors.
//!
//! For a batch of `N` records the data loss is
//!
//! ```text
//! L = 1/(2N) sum_i ||(W_eff + s B A) x_i - y_i||^2
//! ```
//!
//! with `W_eff = W + delta_acc` frozen. Writing `G = (1/N) sum_i e_i x_i^T`
//! for the prediction errors `e_i`, the factor gradients are
//! `dL/dB = s G A^T` and `dL/dA = s B^T G`.
//!
//! FedProx adds `mu/2 (||B - B0||^2 + ||A - A0||^2)` around the round-start
//! factors. SCAFFOLD replaces `G` by `G + c - c_k`, which is the gradient of
//! the extra linear term `s <c - c_k, B A>`.

use crate::error::{Error, Result};
use crate::fedsim::task::Dataset;
use crate::lora::LoraAdapter;
use crate::matrix::Matrix;
use crate::random::{kind, RngStream};

/// Objective value and factor gradients at one point.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Data term only.
    pub loss: f64,
    /// Data term plus proximal and correction terms.
    pub objective: f64,
    pub grad_b: Matrix,
    pub grad_a: Matrix,
}

pub struct Proximal<'a> {
    pub mu: f64,
    pub b0: &'a Matrix,
    pub a0: &'a Matrix,
}

/// Loss and gradients of the adapter on a batch `(xs, ys)`.
pub fn loss_and_grads(
    w_eff: &Matrix,
    adapter: &LoraAdapter,
    xs: &Matrix,
    ys: &Matrix,
    prox: Option<&Proximal<'_>>,
    correction: Option<&Matrix>,
) -> Result<Gradients> {
    let s = adapter.scaling();
    let (b, a) = (adapter.b(), adapter.a());
    let batch = xs.rows() as f64;

    let ax = xs.matmul_t(a)?;
    let mut err = xs.matmul_t(w_eff)?;
    err.axpy(s, &ax.matmul_t(b)?)?;
    let err = err.sub(ys)?;
    let loss = err.frobenius_norm_sq() / (2.0 * batch);

    let mut g = err.t_matmul(xs)?.scale(1.0 / batch);
    let mut objective = loss;
    if let Some(c) = correction {
        g.add_assign(c)?;
        objective += s * b.matmul(a)?.dot(c)?;
    }
    let mut grad_b = g.matmul_t(a)?.scale(s);
    let mut grad_a = b.t_matmul(&g)?.scale(s);
    if let Some(p) = prox {
        let db = b.sub(p.b0)?;
        let da = a.sub(p.a0)?;
        grad_b.axpy(p.mu, &db)?;
        grad_a.axpy(p.mu, &da)?;
        objective += 0.5 * p.mu * (db.frobenius_norm_sq() + da.frobenius_norm_sq());
    }
    Ok(Gradients {
        loss,
        objective,
        grad_b,
        grad_a,
    })
}

/// Settings a client needs for one round of local work.
pub struct LocalRound<'a> {
    pub round: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub prox_mu: f64,
    /// Joint L2 cap on `(dL/dB, dL/dA)` per step; `None` disables it.
    pub max_grad_norm: Option<f64>,
    /// `c - c_k` for SCAFFOLD.
    pub correction: Option<&'a Matrix>,
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub adapter: LoraAdapter,
    pub steps: usize,
    /// Mean batch loss over the last epoch (NaN when no step was taken).
    pub last_epoch_loss: f64,
}

/// Runs `epochs` passes of shuffled mini-batch gradient descent starting from
/// `start`. Batch order comes from `rng`; `w_eff` is never modified.
pub fn local_train(
    client_id: usize,
    data: &Dataset,
    w_eff: &Matrix,
    start: LoraAdapter,
    settings: &LocalRound<'_>,
    rng: &mut RngStream,
) -> Result<LocalOutcome> {
    if data.input_dim() != w_eff.cols() || data.output_dim() != w_eff.rows() {
        return Err(Error::ClientMismatch {
            client_id,
            reason: format!(
                "data is {}->{} but model is {:?}",
                data.input_dim(),
                data.output_dim(),
                w_eff.shape()
            ),
        });
    }
    if start.dims() != w_eff.shape() {
        return Err(Error::ClientMismatch {
            client_id,
            reason: format!("adapter {:?} vs model {:?}", start.dims(), w_eff.shape()),
        });
    }
    let b0 = start.b().clone();
    let a0 = start.a().clone();
    let prox = (settings.prox_mu > 0.0).then_some(Proximal {
        mu: settings.prox_mu,
        b0: &b0,
        a0: &a0,
    });

    let mut adapter = start;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..settings.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(settings.batch_size) {
            let (xs, ys) = data.gather(chunk);
            let g = loss_and_grads(w_eff, &adapter, &xs, &ys, prox.as_ref(), settings.correction)?;
            if !g.objective.is_finite() {
                return Err(Error::NonFinite(format!(
                    "client {client_id}, round {}, epoch {}: training loss {}",
                    settings.round + 1,
                    epoch + 1,
                    g.objective
                )));
            }
            let step = settings.lr * grad_clip_factor(&g, settings.max_grad_norm);
            let mut b = adapter.b().clone();
            let mut a = adapter.a().clone();
            b.axpy(-step, &g.grad_b)?;
            a.axpy(-step, &g.grad_a)?;
            if !b.all_finite() || !a.all_finite() {
                return Err(Error::NonFinite(format!(
                    "client {client_id}, round {}, epoch {}: factor overflow",
                    settings.round + 1,
                    epoch + 1
                )));
            }
            adapter.set_factors(b, a);
            epoch_loss += g.loss;
            batches += 1;
            steps += 1;
        }
        last_epoch_loss = epoch_loss / batches.max(1) as f64;
    }
    Ok(LocalOutcome {
        adapter,
        steps,
        last_epoch_loss,
    })
}

fn grad_clip_factor(g: &Gradients, cap: Option<f64>) -> f64 {
    match cap {
        Some(cap) => {
            let norm = (g.grad_b.frobenius_norm_sq() + g.grad_a.frobenius_norm_sq()).sqrt();
            if norm > cap {
                cap / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

/// Stream for a client's batch order in a given round.
pub fn shuffle_stream(root: &RngStream, round: usize, client_id: usize) -> RngStream {
    root.derive(&[kind::ROUND, round as u64, client_id as u64, kind::SHUFFLE])
}
