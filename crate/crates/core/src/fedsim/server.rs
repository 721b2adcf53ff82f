//! Server state and the seven update rules.
//!
//! Every strategy consumes the round's dense aggregated delta (the
//! pseudo-gradient) and folds a step into `delta_acc`:
//!
//! | strategy              | step                                            |
//! |-----------------------|-------------------------------------------------|
//! | fedavg/fedprox/scaffold | `delta`                                       |
//! | fedavgm               | `v = beta v + delta`, step `eta v`              |
//! | fedadagrad            | `m = b1 m + (1-b1) delta`, `v += delta^2`       |
//! | fedyogi               | `v -= (1-b2) delta^2 sign(v - delta^2)`         |
//! | fedadam               | `v = b2 v + (1-b2) delta^2`                     |
//!
//! The adaptive rules step by `eta m / (sqrt(v) + tau)` elementwise.

use crate::error::Result;
use crate::fedsim::settings::{ServerHyper, Strategy};
use crate::lora::FrozenBase;
use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct ServerState {
    pub base: FrozenBase,
    pub delta_acc: Matrix,
    pub strategy: Strategy,
    pub momentum: Matrix,
    pub second_moment: Matrix,
    /// SCAFFOLD server control variate.
    pub server_c: Matrix,
    pub round_index: usize,
    pub hyper: ServerHyper,
}

impl ServerState {
    pub fn new(base: FrozenBase, strategy: Strategy, hyper: ServerHyper) -> Self {
        let (m, n) = base.shape();
        Self {
            base,
            delta_acc: Matrix::zeros(m, n),
            strategy,
            momentum: Matrix::zeros(m, n),
            second_moment: Matrix::zeros(m, n),
            server_c: Matrix::zeros(m, n),
            round_index: 0,
            hyper,
        }
    }

    /// `W + delta_acc`.
    pub fn effective_weight(&self) -> Matrix {
        self.base
            .weight()
            .add(&self.delta_acc)
            .expect("delta_acc keeps the base shape")
    }

    /// Folds the round's aggregated delta into the accumulated delta.
    pub fn apply(&mut self, delta: &Matrix) -> Result<()> {
        let h = self.hyper;
        match self.strategy {
            Strategy::FedAvg | Strategy::FedProx | Strategy::Scaffold => {
                self.delta_acc.add_assign(delta)?;
            }
            Strategy::FedAvgM => {
                self.momentum = self.momentum.scale(h.momentum);
                self.momentum.add_assign(delta)?;
                self.delta_acc.axpy(h.server_lr, &self.momentum)?;
            }
            Strategy::FedAdagrad | Strategy::FedYogi | Strategy::FedAdam => {
                self.momentum = self
                    .momentum
                    .zip_with(delta, "first moment", |m, d| h.beta1 * m + (1.0 - h.beta1) * d)?;
                self.second_moment = match self.strategy {
                    Strategy::FedAdagrad => self.second_moment.zip_with(delta, "adagrad", |v, d| v + d * d)?,
                    Strategy::FedYogi => self.second_moment.zip_with(delta, "yogi", |v, d| {
                        let d2 = d * d;
                        v - (1.0 - h.beta2) * d2 * sign(v - d2)
                    })?,
                    _ => self
                        .second_moment
                        .zip_with(delta, "adam", |v, d| h.beta2 * v + (1.0 - h.beta2) * d * d)?,
                };
                let step = self
                    .momentum
                    .zip_with(&self.second_moment, "adaptive step", |m, v| {
                        h.server_lr * m / (v.max(0.0).sqrt() + h.tau)
                    })?;
                self.delta_acc.add_assign(&step)?;
            }
        }
        self.round_index += 1;
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server(strategy: Strategy) -> ServerState {
        ServerState::new(FrozenBase::new(Matrix::zeros(1, 2)), strategy, ServerHyper::default())
    }

    fn delta() -> Matrix {
        Matrix::from_rows(&[[0.5, -2.0]]).unwrap()
    }

    #[test]
    fn plain_strategies_add_delta() {
        for st in [Strategy::FedAvg, Strategy::FedProx, Strategy::Scaffold] {
            let mut s = server(st);
            s.apply(&delta()).unwrap();
            s.apply(&delta()).unwrap();
            assert_eq!(s.delta_acc, delta().scale(2.0));
            assert_eq!(s.round_index, 2);
        }
    }

    #[test]
    fn zero_delta_leaves_fedavg_unchanged() {
        let mut s = server(Strategy::FedAvg);
        s.apply(&delta()).unwrap();
        let before = s.delta_acc.clone();
        s.apply(&Matrix::zeros(1, 2)).unwrap();
        assert_eq!(s.delta_acc, before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = server(Strategy::FedAvgM);
        s.apply(&delta()).unwrap();
        assert_eq!(s.delta_acc, delta().scale(0.1));
        s.apply(&delta()).unwrap();
        // v = 0.9 d + d = 1.9 d; acc = 0.1 d + 0.19 d
        let expect = delta().scale(0.1 + 0.1 * 1.9);
        assert!(s.delta_acc.sub(&expect).unwrap().frobenius_norm() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let mut s = server(Strategy::FedAdam);
        s.apply(&delta()).unwrap();
        // m = 0.1 d, v = 0.01 d^2 -> step = 0.1 * 0.1 d / (0.1 |d| + tau)
        for (got, d) in s.delta_acc.as_slice().iter().zip(delta().as_slice()) {
            let expect = 0.1 * 0.1 * d / (0.1 * d.abs() + 1e-3);
            assert!((got - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn yogi_and_adagrad_second_moments() {
        let mut y = server(Strategy::FedYogi);
        y.apply(&delta()).unwrap();
        let d2 = delta().map(|v| v * v);
        assert!(y.second_moment.sub(&d2.scale(0.01)).unwrap().frobenius_norm() < 1e-15);
        let mut a = server(Strategy::FedAdagrad);
        a.apply(&delta()).unwrap();
        a.apply(&delta()).unwrap();
        assert_eq!(a.second_moment, d2.scale(2.0));
    }
}
