//! Membership inference against a single client's released factors.
//!
//! The game: the challenger holds two neighbouring datasets `d` and `d'`
//! (same size, one record replaced), flips a fair coin `b`, trains one
//! client's adapter on `d` (b = 0) or `d'` (b = 1), privatizes both factors
//! and hands `(B~, A~)` to the attacker. The attacker knows the un-noised
//! releases `mu0` and `mu1` for both datasets and scores the observation by
//! projecting onto `mu1 - mu0`.
//!
//! Local training is deterministic given [`GameConfig::training_seed`], so
//! the clean releases are computed once and every trial only draws fresh
//! noise.
//!
//! A ROC curve over all score thresholds then gives an empirical trade-off
//! curve that an `(epsilon, delta)`-DP mechanism must keep below
//! `tpr <= e^epsilon * fpr + delta`.

use rayon::prelude::*;

use crate::dp::{clip_frobenius, privatize, ClipThreshold, MechanismParams, PrivacyBudget};
use crate::error::{Error, Result};
use crate::fedsim::task::{Dataset, Record};
use crate::fedsim::train::{local_train, LocalRound};
use crate::lora::{init_adapter, ClientUpdate};
use crate::matrix::Matrix;
use crate::random::{kind, RngStream};

/// Two datasets differing in exactly one record.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborPair {
    pub d: Dataset,
    pub d_prime: Dataset,
    pub differing_index: usize,
}

/// Replace-one neighbour of `dataset` at `index`.
pub fn make_neighbors(dataset: &Dataset, index: usize, replacement: &Record) -> Result<NeighborPair> {
    if index >= dataset.len() {
        return Err(Error::invalid(
            "differing index",
            format!("{index} out of range for {} records", dataset.len()),
        ));
    }
    if dataset.record(index) == *replacement {
        return Err(Error::invalid(
            "replacement record",
            "identical to the original, the pair would be degenerate",
        ));
    }
    Ok(NeighborPair {
        d: dataset.clone(),
        d_prime: dataset.with_record(index, replacement)?,
        differing_index: index,
    })
}

/// Outlier replacement for `record`: input scaled by `factor`, target placed
/// so that the residual under `w_eff` is `-factor` times the original one.
pub fn adversarial_record(record: &Record, w_eff: &Matrix, factor: f64) -> Result<Record> {
    let x: Vec<f64> = record.x.iter().map(|v| v * factor).collect();
    let wx = w_eff.matmul(&Matrix::column(&x)?)?;
    if wx.rows() != record.y.len() {
        return Err(Error::ShapeMismatch {
            op: "adversarial_record",
            left: w_eff.shape(),
            right: (record.y.len(), record.x.len()),
        });
    }
    let y = wx
        .as_slice()
        .iter()
        .zip(&record.y)
        .map(|(p, y)| 2.0 * p - factor * y)
        .collect();
    Ok(Record { x, y })
}

/// Everything the challenger needs to run the mechanism.
#[derive(Clone, Debug)]
pub struct GameConfig {
    /// Frozen weight the client trains against.
    pub w_eff: Matrix,
    pub rank: usize,
    pub lora_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub mechanism: MechanismParams,
    /// Seeds the adapter initialisation and batch order, shared by both
    /// datasets and all trials.
    pub training_seed: u64,
}

impl GameConfig {
    pub fn with_mechanism(&self, mechanism: MechanismParams) -> Self {
        Self {
            mechanism,
            ..self.clone()
        }
    }
}

/// Locally trained factors before clipping and noise.
pub fn train_factors(data: &Dataset, cfg: &GameConfig) -> Result<(Matrix, Matrix)> {
    let (m, n) = cfg.w_eff.shape();
    let stream = RngStream::new(cfg.training_seed, &[kind::TRIAL]);
    let start = init_adapter(m, n, cfg.rank, cfg.lora_scale, &mut stream.derive(&[kind::INIT]))?;
    let settings = LocalRound {
        round: 0,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        prox_mu: 0.0,
        max_grad_norm: cfg.max_grad_norm,
        correction: None,
    };
    let out = local_train(0, data, &cfg.w_eff, start, &settings, &mut stream.derive(&[kind::SHUFFLE]))?;
    Ok(out.adapter.into_factors())
}

/// The attacker's knowledge: both clean releases.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub mu0: (Matrix, Matrix),
    pub mu1: (Matrix, Matrix),
    direction: Vec<f64>,
    midpoint: Vec<f64>,
}

impl Reference {
    pub fn new(mu0: (Matrix, Matrix), mu1: (Matrix, Matrix)) -> Result<Self> {
        let f0 = flatten(&mu0.0, &mu0.1);
        let f1 = flatten(&mu1.0, &mu1.1);
        if f0.len() != f1.len() {
            return Err(Error::ShapeMismatch {
                op: "Reference::new",
                left: mu0.0.shape(),
                right: mu1.0.shape(),
            });
        }
        let direction: Vec<f64> = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
        if direction.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("reference direction", "mu1 == mu0, nothing to project on"));
        }
        let midpoint = f1.iter().zip(&f0).map(|(a, b)| 0.5 * (a + b)).collect();
        Ok(Self {
            mu0,
            mu1,
            direction,
            midpoint,
        })
    }

    /// `||mu1 - mu0||`.
    pub fn separation(&self) -> f64 {
        self.direction.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.mu1.clone(), self.mu0.clone()).expect("separation is nonzero")
    }
}

fn flatten(b: &Matrix, a: &Matrix) -> Vec<f64> {
    b.as_slice().iter().chain(a.as_slice()).copied().collect()
}

/// `<(B~ || A~) - (mu0 + mu1)/2, mu1 - mu0>`: negative on the `d` side,
/// positive on the `d'` side, zero at the midpoint.
pub fn score_update(update: &ClientUpdate, reference: &Reference) -> Result<f64> {
    let flat = flatten(&update.b_tilde, &update.a_tilde);
    if flat.len() != reference.direction.len() || update.b_tilde.shape() != reference.mu0.0.shape() {
        return Err(Error::ClientMismatch {
            client_id: update.client_id,
            reason: format!(
                "update B is {:?}, reference B is {:?}",
                update.b_tilde.shape(),
                reference.mu0.0.shape()
            ),
        });
    }
    Ok(flat
        .iter()
        .zip(&reference.midpoint)
        .zip(&reference.direction)
        .map(|((u, c), d)| (u - c) * d)
        .sum())
}

/// The clipped, un-noised releases on both datasets.
pub fn clean_reference(pair: &NeighborPair, cfg: &GameConfig) -> Result<Reference> {
    let release = |data: &Dataset| -> Result<(Matrix, Matrix)> {
        let (b, a) = train_factors(data, cfg)?;
        Ok((
            clip_frobenius(&b, cfg.mechanism.clip_b)?,
            clip_frobenius(&a, cfg.mechanism.clip_a)?,
        ))
    };
    Reference::new(release(&pair.d)?, release(&pair.d_prime)?)
}

/// The reference adversarial setup: a one-client synthetic task, the first
/// record replaced by a 10x outlier with its residual reversed, and clip
/// thresholds at half the smaller un-clipped factor norm so both releases
/// are clipped. Training is a single full-batch step, which leaves `A` at
/// its shared initialisation and makes the clipped `B` releases nearly
/// antipodal. The mechanism starts disabled.
pub fn adversarial_game(seed: u64) -> Result<(NeighborPair, GameConfig)> {
    let spec = crate::fedsim::task::TaskSpec {
        m: 8,
        n: 4,
        target_rank: 2,
        clients: 1,
        samples_per_client: 8,
        sigma_obs: 0.0,
        heterogeneity: 0.0,
    };
    let task = crate::fedsim::task::generate_task(&spec, seed)?;
    let w = task.base.weight().clone();
    let data = &task.datasets[0];
    let index = most_aligned_record(data, &w)?;
    let pair = make_neighbors(data, index, &adversarial_record(&data.record(index), &w, 10.0)?)?;
    let mut cfg = GameConfig {
        w_eff: w,
        rank: 2,
        lora_scale: 2.0,
        epochs: 1,
        batch_size: 8,
        lr: 0.05,
        max_grad_norm: Some(1.0),
        mechanism: MechanismParams::disabled(),
        training_seed: seed,
    };
    let (b0, a0) = train_factors(&pair.d, &cfg)?;
    let (b1, a1) = train_factors(&pair.d_prime, &cfg)?;
    cfg.mechanism.clip_b = ClipThreshold::new(0.5 * b0.frobenius_norm().min(b1.frobenius_norm()))?;
    cfg.mechanism.clip_a = ClipThreshold::new(0.5 * a0.frobenius_norm().min(a1.frobenius_norm()))?;
    Ok((pair, cfg))
}

/// Index of the record whose gradient term `e_i x_i^T` has the largest
/// cosine with the full-data term `sum_i e_i x_i^T`, residuals taken under
/// `w_eff`. Reversing that record moves the update furthest.
fn most_aligned_record(data: &Dataset, w_eff: &Matrix) -> Result<usize> {
    let err = data.xs().matmul_t(w_eff)?.sub(data.ys())?;
    let total = err.t_matmul(data.xs())?;
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..data.len() {
        let e = Matrix::column(err.row(i))?;
        let x = Matrix::new(1, data.input_dim(), data.xs().row(i).to_vec())?;
        let g = e.matmul(&x)?;
        let denom = g.frobenius_norm() * total.frobenius_norm();
        let cos = if denom > 0.0 { g.dot(&total)? / denom } else { 0.0 };
        if cos > best.1 {
            best = (i, cos);
        }
    }
    Ok(best.0)
}

/// Keeps the thresholds of `mechanism` and calibrates both factors to
/// `(epsilon, delta)`.
pub fn calibrated_for(mechanism: &MechanismParams, epsilon: f64, delta: f64) -> Result<MechanismParams> {
    let budget = PrivacyBudget::new(epsilon, delta)?;
    MechanismParams::calibrated(mechanism.clip_b, mechanism.clip_a, budget, budget)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackTrial {
    /// `false`: mechanism ran on `d`; `true`: on `d'`.
    pub true_bit: bool,
    pub score: f64,
}

/// Plays `trials` rounds of the game. Trial `i` uses its own stream
/// `rng / [TRIAL, i]` for the coin and the noise, so the result does not
/// depend on thread scheduling.
pub fn run_game(pair: &NeighborPair, cfg: &GameConfig, trials: usize, rng: &RngStream) -> Result<Vec<AttackTrial>> {
    if trials < 100 {
        return Err(Error::invalid("trials", format!("{trials} < 100")));
    }
    let reference = clean_reference(pair, cfg)?;
    play(&reference, &cfg.mechanism, trials, rng)
}

/// Trials against precomputed clean releases.
pub fn play(
    reference: &Reference,
    mechanism: &MechanismParams,
    trials: usize,
    rng: &RngStream,
) -> Result<Vec<AttackTrial>> {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let stream = rng.derive(&[kind::TRIAL, i as u64]);
            let bit = stream.derive(&[kind::COIN]).coin();
            let (b, a) = if bit { &reference.mu1 } else { &reference.mu0 };
            let b_tilde = privatize(b, mechanism.clip_b, mechanism.sigma_b, &mut stream.derive(&[kind::NOISE_B]))?;
            let a_tilde = privatize(a, mechanism.clip_a, mechanism.sigma_a, &mut stream.derive(&[kind::NOISE_A]))?;
            let score = score_update(&ClientUpdate::new(0, b_tilde, a_tilde, 1.0)?, reference)?;
            if !score.is_finite() {
                return Err(Error::NonFinite(format!("trial {i}: score {score}")));
            }
            Ok(AttackTrial { true_bit: bit, score })
        })
        .collect()
}

/// Fraction of trials where `score >= 0` guesses the bit.
pub fn attack_accuracy(trials: &[AttackTrial]) -> f64 {
    if trials.is_empty() {
        return f64::NAN;
    }
    let hits = trials.iter().filter(|t| (t.score >= 0.0) == t.true_bit).count();
    hits as f64 / trials.len() as f64
}

/// `sqrt(p (1 - p) / n)`.
pub fn binomial_std_error(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Empirical ROC: rejecting `d` when `score >= threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// Decreasing from `+inf` to `-inf`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub negatives: usize,
    pub positives: usize,
}

impl RocCurve {
    pub fn from_trials(trials: &[AttackTrial]) -> Result<Self> {
        let positives = trials.iter().filter(|t| t.true_bit).count();
        let negatives = trials.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(Error::invalid(
                "trials",
                format!("need both classes, got {negatives} with b=0 and {positives} with b=1"),
            ));
        }
        let mut sorted: Vec<AttackTrial> = trials.to_vec();
        sorted.sort_by(|x, y| y.score.total_cmp(&x.score));

        let mut curve = Self {
            thresholds: vec![f64::INFINITY],
            fpr: vec![0.0],
            tpr: vec![0.0],
            negatives,
            positives,
        };
        let (mut fp, mut tp) = (0usize, 0usize);
        let mut i = 0;
        while i < sorted.len() {
            let t = sorted[i].score;
            while i < sorted.len() && sorted[i].score == t {
                if sorted[i].true_bit {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            curve.thresholds.push(t);
            curve.fpr.push(fp as f64 / negatives as f64);
            curve.tpr.push(tp as f64 / positives as f64);
        }
        curve.thresholds.push(f64::NEG_INFINITY);
        curve.fpr.push(1.0);
        curve.tpr.push(1.0);
        Ok(curve)
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.thresholds.len();
        if n < 2 || self.fpr.len() != n || self.tpr.len() != n {
            return Err(Error::invalid("roc curve", "needs at least the two endpoints"));
        }
        if (self.fpr[0], self.tpr[0]) != (0.0, 0.0) || (self.fpr[n - 1], self.tpr[n - 1]) != (1.0, 1.0) {
            return Err(Error::invalid("roc curve", "endpoints must be (0,0) and (1,1)"));
        }
        for i in 1..n {
            let ok = self.thresholds[i] < self.thresholds[i - 1]
                && self.fpr[i] >= self.fpr[i - 1]
                && self.tpr[i] >= self.tpr[i - 1]
                && self.fpr[i] <= 1.0
                && self.tpr[i] <= 1.0;
            if !ok {
                return Err(Error::invalid("roc curve", format!("not monotone at point {i}")));
            }
        }
        Ok(())
    }

    /// `threshold,fpr,tpr` rows.
    pub fn rows(&self) -> Vec<String> {
        (0..self.len())
            .map(|i| {
                format!(
                    "{},{},{}",
                    crate::output::num(self.thresholds[i]),
                    crate::output::num(self.fpr[i]),
                    crate::output::num(self.tpr[i])
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpBoundCheck {
    pub epsilon: f64,
    pub delta: f64,
    /// Largest excess over the `(epsilon, delta)` line, across thresholds
    /// and both class orientations.
    pub max_violation: f64,
    pub mc_tolerance: f64,
}

impl DpBoundCheck {
    pub fn passed(&self) -> bool {
        self.max_violation <= self.mc_tolerance
    }
}

/// Tests every ROC point against
///
/// ```text
/// tpr <= e^eps fpr + delta
/// fpr <= e^eps tpr + delta
/// ```
///
/// allowing `3 sqrt(0.25 / trials)` of Monte Carlo slack.
pub fn check_dp_bound(curve: &RocCurve, epsilon: f64, delta: f64, trials: usize) -> Result<DpBoundCheck> {
    curve.validate()?;
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid("epsilon", format!("{epsilon} must be finite and >= 0")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::invalid("delta", format!("{delta} must be in [0, 1)")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be > 0"));
    }
    let e = epsilon.exp();
    let mut worst = f64::NEG_INFINITY;
    for (&f, &t) in curve.fpr.iter().zip(&curve.tpr) {
        worst = worst.max(t - e * f - delta).max(f - e * t - delta);
    }
    Ok(DpBoundCheck {
        epsilon,
        delta,
        max_violation: worst,
        mc_tolerance: 3.0 * (0.25 / trials as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> RocCurve {
        let n = points.len();
        RocCurve {
            thresholds: (0..n).map(|i| (n - i) as f64).collect(),
            fpr: points.iter().map(|p| p.0).collect(),
            tpr: points.iter().map(|p| p.1).collect(),
            negatives: 1,
            positives: 1,
        }
    }

    #[test]
    fn make_neighbors_rejects_identical_replacement() {
        let d = Dataset::new(Matrix::from_rows(&[[1.0], [2.0]]).unwrap(), Matrix::from_rows(&[[3.0], [4.0]]).unwrap())
            .unwrap();
        let pair = make_neighbors(&d, 0, &Record { x: vec![5.0], y: vec![6.0] }).unwrap();
        assert_eq!(pair.d_prime.record(0), Record { x: vec![5.0], y: vec![6.0] });
        assert_eq!(pair.d_prime.record(1), d.record(1));
        assert!(make_neighbors(&d, 0, &d.record(0)).is_err());
        assert!(make_neighbors(&d, 2, &d.record(0)).is_err());
    }

    #[test]
    fn score_endpoints_and_midpoint() {
        let mu0 = (Matrix::from_rows(&[[0.0]]).unwrap(), Matrix::from_rows(&[[1.0]]).unwrap());
        let mu1 = (Matrix::from_rows(&[[2.0]]).unwrap(), Matrix::from_rows(&[[1.0]]).unwrap());
        let r = Reference::new(mu0.clone(), mu1.clone()).unwrap();
        let s = |b: f64| score_update(&ClientUpdate::new(0, Matrix::from_rows(&[[b]]).unwrap(), mu0.1.clone(), 1.0).unwrap(), &r).unwrap();
        assert_eq!(s(0.0), -2.0);
        assert_eq!(s(2.0), 2.0);
        assert_eq!(s(1.0), 0.0);
        assert!(Reference::new(mu0.clone(), mu0).is_err());
    }

    #[test]
    fn diagonal_curve_passes_any_epsilon() {
        let c = curve(&[(0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (1.0, 1.0)]);
        for eps in [0.0, 0.1, 2.0] {
            let chk = check_dp_bound(&c, eps, 0.0, 10_000).unwrap();
            assert!(chk.passed(), "{chk:?}");
        }
    }

    #[test]
    fn boundary_curve_has_zero_violation() {
        let pts: Vec<(f64, f64)> = (0..=20).map(|i| i as f64 / 20.0).map(|f| (f, (2.0 * f).min(1.0))).collect();
        let chk = check_dp_bound(&curve(&pts), 2f64.ln(), 0.0, 10_000).unwrap();
        assert!(chk.max_violation.abs() < 1e-12, "{chk:?}");
    }

    #[test]
    fn malformed_curves_rejected() {
        assert!(check_dp_bound(&curve(&[(0.0, 0.0), (0.6, 0.5), (0.5, 0.7), (1.0, 1.0)]), 1.0, 0.0, 100).is_err());
        assert!(check_dp_bound(&curve(&[(0.0, 0.0), (0.5, 0.5)]), 1.0, 0.0, 100).is_err());
    }

    #[test]
    fn roc_from_trials_has_endpoints() {
        let trials = [
            AttackTrial { true_bit: true, score: 2.0 },
            AttackTrial { true_bit: false, score: 1.0 },
            AttackTrial { true_bit: true, score: 1.0 },
            AttackTrial { true_bit: false, score: -1.0 },
        ];
        let c = RocCurve::from_trials(&trials).unwrap();
        c.validate().unwrap();
        assert_eq!(c.fpr, vec![0.0, 0.0, 0.5, 1.0, 1.0]);
        assert_eq!(c.tpr, vec![0.0, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(attack_accuracy(&trials), 0.75);
    }
}
