//! Frobenius clipping and the Gaussian mechanism applied per adapter factor.
//!
//! Each factor is clipped to its own threshold `C`, which bounds its
//! sensitivity, and then perturbed with isotropic noise of standard deviation
//!
//! ```text
//! sigma = C * sqrt(2 ln(1.25 / delta)) / epsilon
//! ```
//!
//! `B` and `A` carry independent thresholds, budgets and noise draws.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::random::{sample_gaussian, RngStream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid("epsilon", format!("{epsilon} must be finite and > 0")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta", format!("{delta} must lie in (0, 1)")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// A Frobenius-norm cap. `+inf` is allowed and means "never clip".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipThreshold(f64);

impl ClipThreshold {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::invalid("clip threshold", format!("{c} must be > 0")));
        }
        Ok(Self(c))
    }

    pub fn unbounded() -> Self {
        Self(f64::INFINITY)
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn is_unbounded(&self) -> bool {
        self.0.is_infinite()
    }
}

/// Noise scales and thresholds for one client's `(B, A)` release.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MechanismParams {
    pub sigma_b: f64,
    pub sigma_a: f64,
    pub clip_b: ClipThreshold,
    pub clip_a: ClipThreshold,
}

impl MechanismParams {
    /// Calibrated noise for each factor from its own budget.
    pub fn calibrated(
        clip_b: ClipThreshold,
        clip_a: ClipThreshold,
        budget_b: PrivacyBudget,
        budget_a: PrivacyBudget,
    ) -> Result<Self> {
        Ok(Self {
            sigma_b: calibrate_sigma(clip_b, budget_b)?,
            sigma_a: calibrate_sigma(clip_a, budget_a)?,
            clip_b,
            clip_a,
        })
    }

    /// No clipping and no noise.
    pub fn disabled() -> Self {
        Self {
            sigma_b: 0.0,
            sigma_a: 0.0,
            clip_b: ClipThreshold::unbounded(),
            clip_a: ClipThreshold::unbounded(),
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_b == 0.0 && self.sigma_a == 0.0
    }
}

/// Rescales `m` by `min(1, c / ||m||_F)`.
///
/// Matrices already inside the ball are returned bit-identical. Outside the
/// ball the result is a positive multiple of `m` whose computed norm is at
/// most `c`, so clipping twice is the same as clipping once.
pub fn clip_frobenius(m: &Matrix, c: ClipThreshold) -> Result<Matrix> {
    let c = c.value();
    if !(c > 0.0) {
        return Err(Error::invalid("clip threshold", format!("{c} must be > 0")));
    }
    let norm = m.frobenius_norm();
    if norm <= c {
        return Ok(m.clone());
    }
    let mut factor = c / norm;
    let mut out = m.scale(factor);
    // Rounding can leave the norm a few ulps above c.
    while out.frobenius_norm() > c {
        factor *= 1.0 - f64::EPSILON;
        out = m.scale(factor);
    }
    Ok(out)
}

/// `c * sqrt(2 ln(1.25 / delta)) / epsilon`, the tightest noise scale
/// satisfying the classical Gaussian-mechanism condition for sensitivity `c`.
pub fn calibrate_sigma(c: ClipThreshold, budget: PrivacyBudget) -> Result<f64> {
    let c = c.value();
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::invalid(
            "clip threshold",
            format!("{c}: calibration needs a finite threshold > 0"),
        ));
    }
    Ok(c * gaussian_mechanism_factor(budget.delta()) / budget.epsilon())
}

/// `sqrt(2 ln(1.25 / delta))`.
pub fn gaussian_mechanism_factor(delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt()
}

/// Clip then add `N(0, sigma^2)` noise. `sigma == 0` returns the clipped
/// matrix itself, with no addition performed.
pub fn privatize(m: &Matrix, c: ClipThreshold, sigma: f64, rng: &mut RngStream) -> Result<Matrix> {
    let clipped = clip_frobenius(m, c)?;
    if sigma == 0.0 {
        return Ok(clipped);
    }
    let noise = sample_gaussian(m.rows(), m.cols(), sigma, rng)?;
    clipped.add(&noise)
}

/// Basic sequential composition: `rounds * (eps_b + eps_a)`.
///
/// Reported as the "naive total epsilon" of a run, never enforced.
pub fn compose_budget(eps_b: f64, eps_a: f64, rounds: u64) -> Result<f64> {
    if !(eps_b > 0.0) || !(eps_a > 0.0) {
        return Err(Error::invalid(
            "per-factor epsilon",
            format!("({eps_b}, {eps_a}) must both be > 0"),
        ));
    }
    if rounds == 0 {
        return Err(Error::invalid("rounds", "must be positive"));
    }
    Ok(rounds as f64 * (eps_b + eps_a))
}
