//! The invariant suites behind `fedlora-dp verify`.
//!
//! Each check draws its random instances from its own stream under the run
//! seed, so a suite result is reproducible.

use crate::dp::{calibrate_sigma, clip_frobenius, ClipThreshold, MechanismParams, PrivacyBudget};
use crate::error::Result;
use crate::lora::{stacking_equivalence_residual, ClientUpdate};
use crate::matrix::Matrix;
use crate::mia::{adversarial_game, calibrated_for, check_dp_bound, clean_reference, play, RocCurve};
use crate::noise::{
    exact_total_variance, linear_fit, mc_stats, paper_variance_bound, rank_sweep, FactorNorms,
    NoiseModel,
};
use crate::random::{sample_gaussian, RngStream};

/// `sqrt(2 ln(1.25e5))` to 16 digits, from a 50-digit evaluation.
pub const CALIBRATION_ORACLE: f64 = 4.844_805_262_605_389;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    pub fn status(&self) -> &'static str {
        if self.passed {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

/// Instance and draw counts for one suite run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteSize {
    pub clip_instances: usize,
    pub stack_instances: usize,
    pub unbiased_instances: usize,
    pub unbiased_draws: usize,
    pub variance_instances: usize,
    pub variance_draws: usize,
    pub rank_draws: usize,
    pub mia_trials: usize,
}

impl SuiteSize {
    pub fn full() -> Self {
        Self {
            clip_instances: 1000,
            stack_instances: 1000,
            unbiased_instances: 50,
            unbiased_draws: 100_000,
            variance_instances: 20,
            variance_draws: 100_000,
            rank_draws: 100_000,
            mia_trials: 10_000,
        }
    }

    pub fn fast() -> Self {
        Self {
            clip_instances: 200,
            stack_instances: 200,
            unbiased_instances: 10,
            unbiased_draws: 10_000,
            variance_instances: 5,
            variance_draws: 50_000,
            rank_draws: 20_000,
            mia_trials: 10_000,
        }
    }
}

/// Suite parameters that come from the run configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteParams {
    pub seed: u64,
    pub size: SuiteSize,
    pub ranks_m: usize,
    pub ranks_n: usize,
    pub noise: NoiseModel,
    pub norms: FactorNorms,
    pub delta: f64,
    /// Multiplies the calibrated noise in the DP bound check.
    pub sigma_scale: f64,
}

fn random_dims(rng: &mut RngStream, max: usize) -> usize {
    1 + rng.below(max)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Matrix> {
    let scale = (10f64).powf(rng.uniform() * 4.0 - 2.0);
    sample_gaussian(rows, cols, scale, rng)
}

pub fn check_clip_contract(instances: usize, rng: &RngStream) -> Result<CheckResult> {
    let mut failures = Vec::new();
    let mut worst_excess = f64::NEG_INFINITY;
    for i in 0..instances {
        let mut s = rng.derive(&[i as u64]);
        let (r, c) = (random_dims(&mut s, 12), random_dims(&mut s, 12));
        let m = random_matrix(r, c, &mut s)?;
        let norm = m.frobenius_norm();
        let threshold = norm * (0.05 + 1.9 * s.uniform());
        let clip = ClipThreshold::new(threshold)?;
        let out = clip_frobenius(&m, clip)?;
        let post = out.frobenius_norm();
        worst_excess = worst_excess.max(post - threshold);
        let bounded = post <= threshold + 1e-12;
        let cosine = if norm > 0.0 { out.dot(&m)? / (post * norm) } else { 1.0 };
        let aligned = (1.0 - cosine).abs() <= 1e-12;
        let noop = norm > threshold || out == m;
        let idempotent = clip_frobenius(&out, clip)? == out;
        if !(bounded && aligned && noop && idempotent) {
            failures.push(i);
        }
    }
    Ok(CheckResult::new(
        "clip_contract",
        failures.is_empty(),
        format!(
            "{instances} instances, {} failures, max(post - C) = {worst_excess:e}",
            failures.len()
        ),
    ))
}

pub fn check_calibration() -> Result<CheckResult> {
    let unit = calibrate_sigma(ClipThreshold::new(1.0)?, PrivacyBudget::new(1.0, 1e-5)?)?;
    let rel = (unit - CALIBRATION_ORACLE).abs() / CALIBRATION_ORACLE;
    let mut lin = 0f64;
    for (c, eps) in [(3.0, 1.0), (0.25, 1.0), (1.0, 4.0), (1.0, 0.5), (2.0, 8.0)] {
        let s = calibrate_sigma(ClipThreshold::new(c)?, PrivacyBudget::new(eps, 1e-5)?)?;
        let expected = unit * c / eps;
        lin = lin.max((s - expected).abs() / expected);
    }
    Ok(CheckResult::new(
        "calibration",
        rel <= 1e-12 && lin <= 1e-15,
        format!("sigma(1, 1, 1e-5) = {unit:.17}, oracle rel err {rel:e}, linearity rel err {lin:e}"),
    ))
}

/// `K <= 8` clients, `m, n <= 32`, ranks `<= 8`, random weights.
pub fn random_updates(rng: &mut RngStream) -> Result<Vec<ClientUpdate>> {
    let k = random_dims(rng, 8);
    let (m, n) = (random_dims(rng, 32), random_dims(rng, 32));
    (0..k)
        .map(|id| {
            let r = random_dims(rng, 8);
            let b = random_matrix(m, r, rng)?;
            let a = random_matrix(r, n, rng)?;
            Ok(ClientUpdate::new(id, b, a, rng.uniform())?.with_scale(0.5 + rng.uniform()))
        })
        .collect()
}

pub fn check_stacking(instances: usize, rng: &RngStream) -> Result<CheckResult> {
    let mut worst = 0f64;
    for i in 0..instances {
        let updates = random_updates(&mut rng.derive(&[i as u64]))?;
        worst = worst.max(stacking_equivalence_residual(&updates)?);
    }
    Ok(CheckResult::new(
        "stacking_equivalence",
        worst <= 1e-12,
        format!("{instances} instances, max relative residual {worst:e}"),
    ))
}

fn random_factors(rng: &mut RngStream, max_dim: usize) -> Result<(Matrix, Matrix, NoiseModel)> {
    let (m, n, r) = (random_dims(rng, max_dim), random_dims(rng, max_dim), random_dims(rng, 4));
    let b = sample_gaussian(m, r, 1.0, rng)?;
    let a = sample_gaussian(r, n, 1.0, rng)?;
    let model = NoiseModel::new(0.1 + 2.0 * rng.uniform(), 0.1 + 2.0 * rng.uniform())?;
    Ok((b, a, model))
}

pub fn check_unbiasedness(instances: usize, draws: usize, rng: &RngStream) -> Result<CheckResult> {
    let mut worst = 0f64;
    for i in 0..instances {
        let (b, a, model) = random_factors(&mut rng.derive(&[i as u64, 0]), 8)?;
        let s = mc_stats(&b, &a, &model, draws, &rng.derive(&[i as u64, 1]))?;
        worst = worst.max(s.mean_diff.abs() / s.std_error);
    }
    Ok(CheckResult::new(
        "unbiasedness",
        worst <= 5.0,
        format!("{instances} instances x {draws} draws, max |mean_diff| / std_error = {worst:.3}"),
    ))
}

pub fn check_variance_oracle(instances: usize, draws: usize, rng: &RngStream) -> Result<CheckResult> {
    let mut worst = 0f64;
    let mut worst_square = 0f64;
    for i in 0..instances {
        let (b, a, model) = random_factors(&mut rng.derive(&[i as u64, 0]), 8)?;
        let exact = exact_total_variance(&b, &a, &model)?;
        let mc = mc_stats(&b, &a, &model, draws, &rng.derive(&[i as u64, 1]))?.total_variance;
        worst = worst.max((mc - exact).abs() / exact);

        // Square shapes, where the printed closed form coincides.
        let mut s = rng.derive(&[i as u64, 2]);
        let side = random_dims(&mut s, 16);
        let r = random_dims(&mut s, 4);
        let b = sample_gaussian(side, r, 1.0, &mut s)?;
        let a = sample_gaussian(r, side, 1.0, &mut s)?;
        let exact = exact_total_variance(&b, &a, &model)?;
        worst_square = worst_square.max((paper_variance_bound(&b, &a, &model)? - exact).abs() / exact);
    }
    Ok(CheckResult::new(
        "variance_oracle",
        worst <= 0.03 && worst_square <= 1e-12,
        format!(
            "{instances} instances x {draws} draws, max MC rel err {worst:.4}, square-shape closed-form rel diff {worst_square:e}"
        ),
    ))
}

pub fn check_rank_linearity(
    m: usize,
    n: usize,
    norms: FactorNorms,
    model: &NoiseModel,
    draws: usize,
    rng: &RngStream,
) -> Result<CheckResult> {
    let ranks = [8usize, 16, 32, 64, 128];
    let reports = rank_sweep(&ranks, m, n, norms, model, draws, rng)?;
    let vars: Vec<f64> = reports.iter().map(|r| r.mc_estimate()).collect();
    let ratios: Vec<f64> = vars.windows(2).map(|w| w[1] / w[0]).collect();
    let xs: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let (_, _, r2) = linear_fit(&xs, &vars);
    let ratios_ok = ratios.iter().all(|q| (q - 2.0).abs() <= 0.2);
    Ok(CheckResult::new(
        "rank_linearity",
        ratios_ok && r2 >= 0.99,
        format!(
            "{m}x{n}, {draws} draws, ratios [{}], R^2 = {r2:.6}",
            ratios.iter().map(|q| format!("{q:.4}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

pub fn check_dp_bound_at(
    epsilon: f64,
    delta: f64,
    trials: usize,
    sigma_scale: f64,
    seed: u64,
) -> Result<CheckResult> {
    let (pair, cfg) = adversarial_game(seed)?;
    let calibrated = calibrated_for(&cfg.mechanism, epsilon, delta)?;
    let mechanism = MechanismParams {
        sigma_b: calibrated.sigma_b * sigma_scale,
        sigma_a: calibrated.sigma_a * sigma_scale,
        ..calibrated
    };
    let reference = clean_reference(&pair, &cfg.with_mechanism(mechanism))?;
    let trials_out = play(&reference, &mechanism, trials, &RngStream::new(seed, &[crate::random::kind::TRIAL]))?;
    let curve = RocCurve::from_trials(&trials_out)?;
    let check = check_dp_bound(&curve, epsilon, delta, trials)?;
    let scaled = if sigma_scale == 1.0 {
        String::new()
    } else {
        format!(", sigma scaled by {sigma_scale}")
    };
    Ok(CheckResult::new(
        "dp_bound",
        check.passed(),
        format!(
            "epsilon {epsilon}, {trials} trials{scaled}, max violation {:.5} vs tolerance {:.5}",
            check.max_violation, check.mc_tolerance
        ),
    ))
}

/// All checks, in report order.
pub fn run_suite(p: &SuiteParams) -> Result<Vec<CheckResult>> {
    let root = RngStream::root(p.seed);
    let s = p.size;
    Ok(vec![
        check_clip_contract(s.clip_instances, &root.derive(&[1]))?,
        check_calibration()?,
        check_stacking(s.stack_instances, &root.derive(&[2]))?,
        check_unbiasedness(s.unbiased_instances, s.unbiased_draws, &root.derive(&[3]))?,
        check_variance_oracle(s.variance_instances, s.variance_draws, &root.derive(&[4]))?,
        check_rank_linearity(p.ranks_m, p.ranks_n, p.norms, &p.noise, s.rank_draws, &root.derive(&[5]))?,
        check_dp_bound_at(0.5, p.delta, s.mia_trials, p.sigma_scale, p.seed)?,
    ])
}
