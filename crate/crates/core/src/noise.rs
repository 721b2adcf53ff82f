//! Statistics of the noisy product `(B + beta)(A + alpha)`.
//!
//! With `beta ~ N(0, s_b^2 I)` (`m x r`) and `alpha ~ N(0, s_a^2 I)`
//! (`r x n`) independent of each other and of `B`, `A`:
//!
//! * the noisy product is unbiased, `E[(B + beta)(A + alpha)] = B A`;
//! * summed over all `m n` entries, its variance is
//!
//! ```text
//! n s_a^2 ||B||_F^2 + m s_b^2 ||A||_F^2 + m n r s_b^2 s_a^2
//! ```
//!
//! because entry `(i, j)` of `B alpha` has variance `s_a^2 sum_k B_ik^2`
//! (summing over `j` contributes a factor `n`), dually for `beta A`, and each
//! of the `r` terms of `(beta alpha)_ij` has variance `s_b^2 s_a^2`. All
//! cross-covariances vanish.
//!
//! [`paper_variance_bound`] evaluates the same three terms with the `m` and
//! `n` factors of the first two swapped. The two agree when `m == n` and
//! differ otherwise, so both are reported side by side.
//!
//! Monte Carlo estimates are computed in fixed-size chunks, each with its
//! own RNG stream, and reduced in chunk order so results do not depend on
//! the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{matmul_into, Matrix};
use crate::random::{kind, sample_gaussian, RngStream};

const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma_beta: f64,
    pub sigma_alpha: f64,
}

impl NoiseModel {
    pub fn new(sigma_beta: f64, sigma_alpha: f64) -> Result<Self> {
        if !(sigma_beta >= 0.0 && sigma_alpha >= 0.0) || !sigma_beta.is_finite() || !sigma_alpha.is_finite() {
            return Err(Error::invalid(
                "noise model",
                format!("sigmas ({sigma_beta}, {sigma_alpha}) must be finite and >= 0"),
            ));
        }
        Ok(Self {
            sigma_beta,
            sigma_alpha,
        })
    }

    pub fn is_silent(&self) -> bool {
        self.sigma_beta == 0.0 && self.sigma_alpha == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseStats {
    /// Monte Carlo mean of `(B+beta)(A+alpha) - BA`, averaged over entries.
    pub mean_diff: f64,
    /// Standard error of `mean_diff`.
    pub std_error: f64,
    /// Sum over entries of the unbiased per-entry sample variance.
    pub total_variance: f64,
    pub n_draws: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub model: NoiseModel,
    pub norm_b: f64,
    pub norm_a: f64,
    pub stats: NoiseStats,
    pub exact_formula: f64,
    pub paper_bound: f64,
}

impl VarianceReport {
    pub fn mc_estimate(&self) -> f64 {
        self.stats.total_variance
    }

    /// `|mc - exact| / exact`; 0 when both are zero.
    pub fn relative_error(&self) -> f64 {
        if self.exact_formula == 0.0 {
            return self.stats.total_variance.abs();
        }
        (self.stats.total_variance - self.exact_formula).abs() / self.exact_formula
    }
}

fn check_shapes(b: &Matrix, a: &Matrix) -> Result<()> {
    if b.cols() != a.rows() {
        return Err(Error::ShapeMismatch {
            op: "noise analysis",
            left: b.shape(),
            right: a.shape(),
        });
    }
    Ok(())
}

/// `n s_a^2 ||B||^2 + m s_b^2 ||A||^2 + m n r s_b^2 s_a^2`.
pub fn exact_total_variance(b: &Matrix, a: &Matrix, model: &NoiseModel) -> Result<f64> {
    check_shapes(b, a)?;
    let (m, r, n) = (b.rows() as f64, b.cols() as f64, a.cols() as f64);
    let sb2 = model.sigma_beta * model.sigma_beta;
    let sa2 = model.sigma_alpha * model.sigma_alpha;
    Ok(n * sa2 * b.frobenius_norm_sq() + m * sb2 * a.frobenius_norm_sq() + m * n * r * sb2 * sa2)
}

/// `m s_a^2 ||B||^2 + n s_b^2 ||A||^2 + s_b^2 s_a^2 m n r`, term for term.
pub fn paper_variance_bound(b: &Matrix, a: &Matrix, model: &NoiseModel) -> Result<f64> {
    check_shapes(b, a)?;
    let (m, r, n) = (b.rows() as f64, b.cols() as f64, a.cols() as f64);
    let sb2 = model.sigma_beta * model.sigma_beta;
    let sa2 = model.sigma_alpha * model.sigma_alpha;
    Ok(m * sa2 * b.frobenius_norm_sq() + n * sb2 * a.frobenius_norm_sq() + sb2 * sa2 * m * n * r)
}

#[derive(Clone)]
struct Partial {
    draws: usize,
    /// Sum and sum of squares of the per-draw entry mean.
    mean_sum: f64,
    mean_sq_sum: f64,
    /// Per-entry sum and sum of squares of the deviation from `BA`.
    entry_sum: Vec<f64>,
    entry_sq_sum: Vec<f64>,
}

impl Partial {
    fn new(entries: usize) -> Self {
        Self {
            draws: 0,
            mean_sum: 0.0,
            mean_sq_sum: 0.0,
            entry_sum: vec![0.0; entries],
            entry_sq_sum: vec![0.0; entries],
        }
    }

    fn merge(&mut self, other: &Partial) {
        self.draws += other.draws;
        self.mean_sum += other.mean_sum;
        self.mean_sq_sum += other.mean_sq_sum;
        for (s, o) in self.entry_sum.iter_mut().zip(&other.entry_sum) {
            *s += o;
        }
        for (s, o) in self.entry_sq_sum.iter_mut().zip(&other.entry_sq_sum) {
            *s += o;
        }
    }
}

fn run_chunk(b: &Matrix, a: &Matrix, model: &NoiseModel, draws: usize, rng: &mut RngStream) -> Result<Partial> {
    let (m, r, n) = (b.rows(), b.cols(), a.cols());
    let mut part = Partial::new(m * n);
    for _ in 0..draws {
        let beta = sample_gaussian(m, r, model.sigma_beta, rng)?;
        let alpha = sample_gaussian(r, n, model.sigma_alpha, rng)?;
        // (B+beta)(A+alpha) - BA = B alpha + beta (A + alpha)
        let mut dev = Matrix::zeros(m, n);
        if model.sigma_alpha != 0.0 {
            matmul_into(b, &alpha, &mut dev);
        }
        if model.sigma_beta != 0.0 {
            matmul_into(&beta, &a.add(&alpha)?, &mut dev);
        }
        let mean = dev.mean();
        part.draws += 1;
        part.mean_sum += mean;
        part.mean_sq_sum += mean * mean;
        for ((s, q), &d) in part.entry_sum.iter_mut().zip(part.entry_sq_sum.iter_mut()).zip(dev.as_slice()) {
            *s += d;
            *q += d * d;
        }
    }
    Ok(part)
}

/// Monte Carlo moments of the noisy product over `draws` samples.
pub fn mc_stats(b: &Matrix, a: &Matrix, model: &NoiseModel, draws: usize, rng: &RngStream) -> Result<NoiseStats> {
    check_shapes(b, a)?;
    if draws < 2 {
        return Err(Error::invalid("draws", format!("{draws} < 2")));
    }
    let chunks = draws.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let size = CHUNK.min(draws - c * CHUNK);
            run_chunk(b, a, model, size, &mut rng.derive(&[kind::MONTE_CARLO, c as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Partial::new(b.rows() * a.cols());
    for p in &parts {
        total.merge(p);
    }

    let nd = total.draws as f64;
    let mean_diff = total.mean_sum / nd;
    let mean_var = ((total.mean_sq_sum - nd * mean_diff * mean_diff) / (nd - 1.0)).max(0.0);
    let total_variance = total
        .entry_sum
        .iter()
        .zip(&total.entry_sq_sum)
        .map(|(&s, &q)| ((q - s * s / nd) / (nd - 1.0)).max(0.0))
        .sum();
    Ok(NoiseStats {
        mean_diff,
        std_error: (mean_var / nd).sqrt(),
        total_variance,
        n_draws: total.draws,
    })
}

/// `(mean_diff, std_error)` from `draws >= 100` samples.
pub fn mc_expectation_diff(
    b: &Matrix,
    a: &Matrix,
    model: &NoiseModel,
    draws: usize,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    if draws < 100 {
        return Err(Error::invalid("draws", format!("{draws} < 100")));
    }
    let s = mc_stats(b, a, model, draws, rng)?;
    Ok((s.mean_diff, s.std_error))
}

/// Total sample variance from `draws >= 1000` samples.
pub fn mc_total_variance(b: &Matrix, a: &Matrix, model: &NoiseModel, draws: usize, rng: &RngStream) -> Result<f64> {
    if draws < 1000 {
        return Err(Error::invalid("draws", format!("{draws} < 1000")));
    }
    Ok(mc_stats(b, a, model, draws, rng)?.total_variance)
}

pub fn variance_report(b: &Matrix, a: &Matrix, model: &NoiseModel, draws: usize, rng: &RngStream) -> Result<VarianceReport> {
    Ok(VarianceReport {
        m: b.rows(),
        n: a.cols(),
        r: b.cols(),
        model: *model,
        norm_b: b.frobenius_norm(),
        norm_a: a.frobenius_norm(),
        stats: mc_stats(b, a, model, draws, rng)?,
        exact_formula: exact_total_variance(b, a, model)?,
        paper_bound: paper_variance_bound(b, a, model)?,
    })
}

/// Gaussian `rows x cols` matrix rescaled to Frobenius norm `norm`
/// (a zero matrix when `norm == 0`).
pub fn matrix_with_norm(rows: usize, cols: usize, norm: f64, rng: &mut RngStream) -> Result<Matrix> {
    if norm == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let raw = sample_gaussian(rows, cols, 1.0, rng)?;
    Ok(raw.scale(norm / raw.frobenius_norm()))
}

/// Factor norms held fixed across a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorNorms {
    pub b: f64,
    pub a: f64,
}

/// One report per rank, with `m`, `n`, norms and noise fixed.
pub fn rank_sweep(
    ranks: &[usize],
    m: usize,
    n: usize,
    norms: FactorNorms,
    model: &NoiseModel,
    draws: usize,
    rng: &RngStream,
) -> Result<Vec<VarianceReport>> {
    if ranks.is_empty() || ranks.contains(&0) || ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("ranks", "must be positive and strictly ascending"));
    }
    ranks
        .iter()
        .map(|&r| {
            let mut f = rng.derive(&[kind::INSTANCE, r as u64, 0]);
            let b = matrix_with_norm(m, r, norms.b, &mut f)?;
            let a = matrix_with_norm(r, n, norms.a, &mut f)?;
            variance_report(&b, &a, model, draws, &rng.derive(&[kind::INSTANCE, r as u64, 1]))
        })
        .collect()
}

/// One report per `(m, n)`, with rank, norms and noise fixed.
pub fn size_sweep(
    dims: &[(usize, usize)],
    r: usize,
    norms: FactorNorms,
    model: &NoiseModel,
    draws: usize,
    rng: &RngStream,
) -> Result<Vec<VarianceReport>> {
    if dims.is_empty() {
        return Err(Error::Empty("size_sweep"));
    }
    dims.iter()
        .enumerate()
        .map(|(i, &(m, n))| {
            let mut f = rng.derive(&[kind::INSTANCE, i as u64, 0]);
            let b = matrix_with_norm(m, r, norms.b, &mut f)?;
            let a = matrix_with_norm(r, n, norms.a, &mut f)?;
            variance_report(&b, &a, model, draws, &rng.derive(&[kind::INSTANCE, i as u64, 1]))
        })
        .collect()
}

/// Least-squares line `y = c0 + c1 x`; returns `(c0, c1, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (intercept, slope, r2)
}
