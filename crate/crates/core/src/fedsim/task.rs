//! Synthetic regression tasks with a planted low-rank target.

use crate::error::{Error, Result};
use crate::lora::FrozenBase;
use crate::matrix::{solve, Matrix};
use crate::random::{kind, sample_gaussian, RngStream};

/// A client's local data: inputs `xs` (`N x n`, one record per row) and
/// targets `ys` (`N x m`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    xs: Matrix,
    ys: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(xs: Matrix, ys: Matrix) -> Result<Self> {
        if xs.rows() != ys.rows() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                left: xs.shape(),
                right: ys.shape(),
            });
        }
        Ok(Self { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> &Matrix {
        &self.xs
    }

    pub fn ys(&self) -> &Matrix {
        &self.ys
    }

    pub fn input_dim(&self) -> usize {
        self.xs.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.ys.cols()
    }

    pub fn record(&self, i: usize) -> Record {
        Record {
            x: self.xs.row(i).to_vec(),
            y: self.ys.row(i).to_vec(),
        }
    }

    /// Copy of the dataset with record `i` replaced.
    pub fn with_record(&self, i: usize, rec: &Record) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::invalid("record index", format!("{i} >= {}", self.len())));
        }
        if rec.x.len() != self.input_dim() || rec.y.len() != self.output_dim() {
            return Err(Error::invalid(
                "record",
                format!("expected x of {} and y of {}", self.input_dim(), self.output_dim()),
            ));
        }
        if rec.x.iter().chain(&rec.y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("replacement record".into()));
        }
        let mut out = self.clone();
        out.xs.as_mut_slice()[i * self.input_dim()..(i + 1) * self.input_dim()].copy_from_slice(&rec.x);
        out.ys.as_mut_slice()[i * self.output_dim()..(i + 1) * self.output_dim()].copy_from_slice(&rec.y);
        Ok(out)
    }

    /// Rows `idx` as a mini-batch.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let n = self.input_dim();
        let m = self.output_dim();
        let mut xs = Vec::with_capacity(idx.len() * n);
        let mut ys = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            xs.extend_from_slice(self.xs.row(i));
            ys.extend_from_slice(self.ys.row(i));
        }
        (
            Matrix::new(idx.len(), n, xs).expect("rows copied from a finite matrix"),
            Matrix::new(idx.len(), m, ys).expect("rows copied from a finite matrix"),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub m: usize,
    pub n: usize,
    pub target_rank: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub sigma_obs: f64,
    pub heterogeneity: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub base: FrozenBase,
    /// Planted `B* A*`, normalised to unit Frobenius norm.
    pub target_delta: Matrix,
    pub client_means: Vec<Vec<f64>>,
    pub datasets: Vec<Dataset>,
}

/// Draws `W ~ N(0, 1/n)`, a unit-norm rank-`target_rank` target and per-client
/// datasets `x ~ N(mu_k, I)`, `y = (W + B*A*) x + sigma_obs * noise`. Each
/// client mean has norm `2 * heterogeneity` in a random direction.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<SyntheticTask> {
    let TaskSpec {
        m,
        n,
        target_rank,
        clients,
        samples_per_client,
        sigma_obs,
        heterogeneity,
    } = *spec;
    if m == 0 || n == 0 || clients == 0 || samples_per_client == 0 {
        return Err(Error::invalid(
            "task dims",
            format!("m={m}, n={n}, clients={clients}, samples={samples_per_client} must be positive"),
        ));
    }
    if target_rank == 0 || target_rank > m.min(n) {
        return Err(Error::invalid(
            "target_rank",
            format!("{target_rank} must lie in 1..={}", m.min(n)),
        ));
    }
    if !(sigma_obs >= 0.0) || !sigma_obs.is_finite() {
        return Err(Error::invalid("sigma_obs", format!("{sigma_obs} must be >= 0")));
    }
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(Error::invalid("heterogeneity", format!("{heterogeneity} must lie in [0, 1]")));
    }

    let root = RngStream::root(seed);
    let w = sample_gaussian(m, n, (1.0 / n as f64).sqrt(), &mut root.derive(&[kind::TASK, 0]))?;
    let mut target_rng = root.derive(&[kind::TASK, 1]);
    let b_star = sample_gaussian(m, target_rank, 1.0, &mut target_rng)?;
    let a_star = sample_gaussian(target_rank, n, 1.0, &mut target_rng)?;
    let raw = b_star.matmul(&a_star)?;
    let target_delta = raw.scale(1.0 / raw.frobenius_norm());
    let w_true = w.add(&target_delta)?;

    let mut client_means = Vec::with_capacity(clients);
    let mut datasets = Vec::with_capacity(clients);
    for k in 0..clients {
        let mut mean_rng = root.derive(&[kind::TASK, 2, k as u64]);
        let mean = if heterogeneity == 0.0 {
            vec![0.0; n]
        } else {
            let dir: Vec<f64> = (0..n).map(|_| mean_rng.standard_normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter().map(|v| 2.0 * heterogeneity * v / norm).collect()
        };
        let mut data_rng = root.derive(&[kind::TASK, 3, k as u64]);
        let noise = sample_gaussian(samples_per_client, n, 1.0, &mut data_rng)?;
        let xs = Matrix::from_fn(samples_per_client, n, |i, j| mean[j] + noise.get(i, j));
        let mut ys = xs.matmul_t(&w_true)?;
        if sigma_obs > 0.0 {
            ys.add_assign(&sample_gaussian(samples_per_client, m, sigma_obs, &mut data_rng)?)?;
        }
        client_means.push(mean);
        datasets.push(Dataset::new(xs, ys)?);
    }
    Ok(SyntheticTask {
        base: FrozenBase::new(w),
        target_delta,
        client_means,
        datasets,
    })
}

/// `(1 / 2N) sum ||W_eff x - y||^2` over a dataset.
pub fn dataset_loss(w_eff: &Matrix, data: &Dataset) -> f64 {
    let pred = data.xs.matmul_t(w_eff).expect("dataset dims match model");
    let sq: f64 = pred
        .as_slice()
        .iter()
        .zip(data.ys.as_slice())
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    sq / (2.0 * data.len() as f64)
}

impl SyntheticTask {
    pub fn dims(&self) -> (usize, usize) {
        self.base.shape()
    }

    /// Per-client losses of the dense model `W + delta`.
    pub fn client_losses(&self, delta: &Matrix) -> Vec<f64> {
        let w_eff = self.base.weight().add(delta).expect("delta has the base shape");
        self.datasets.iter().map(|d| dataset_loss(&w_eff, d)).collect()
    }

    /// Mean over clients of [`dataset_loss`] at `W + delta`.
    pub fn mean_loss(&self, delta: &Matrix) -> f64 {
        let losses = self.client_losses(delta);
        losses.iter().sum::<f64>() / losses.len() as f64
    }

    /// The dense `delta` minimising [`Self::mean_loss`], from the normal
    /// equations `(W + delta) Sxx = Syx` with per-client `1/N_k` weighting.
    pub fn least_squares_delta(&self) -> Result<Matrix> {
        let (m, n) = self.dims();
        let mut sxx = Matrix::zeros(n, n);
        let mut syx = Matrix::zeros(m, n);
        for d in &self.datasets {
            let inv = 1.0 / d.len() as f64;
            sxx.axpy(inv, &d.xs.t_matmul(&d.xs)?)?;
            syx.axpy(inv, &d.ys.t_matmul(&d.xs)?)?;
        }
        // Sxx symmetric: W_opt^T = Sxx^{-1} Syx^T.
        let w_opt = solve(&sxx, &syx.transpose())?.transpose();
        w_opt.sub(self.base.weight())
    }

    pub fn least_squares_loss(&self) -> Result<f64> {
        Ok(self.mean_loss(&self.least_squares_delta()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec {
            m: 6,
            n: 4,
            target_rank: 2,
            clients: 3,
            samples_per_client: 40,
            sigma_obs: 0.0,
            heterogeneity: 0.5,
        }
    }

    #[test]
    fn homogeneous_means_are_zero() {
        let t = generate_task(&TaskSpec { heterogeneity: 0.0, ..spec() }, 1).unwrap();
        assert!(t.client_means.iter().all(|mu| mu.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn heterogeneity_sets_mean_norm() {
        let t = generate_task(&spec(), 1).unwrap();
        for mu in &t.client_means {
            let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn realizable_task_has_zero_optimum() {
        let t = generate_task(&spec(), 2).unwrap();
        assert!((t.target_delta.frobenius_norm() - 1.0).abs() < 1e-12);
        assert!(t.mean_loss(&t.target_delta) < 1e-25);
        assert!(t.least_squares_loss().unwrap() < 1e-20);
        let d = t.least_squares_delta().unwrap();
        assert!(d.sub(&t.target_delta).unwrap().frobenius_norm() < 1e-9);
    }

    #[test]
    fn noisy_task_optimum_beats_target() {
        let t = generate_task(&TaskSpec { sigma_obs: 0.3, ..spec() }, 3).unwrap();
        let opt = t.least_squares_loss().unwrap();
        assert!(opt > 0.0);
        assert!(opt <= t.mean_loss(&t.target_delta));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let s = TaskSpec {
            m: 16,
            n: 8,
            target_rank: 4,
            clients: 20,
            samples_per_client: 1000,
            sigma_obs: 0.1,
            heterogeneity: 0.3,
        };
        let a = generate_task(&s, 77).unwrap();
        let b = generate_task(&s, 77).unwrap();
        assert_eq!(a.datasets, b.datasets);
        assert_eq!(a.base, b.base);
        let c = generate_task(&s, 78).unwrap();
        assert_ne!(a.datasets, c.datasets);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_task(&TaskSpec { target_rank: 5, ..spec() }, 0).is_err());
        assert!(generate_task(&TaskSpec { clients: 0, ..spec() }, 0).is_err());
        assert!(generate_task(&TaskSpec { heterogeneity: 1.5, ..spec() }, 0).is_err());
    }

    #[test]
    fn with_record_replaces_one_row() {
        let t = generate_task(&spec(), 4).unwrap();
        let d = &t.datasets[0];
        let rec = Record { x: vec![1.0; 4], y: vec![-1.0; 6] };
        let d2 = d.with_record(3, &rec).unwrap();
        assert_eq!(d2.record(3), rec);
        for i in (0..d.len()).filter(|&i| i != 3) {
            assert_eq!(d.record(i), d2.record(i));
        }
        assert!(d.with_record(d.len(), &rec).is_err());
    }
}
