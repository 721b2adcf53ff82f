//! Low-rank adapters and stacking aggregation.
//!
//! A client's adapter is a pair `B (m x r)`, `A (r x n)` whose scaled product
//! `s * B A` (with `s = lora_scale / rank`) is added to a frozen base `W`.
//! The server combines `K` released pairs by concatenating the `B` factors
//! side by side and the `A` factors one under another:
//!
//! ```text
//! [B1 | B2 | ... | BK] . [A1; A2; ...; AK] = B1 A1 + B2 A2 + ... + BK AK
//! ```
//!
//! so the stacked product is exactly the sum of the per-client products and
//! clients may use different ranks. Aggregation weights (and the client's
//! LoRA scale) are folded into the `B` block before stacking.

use crate::error::{Error, Result};
use crate::matrix::{stack_h, stack_v, Matrix};
use crate::random::{sample_gaussian, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBase {
    w: Matrix,
}

impl FrozenBase {
    pub fn new(w: Matrix) -> Self {
        Self { w }
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w.shape()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
    lora_scale: f64,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix, lora_scale: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter::new",
                left: b.shape(),
                right: a.shape(),
            });
        }
        if !(lora_scale > 0.0) || !lora_scale.is_finite() {
            return Err(Error::invalid("lora_scale", format!("{lora_scale} must be > 0")));
        }
        Ok(Self { b, a, lora_scale })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    /// `lora_scale / rank`.
    pub fn scaling(&self) -> f64 {
        self.lora_scale / self.rank() as f64
    }

    /// Output and input dimensions `(m, n)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub(crate) fn set_factors(&mut self, b: Matrix, a: Matrix) {
        debug_assert_eq!(b.shape(), self.b.shape());
        debug_assert_eq!(a.shape(), self.a.shape());
        self.b = b;
        self.a = a;
    }

    pub fn into_factors(self) -> (Matrix, Matrix) {
        (self.b, self.a)
    }
}

/// Fresh adapter: `B = 0`, `A` entries i.i.d. `N(0, 1/r)`. Its delta is
/// exactly zero.
pub fn init_adapter(m: usize, n: usize, r: usize, lora_scale: f64, rng: &mut RngStream) -> Result<LoraAdapter> {
    if m == 0 || n == 0 || r == 0 {
        return Err(Error::invalid("adapter dims", format!("m={m}, n={n}, r={r}")));
    }
    let a = sample_gaussian(r, n, (1.0 / r as f64).sqrt(), rng)?;
    LoraAdapter::new(Matrix::zeros(m, r), a, lora_scale)
}

/// `s * B A`.
pub fn adapter_delta(ad: &LoraAdapter) -> Matrix {
    let prod = ad.b.matmul(&ad.a).expect("adapter shapes checked at construction");
    let s = ad.scaling();
    if s == 1.0 {
        prod
    } else {
        prod.scale(s)
    }
}

/// `W x + s B (A x)`.
pub fn forward(base: &FrozenBase, ad: &LoraAdapter, x: &Matrix) -> Result<Matrix> {
    let (m, n) = base.shape();
    if ad.dims() != (m, n) {
        return Err(Error::ShapeMismatch {
            op: "forward (adapter vs base)",
            left: base.shape(),
            right: ad.dims(),
        });
    }
    if x.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "forward (input)",
            left: base.shape(),
            right: x.shape(),
        });
    }
    let mut y = base.w.matmul(x)?;
    let ax = ad.a.matmul(x)?;
    let bax = ad.b.matmul(&ax)?;
    y.axpy(ad.scaling(), &bax)?;
    Ok(y)
}

/// One client's released factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub b_tilde: Matrix,
    pub a_tilde: Matrix,
    /// Aggregation weight, typically `|D_k| / sum |D|`.
    pub weight: f64,
    /// LoRA scaling `lora_scale / rank` applied to this client's product.
    /// 1 for the pure stacking identity.
    pub scale: f64,
}

impl ClientUpdate {
    pub fn new(client_id: usize, b_tilde: Matrix, a_tilde: Matrix, weight: f64) -> Result<Self> {
        if b_tilde.cols() != a_tilde.rows() {
            return Err(Error::ClientMismatch {
                client_id,
                reason: format!(
                    "B is {:?} but A is {:?}",
                    b_tilde.shape(),
                    a_tilde.shape()
                ),
            });
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::ClientMismatch {
                client_id,
                reason: format!("weight {weight} must be finite and >= 0"),
            });
        }
        Ok(Self {
            client_id,
            b_tilde,
            a_tilde,
            weight,
            scale: 1.0,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn rank(&self) -> usize {
        self.b_tilde.cols()
    }

    /// `weight * scale * B~ A~`, computed directly.
    pub fn weighted_product(&self) -> Matrix {
        self.b_tilde
            .matmul(&self.a_tilde)
            .expect("checked at construction")
            .scale(self.weight * self.scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub client_id: usize,
    pub offset: usize,
    pub rank: usize,
}

/// Stacked global factors `B~ (m x R)`, `A~ (R x n)` with `R = sum r_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAdapter {
    pub b_stacked: Matrix,
    pub a_stacked: Matrix,
    pub spans: Vec<Span>,
}

impl GlobalAdapter {
    pub fn total_rank(&self) -> usize {
        self.b_stacked.cols()
    }

    /// The `(B~_k, A~_k)` block of one span, as stored (weight included).
    pub fn block(&self, span: &Span) -> Result<(Matrix, Matrix)> {
        Ok((
            self.b_stacked.slice_cols(span.offset, span.rank)?,
            self.a_stacked.slice_rows(span.offset, span.rank)?,
        ))
    }
}

/// Stacks updates in the order given. `weight * scale` is folded into each
/// `B` block so the stacked product equals `sum_k weight_k scale_k B~_k A~_k`.
pub fn aggregate_stack(updates: &[ClientUpdate]) -> Result<GlobalAdapter> {
    let first = updates.first().ok_or(Error::Empty("aggregate_stack"))?;
    let m = first.b_tilde.rows();
    let n = first.a_tilde.cols();
    let mut b_parts = Vec::with_capacity(updates.len());
    let mut a_parts = Vec::with_capacity(updates.len());
    let mut spans = Vec::with_capacity(updates.len());
    let mut offset = 0;
    for u in updates {
        if u.b_tilde.rows() != m || u.a_tilde.cols() != n {
            return Err(Error::ClientMismatch {
                client_id: u.client_id,
                reason: format!(
                    "update is {}x{} but client {} set {m}x{n}",
                    u.b_tilde.rows(),
                    u.a_tilde.cols(),
                    first.client_id
                ),
            });
        }
        if u.b_tilde.cols() != u.a_tilde.rows() {
            return Err(Error::ClientMismatch {
                client_id: u.client_id,
                reason: "B columns differ from A rows".into(),
            });
        }
        let factor = u.weight * u.scale;
        b_parts.push(if factor == 1.0 {
            u.b_tilde.clone()
        } else {
            u.b_tilde.scale(factor)
        });
        a_parts.push(u.a_tilde.clone());
        spans.push(Span {
            client_id: u.client_id,
            offset,
            rank: u.rank(),
        });
        offset += u.rank();
    }
    Ok(GlobalAdapter {
        b_stacked: stack_h(&b_parts)?,
        a_stacked: stack_v(&a_parts)?,
        spans,
    })
}

/// `B~ A~`.
pub fn global_delta(g: &GlobalAdapter) -> Matrix {
    g.b_stacked
        .matmul(&g.a_stacked)
        .expect("stacked factors share the inner dimension")
}

/// `||stacked product - sum of per-client products||_F / (1 + ||sum||_F)`.
pub fn stacking_equivalence_residual(updates: &[ClientUpdate]) -> Result<f64> {
    let stacked = global_delta(&aggregate_stack(updates)?);
    let mut sum = Matrix::zeros(stacked.rows(), stacked.cols());
    for u in updates {
        sum.add_assign(&u.weighted_product())?;
    }
    Ok(stacked.sub(&sum)?.frobenius_norm() / (1.0 + sum.frobenius_norm()))
}
