//! Dense row-major tensors with the handful of forward/backward primitives
//! the MoLE layer and the tiny language model need.
//!
//! Matrix products go through `matrixmultiply`'s strided GEMM; everything
//! else is plain loops over `f64` slices.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The only randomness source in the crate.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

fn check_finite(what: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::validation(what, format!("non-finite entry at index {i}"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Tensor2D::from_vec", Shape(rows, cols), "positive dims"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2D::from_vec",
                Shape(rows, cols),
                format!("{} elements", data.len()),
            ));
        }
        check_finite("Tensor2D", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor2D::from_rows", "ragged rows", Shape(rows.len(), cols)));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Zero matrix. Zero-sized dimensions are allowed here for internal
    /// bookkeeping (e.g. an empty set of scored positions).
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn random_uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    /// Gaussian entries via Box-Muller.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random::<f64>();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape(self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Tensor2D::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", self.shape(), other.shape()));
        }
        let mut out = Tensor2D::zeros(self.rows, other.rows);
        gemm(1.0, self.view(), other.view().t(), 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", self.shape(), other.shape()));
        }
        let mut out = Tensor2D::zeros(self.cols, other.cols);
        gemm(1.0, self.view().t(), other.view(), 0.0, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, x: &Tensor1D) -> Result<Tensor1D> {
        if self.cols != x.len() {
            return Err(Error::shape("matvec", self.shape(), format!("vector of {}", x.len())));
        }
        Ok(Tensor1D {
            data: self.rows_iter().map(|row| dot(row, &x.data)).collect(),
        })
    }

    /// `selfᵀ · x`.
    pub fn t_matvec(&self, x: &Tensor1D) -> Result<Tensor1D> {
        if self.rows != x.len() {
            return Err(Error::shape("t_matvec", self.shape(), format!("vector of {}", x.len())));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &xi) in self.rows_iter().zip(&x.data) {
            axpy(xi, row, &mut out);
        }
        Ok(Tensor1D { data: out })
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn view(&self) -> MatView<'_> {
        MatView {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor1D {
    data: Vec<f64>,
}

impl Tensor1D {
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("Tensor1D::from_vec", "empty vector", "len >= 1"));
        }
        check_finite("Tensor1D", &data)?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn random_uniform(len: usize, bound: f64, rng: &mut Rng) -> Self {
        Self {
            data: (0..len).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Tensor1D) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn as_row(&self) -> Tensor2D {
        Tensor2D {
            rows: 1,
            cols: self.data.len(),
            data: self.data.clone(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

impl From<Tensor1D> for Vec<f64> {
    fn from(t: Tensor1D) -> Self {
        t.data
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// First index of the maximum; ties resolve to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Borrowed strided matrix, used to feed GEMM without copying transposes.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Columns `start..start + width` of a row-major matrix.
    pub fn col_block(data: &'a [f64], rows: usize, stride: usize, start: usize, width: usize) -> Self {
        MatView {
            data: &data[start..],
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `out ← alpha · a · b + beta · out`, all row-major except for the views'
/// strides.
pub(crate) fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, out: &mut Tensor2D) {
    let (rows, cols) = (out.rows, out.cols);
    gemm_raw(alpha, a, b, beta, &mut out.data, rows, cols, cols);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_raw(
    alpha: f64,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    out: &mut [f64],
    rows: usize,
    cols: usize,
    out_stride: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (rows, cols), "gemm output shape");
    if rows == 0 || cols == 0 {
        return;
    }
    if a.cols == 0 {
        if beta == 0.0 {
            for r in 0..rows {
                out[r * out_stride..r * out_stride + cols].fill(0.0);
            }
        }
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    assert!((rows - 1) * out_stride + cols <= out.len());
    // SAFETY: every offset touched is bounded by the asserts above; `out`
    // is uniquely borrowed and cannot alias the shared inputs.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            a.cols,
            cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &Tensor1D) -> Result<Tensor1D> {
    if z.is_empty() {
        return Err(Error::shape("softmax", "empty vector", "len >= 1"));
    }
    let mut data = z.data.clone();
    softmax_in_place(&mut data);
    Ok(Tensor1D { data })
}

pub(crate) fn softmax_jvp_into(y: &[f64], upstream: &[f64], out: &mut [f64]) {
    let s = dot(y, upstream);
    for ((o, &yi), &ui) in out.iter_mut().zip(y).zip(upstream) {
        *o = yi * (ui - s);
    }
}

/// `Jᵀ · upstream` for the softmax Jacobian `J_ij = y_i (δ_ij − y_j)`.
pub fn softmax_jacobian_vecprod(y: &Tensor1D, upstream: &Tensor1D) -> Result<Tensor1D> {
    if y.len() != upstream.len() {
        return Err(Error::shape(
            "softmax_jacobian_vecprod",
            format!("y of {}", y.len()),
            format!("upstream of {}", upstream.len()),
        ));
    }
    let mut data = vec![0.0; y.len()];
    softmax_jvp_into(&y.data, &upstream.data, &mut data);
    Ok(Tensor1D { data })
}

/// Mean negative log-likelihood over the masked rows, with its gradient
/// with respect to `logits`. Unmasked rows get a zero gradient.
pub fn cross_entropy_with_grad(
    logits: &Tensor2D,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Tensor2D)> {
    if targets.len() != logits.rows || mask.len() != logits.rows {
        return Err(Error::shape(
            "cross_entropy_with_grad",
            logits.shape(),
            format!("{} targets / {} mask entries", targets.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("cross-entropy mask selects no positions".into()));
    }
    let scale = 1.0 / count as f64;
    let mut grad = Tensor2D::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= logits.cols {
            return Err(Error::Range(format!("target {t} >= vocabulary {}", logits.cols)));
        }
        let g = grad.row_mut(r);
        g.copy_from_slice(logits.row(r));
        softmax_in_place(g);
        loss -= g[t].max(f64::MIN_POSITIVE).ln();
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grad))
}
