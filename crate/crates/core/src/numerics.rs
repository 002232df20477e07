//! Dense kernels shared by every other module.
//!
//! Conventions: vectors are row vectors, so a projection `P: R^m -> R^n` is
//! stored as an `m x n` matrix and applied as `v * P`.

use crate::{Error, Real, Result};

/// Guard used by [`safe_cosine`] for near-zero norms.
pub const COSINE_EPS: f64 = 1e-8;

/// Default central-difference step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor2D<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `scale * other` in place.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    /// Row vector times matrix: `v * self`.
    pub fn left_mul(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.rows {
            return Err(Error::Shape(format!(
                "vector of length {} times {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == T::zero() {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o = *o + vi * m;
            }
        }
        Ok(out)
    }

    /// Matrix times column vector: `self * v`.
    pub fn right_mul(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.iter_rows().map(|r| dot(r, v)).collect())
    }

    /// Accumulates the outer product `u^T v` (u: rows, v: cols).
    pub fn add_outer(&mut self, u: &[T], v: &[T]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            if ui == T::zero() {
                continue;
            }
            for (a, &vj) in self.row_mut(i).iter_mut().zip(v) {
                *a = *a + ui * vj;
            }
        }
    }
}

/// Standard matrix product with an i-k-j loop order.
pub fn matmul<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o = *o + aik * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Real>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

#[inline]
pub fn norm<T: Real>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

/// Exclusion mask for [`masked_softmax`]; the additive `{0, -inf}` mask is
/// carried as explicit flags so no `-inf * 0` can ever be evaluated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdditiveMask {
    included: Vec<bool>,
}

impl AdditiveMask {
    pub fn from_included(included: Vec<bool>) -> Self {
        Self { included }
    }

    /// Mask that excludes nothing.
    pub fn none_excluded(len: usize) -> Self {
        Self {
            included: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    #[inline]
    pub fn is_included(&self, i: usize) -> bool {
        self.included[i]
    }

    pub fn included(&self) -> &[bool] {
        &self.included
    }

    pub fn count_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }
}

/// Temperature softmax `exp(x_i / t) / sum_j exp(x_j / t)` over the positions
/// the mask keeps; excluded positions come out as exact zeros.
pub fn masked_softmax<T: Real>(
    logits: &[T],
    temperature: T,
    mask: Option<&AdditiveMask>,
) -> Result<Vec<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::Argument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::Shape(format!(
                "mask of length {} for {} logits",
                m.len(),
                logits.len()
            )));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m.is_included(i));

    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, &v)| v)
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::EmptyMask)?;

    let mut out: Vec<T> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if keep(i) {
                ((v - max) / temperature).exp()
            } else {
                T::zero()
            }
        })
        .collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    Ok(out)
}

/// Vector-Jacobian product of a temperature softmax: given `p = softmax(x/t)`
/// and upstream `dL/dp`, returns `dL/dx`. Excluded entries have `p = 0` and
/// receive zero gradient.
pub fn softmax_backward<T: Real>(probs: &[T], grad_out: &[T], temperature: T) -> Vec<T> {
    let inner = dot(probs, grad_out);
    probs
        .iter()
        .zip(grad_out)
        .map(|(&p, &g)| p * (g - inner) / temperature)
        .collect()
}

#[inline]
pub fn sigmoid<T: Real>(y: T) -> T {
    if y >= T::zero() {
        T::one() / (T::one() + (-y).exp())
    } else {
        let e = y.exp();
        e / (T::one() + e)
    }
}

/// `sigmoid(exp(log_temp) * z + bias)`.
#[inline]
pub fn scaled_sigmoid<T: Real>(z: T, log_temp: T, bias: T) -> T {
    sigmoid(log_temp.exp() * z + bias)
}

/// Cosine similarity with the denominator floored at `eps` and the result
/// clamped to `[-1, 1]`.
pub fn safe_cosine<T: Real>(u: &[T], v: &[T], eps: T) -> T {
    debug_assert_eq!(u.len(), v.len());
    let denom = (norm(u) * norm(v)).max(eps);
    (dot(u, v) / denom).max(-T::one()).min(T::one())
}

/// Gradient of `safe_cosine(u, v)` with respect to both arguments, scaled by
/// `upstream`. The clamp is treated as the identity.
pub fn safe_cosine_backward<T: Real>(u: &[T], v: &[T], eps: T, upstream: T) -> (Vec<T>, Vec<T>) {
    let nu = norm(u);
    let nv = norm(v);
    let uv = dot(u, v);
    if nu * nv > eps {
        let inv = T::one() / (nu * nv);
        let c = uv * inv;
        let cu = c / (nu * nu);
        let cv = c / (nv * nv);
        let du = u
            .iter()
            .zip(v)
            .map(|(&a, &b)| upstream * (b * inv - cu * a))
            .collect();
        let dv = u
            .iter()
            .zip(v)
            .map(|(&a, &b)| upstream * (a * inv - cv * b))
            .collect();
        (du, dv)
    } else {
        let du = v.iter().map(|&b| upstream * b / eps).collect();
        let dv = u.iter().map(|&a| upstream * a / eps).collect();
        (du, dv)
    }
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&[T]) -> T,
    theta: &[T],
    h: T,
) -> Result<Vec<T>> {
    if !(h > T::zero()) {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error<T: Real>(a: T, b: T) -> T {
    (a - b).abs() / a.abs().max(b.abs()).max(T::lit(1e-8))
}
