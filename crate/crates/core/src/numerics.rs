//! Dense f64 kernels shared by every other module.
//!
//! All reductions run left to right so results are bit-reproducible. Features
//! are stored as f32 on disk but every computation here is f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound on a norm before normalization is refused.
pub const EPS_NORM: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(rows * cols, data.len()));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite);
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. `cols` is needed for the empty case.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
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

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::dim(self.cols, other.cols));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y`, accumulated row by row.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &w) in self.iter_rows().zip(y) {
            for (o, &a) in out.iter_mut().zip(r) {
                *o += w * a;
            }
        }
        out
    }

    /// `self += a ⊗ b`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (o, &bj) in self.row_mut(i).iter_mut().zip(b) {
                *o += ai * bj;
            }
        }
    }
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if all_finite(xs) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Sequential left-to-right inner product. Lengths must match.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Divides `v` by its Euclidean norm. Fails with `ZeroNorm` when the norm is `<= eps`.
pub fn l2_normalize_eps(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_finite(v)?;
    let n = norm(v);
    if n <= eps {
        return Err(Error::ZeroNorm { norm: n, eps });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    l2_normalize_eps(v, EPS_NORM)
}

/// Cosine similarity, clamped to [-1, 1]. Symmetric in its arguments bit for bit.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(u.len(), v.len()));
    }
    check_finite(u)?;
    check_finite(v)?;
    let nu = norm(u);
    let nv = norm(v);
    for n in [nu, nv] {
        if n <= EPS_NORM {
            return Err(Error::ZeroNorm { norm: n, eps: EPS_NORM });
        }
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `log Σ exp(x_i)` with max subtraction.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_finite(xs)?;
    Ok(logsumexp_unchecked(xs))
}

/// Same as [`logsumexp`] for inputs already known to be non-empty and finite.
pub(crate) fn logsumexp_unchecked(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Softmax of `xs / tau`.
pub fn stable_softmax(xs: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_finite(xs)?;
    let scaled: Vec<f64> = xs.iter().map(|x| x / tau).collect();
    Ok(softmax_unchecked(&scaled))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let mut s = 0.0;
    for x in &e {
        s += x;
    }
    e.into_iter().map(|x| x / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
