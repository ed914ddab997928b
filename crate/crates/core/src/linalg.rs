//! Small dense matrix utilities: Cholesky, log-determinant, SPD inverse,
//! trace of products and uncentered sample covariance.
//!
//! Everything is stored row-major in a `Vec<f64>`. The matrices handled here
//! are tiny (output dimension, or the parameter count for information
//! matrices), so there is no blocking or sparsity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a matrix is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Read-only view of a square matrix.
pub trait Square {
    fn dim(&self) -> usize;
    fn at(&self, i: usize, j: usize) -> f64;
}

/// General dense square matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: vec![0.0; dim * dim],
        }
    }

    pub fn from_row_major(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Ok(Self { dim, entries })
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                entries.push(f(i, j));
            }
        }
        Self { dim, entries }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.entries[i * self.dim + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self.at(j, i))
    }

    pub fn matmul(&self, other: &impl Square) -> Self {
        assert_eq!(self.dim, other.dim());
        Self::from_fn(self.dim, |i, j| {
            (0..self.dim).map(|k| self.at(i, k) * other.at(k, j)).sum()
        })
    }
}

impl Square for DenseMatrix {
    fn dim(&self) -> usize {
        self.dim
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }
}

/// Symmetric dense matrix. Construction symmetrizes, so `at(i, j) == at(j, i)`
/// holds bitwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SymMatrixRepr", into = "SymMatrixRepr")]
pub struct SymMatrix {
    inner: DenseMatrix,
}

#[derive(Serialize, Deserialize)]
struct SymMatrixRepr {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<SymMatrixRepr> for SymMatrix {
    type Error = Error;

    fn try_from(r: SymMatrixRepr) -> Result<Self> {
        SymMatrix::from_row_major(r.dim, r.entries)
    }
}

impl From<SymMatrix> for SymMatrixRepr {
    fn from(m: SymMatrix) -> Self {
        Self {
            dim: m.inner.dim,
            entries: m.inner.entries,
        }
    }
}

impl SymMatrix {
    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            inner: DenseMatrix::zeros(dim),
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        Self {
            inner: DenseMatrix::from_fn(dim, |i, j| if i == j { diag[i] } else { 0.0 }),
        }
    }

    /// Builds from row-major entries, replacing each off-diagonal pair by its
    /// average.
    pub fn from_row_major(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput);
        }
        let m = DenseMatrix::from_row_major(dim, entries)?;
        Ok(Self::symmetrize(&m))
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::symmetrize(&DenseMatrix::from_fn(dim, f))
    }

    /// `(m + mᵀ) / 2`.
    pub fn symmetrize(m: &DenseMatrix) -> Self {
        let dim = m.dim;
        let mut out = DenseMatrix::zeros(dim);
        for i in 0..dim {
            *out.get_mut(i, i) = m.at(i, i);
            for j in 0..i {
                let v = 0.5 * (m.at(i, j) + m.at(j, i));
                *out.get_mut(i, j) = v;
                *out.get_mut(j, i) = v;
            }
        }
        Self { inner: out }
    }

    pub fn as_dense(&self) -> &DenseMatrix {
        &self.inner
    }

    pub fn as_slice(&self) -> &[f64] {
        self.inner.as_slice()
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.dim()).map(|i| self.at(i, i)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::from_fn(self.dim(), |i, j| factor * self.at(i, j))
    }

    pub fn sub(&self, other: &SymMatrix) -> Self {
        Self::from_fn(self.dim(), |i, j| self.at(i, j) - other.at(i, j))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.at(i, j) * v[j]).sum())
            .collect()
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Square for SymMatrix {
    fn dim(&self) -> usize {
        self.inner.dim
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.inner.at(i, j)
    }
}

/// Lower-triangular Cholesky factor with strictly positive diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// `L · Lᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::from_fn(self.dim, |i, j| {
            (0..=i.min(j)).map(|k| self.lower(i, k) * self.lower(j, k)).sum()
        })
    }

    /// `L · v`.
    pub fn lower_mul(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..=i).map(|k| self.lower(i, k) * v[k]).sum())
            .collect()
    }

    /// Solves `A x = b` by forward then backward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut acc = y[i];
            for k in 0..i {
                acc -= self.lower(i, k) * y[k];
            }
            y[i] = acc / self.lower(i, i);
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= self.lower(k, i) * y[k];
            }
            y[i] = acc / self.lower(i, i);
        }
        y
    }
}

pub fn cholesky(m: &SymMatrix) -> Result<CholeskyFactor> {
    let n = m.dim();
    let threshold = PIVOT_TOLERANCE * m.max_diagonal().max(0.0);
    let mut lower = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = m.at(j, j);
        for k in 0..j {
            pivot -= lower[j * n + k] * lower[j * n + k];
        }
        if pivot.is_nan() || pivot <= threshold {
            return Err(Error::NotPositiveDefinite(j));
        }
        let d = pivot.sqrt();
        lower[j * n + j] = d;
        for i in (j + 1)..n {
            let mut acc = m.at(i, j);
            for k in 0..j {
                acc -= lower[i * n + k] * lower[j * n + k];
            }
            lower[i * n + j] = acc / d;
        }
    }
    Ok(CholeskyFactor { dim: n, lower })
}

/// `ln det A = 2 Σ ln L_ii`.
pub fn logdet(f: &CholeskyFactor) -> f64 {
    2.0 * (0..f.dim).map(|i| f.lower(i, i).ln()).sum::<f64>()
}

pub fn spd_inverse(f: &CholeskyFactor) -> SymMatrix {
    let n = f.dim;
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(f.solve(&e));
    }
    SymMatrix::from_fn(n, |i, j| cols[j][i])
}

/// `tr(a · b) = Σ_ij a_ij b_ji`, without forming the product.
pub fn trace_product(a: &impl Square, b: &impl Square) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "trace_product of {0}x{0} and {1}x{1}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.dim();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a.at(i, j) * b.at(j, i);
        }
    }
    Ok(acc)
}

/// Uncentered second-moment matrix `(1/n) Σ r rᵀ` of the given rows.
pub fn sample_covariance<'a, I>(rows: I) -> Result<SymMatrix>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = rows.into_iter().peekable();
    let d = match iter.peek() {
        Some(r) if !r.is_empty() => r.len(),
        _ => return Err(Error::EmptyInput),
    };
    let mut acc = vec![0.0; d * d];
    let mut count = 0usize;
    for r in iter {
        if r.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "row of length {} in {d}-dim data",
                r.len()
            )));
        }
        for i in 0..d {
            for j in 0..=i {
                acc[i * d + j] += r[i] * r[j];
            }
        }
        count += 1;
    }
    let n = count as f64;
    Ok(SymMatrix::from_fn(d, |i, j| {
        let (a, b) = if j <= i { (i, j) } else { (j, i) };
        acc[a * d + b] / n
    }))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues(m: &SymMatrix) -> Vec<f64> {
    let n = m.dim();
    let mut a: Vec<f64> = m.as_slice().to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}
