//! Dense row-major matrices and the handful of solves the rest of the crate needs.
//!
//! Vectors are column matrices (`n x 1`). Shapes are always explicit; no
//! operation broadcasts. Everything is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative cutoff below which eigenvalues are dropped by the pseudo-inverse.
pub const PINV_RCOND: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "tensor data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::InvalidInput("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a `dim x n` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[&[f64]], dim: usize) -> Result<Self> {
        let n = columns.len();
        let mut t = Self::zeros(dim, n);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::Dimension {
                    op: "from_columns",
                    left: (dim, 1),
                    right: (c.len(), 1),
                });
            }
            for (i, v) in c.iter().enumerate() {
                t.data[i * n + j] = *v;
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn column_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// `self += other`, in place.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * m..(p + 1) * m];
                for (c, bv) in row.iter_mut().zip(b) {
                    *c += a * bv;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a = &self.data[p * n..(p + 1) * n];
            let b = &other.data[p * m..(p + 1) * m];
            for (i, av) in a.iter().enumerate() {
                let row = &mut out[i * m..(i + 1) * m];
                for (c, bv) in row.iter_mut().zip(b) {
                    *c += av * bv;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// n-fold elementwise product `x ∘ x ∘ … ∘ x`, accumulated left to right.
    pub fn hadamard_power(&self, n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("hadamard power must be >= 1".into()));
        }
        let mut acc = self.clone();
        for _ in 1..n {
            for (a, x) in acc.data.iter_mut().zip(&self.data) {
                *a *= x;
            }
        }
        Ok(acc)
    }

    /// Gathers the listed columns, in order.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.cols) {
            return Err(Error::InvalidInput(format!(
                "column index {bad} out of range for {} columns",
                self.cols
            )));
        }
        let m = indices.len();
        let mut out = Self::zeros(self.rows, m);
        for i in 0..self.rows {
            for (k, &j) in indices.iter().enumerate() {
                out.data[i * m + k] = self.data[i * self.cols + j];
            }
        }
        Ok(out)
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Elementwise product `a ∘ b`.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.hadamard(b)
}

/// Solves the square system `a x = b` by LU with partial pivoting.
///
/// `b` may carry several right-hand sides as columns.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::Dimension {
            op: "solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let m = b.cols();
    let mut lu = a.data.clone();
    let mut x = b.data.clone();
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, lu[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax == 0.0 || !pmax.is_finite() {
            return Err(Error::Numeric("singular matrix in solve".into()));
        }
        if piv != col {
            for j in 0..n {
                lu.swap(col * n + j, piv * n + j);
            }
            for j in 0..m {
                x.swap(col * m + j, piv * m + j);
            }
        }
        let d = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
            for j in 0..m {
                x[r * m + j] -= f * x[col * m + j];
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[col * n + col];
        for j in 0..m {
            let mut s = x[col * m + j];
            for k in col + 1..n {
                s -= lu[col * n + k] * x[k * m + j];
            }
            x[col * m + j] = s / d;
        }
    }
    Tensor::new(n, m, x)
}

/// Cholesky factor `L` with `a = L L^T`, or `None` if `a` is not numerically SPD.
fn cholesky(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for j in 0..m {
        for i in 0..n {
            let mut s = x.get(i, j);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, j);
            }
            x.set(i, j, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, j);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, j);
            }
            x.set(i, j, s / l.get(i, i));
        }
    }
    x
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns)`.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension {
            op: "symmetric_eigen",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let mut m = a.clone();
    let mut v = Tensor::identity(n);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let values = (0..n).map(|i| m.get(i, i)).collect();
    Ok((values, v))
}

/// Pseudo-inverse solve for a symmetric matrix, truncating eigenvalues with
/// magnitude below `PINV_RCOND` times the largest.
pub fn symmetric_pinv_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (values, vecs) = symmetric_eigen(a)?;
    let largest = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = PINV_RCOND * largest;
    // x = V diag(1/λ) V^T b over the retained spectrum
    let mut proj = vecs.matmul_tn(b)?;
    for (i, lam) in values.iter().enumerate() {
        let inv = if lam.abs() > cutoff { 1.0 / lam } else { 0.0 };
        for j in 0..proj.cols() {
            let v = proj.get(i, j) * inv;
            proj.set(i, j, v);
        }
    }
    vecs.matmul(&proj)
}

/// Solves `(k + lambda I) alpha = y` for symmetric `k`.
///
/// Cholesky is tried first; if the regularized matrix is not numerically
/// positive definite, or the Cholesky answer misses the residual bound, the
/// truncated-eigenvalue pseudo-inverse is used instead.
pub fn solve_regularized(k: &Tensor, lambda: f64, y: &Tensor) -> Result<Tensor> {
    let n = k.rows();
    if k.cols() != n {
        return Err(Error::Dimension {
            op: "solve_regularized",
            left: k.shape(),
            right: k.shape(),
        });
    }
    if y.rows() != n {
        return Err(Error::Dimension {
            op: "solve_regularized",
            left: k.shape(),
            right: y.shape(),
        });
    }
    if !k.is_finite() || !y.is_finite() || !lambda.is_finite() {
        return Err(Error::InvalidInput("non-finite value in regularized solve".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut a = k.clone();
    for i in 0..n {
        let d = a.get(i, i) + lambda;
        a.set(i, i, d);
    }
    if let Some(l) = cholesky(&a) {
        let x = cholesky_solve(&l, y);
        let resid = a.matmul(&x)?.sub(y)?.max_abs();
        if resid <= 1e-8 * (1.0 + y.max_abs()) {
            return Ok(x);
        }
    }
    symmetric_pinv_solve(&a, y)
}
