use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Tridiagonal matrix stored by diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal<T: Scalar> {
    /// `A[i+1][i]`, length `n-1`.
    pub lower: Vec<T>,
    /// `A[i][i]`, length `n`.
    pub diag: Vec<T>,
    /// `A[i][i+1]`, length `n-1`.
    pub upper: Vec<T>,
}

/// LU factors without pivoting: unit lower bidiagonal `l` and upper bidiagonal
/// with pivots `d` and the original super-diagonal.
#[derive(Debug, Clone)]
pub struct TridiagonalLu<T: Scalar> {
    l: Vec<T>,
    d: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> Tridiagonal<T> {
    pub fn zeros(n: usize) -> Self {
        let off = n.saturating_sub(1);
        Tridiagonal {
            lower: vec![T::zero(); off],
            diag: vec![T::zero(); n],
            upper: vec![T::zero(); off],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Add `v` at `(i, j)`; `|i - j| <= 1` is required.
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        if i == j {
            self.diag[i] += v;
        } else if j + 1 == i {
            self.lower[j] += v;
        } else if i + 1 == j {
            self.upper[i] += v;
        } else {
            panic!("({i}, {j}) outside tridiagonal band");
        }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if i == j {
            self.diag[i]
        } else if j + 1 == i {
            self.lower[j]
        } else if i + 1 == j {
            self.upper[i]
        } else {
            T::zero()
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        let n = self.dim();
        DVector::from_fn(n, |i, _| {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            acc
        })
    }

    pub fn factorize(&self) -> Result<TridiagonalLu<T>> {
        let n = self.dim();
        let scale = self
            .diag
            .iter()
            .chain(&self.lower)
            .chain(&self.upper)
            .fold(T::zero(), |m, v| m.max(v.abs()));
        let tiny = scale * T::default_epsilon();
        let mut l = vec![T::zero(); n];
        let mut d = vec![T::zero(); n];
        for i in 0..n {
            if i == 0 {
                d[0] = self.diag[0];
            } else {
                l[i] = self.lower[i - 1] / d[i - 1];
                d[i] = self.diag[i] - l[i] * self.upper[i - 1];
            }
            if !(d[i].abs() > tiny) || !d[i].is_finite() {
                return Err(Error::Singular("tridiagonal factorization"));
            }
        }
        Ok(TridiagonalLu {
            l,
            d,
            upper: self.upper.clone(),
        })
    }
}

impl<T: Scalar> TridiagonalLu<T> {
    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &DVector<T>) -> Result<DVector<T>> {
        let n = self.dim();
        check_dim("tridiagonal solve", n, b.len())?;
        let mut x = b.clone();
        for i in 1..n {
            let prev = x[i - 1];
            x[i] -= self.l[i] * prev;
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                let next = x[i + 1];
                x[i] -= self.upper[i] * next;
            }
            x[i] /= self.d[i];
        }
        Ok(x)
    }

    /// Solve `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &DVector<T>) -> Result<DVector<T>> {
        let n = self.dim();
        check_dim("tridiagonal transpose solve", n, b.len())?;
        let mut x = b.clone();
        for i in 0..n {
            if i > 0 {
                let prev = x[i - 1];
                x[i] -= self.upper[i - 1] * prev;
            }
            x[i] /= self.d[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let next = x[i + 1];
            x[i] -= self.l[i + 1] * next;
        }
        Ok(x)
    }

    /// Solve `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_dim("tridiagonal matrix solve", self.dim(), b.nrows())?;
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve(&b.column(j).into_owned())?;
            out.set_column(j, &col);
        }
        Ok(out)
    }
}
