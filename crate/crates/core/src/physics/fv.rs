//! Cell-centered finite-volume assembly on a uniform 1D mesh of `[0, 1]`.
//!
//! Every face carries a flux `g = τ exp(s) (u_left − u_right)` where `s` is the
//! log-conductance of the face, a function of the local variables
//! `[u_left, u_right, c0, c1]`; `c0`/`c1` are coefficient values that map to
//! the global parameter vector through short sparse weight lists. Models only
//! supply `s` with its gradient and Hessian in those local variables; residual,
//! Jacobians and the second-order adjoint contraction all follow from it.

use nalgebra::{DMatrix, DVector};

use super::tridiag::Tridiagonal;
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Sparse map from a local coefficient variable to the global parameter vector.
pub(crate) type CoefDir<T> = [(usize, T); 2];

/// Log-conductance of one face and its derivatives in the local variables
/// `[u_left, u_right, c0, c1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogConductance<T> {
    pub s: T,
    pub grad: [T; 4],
    pub hess: [[T; 4]; 4],
    pub coef: [CoefDir<T>; 2],
}

/// Either an interior cell index or a Dirichlet value.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Side<T> {
    Cell(usize),
    Boundary(T),
}

/// Models plug their coefficient law into the shared assembly through this.
pub(crate) trait FaceLaw<T: Scalar> {
    fn cells(&self) -> usize;
    fn params(&self) -> usize;
    fn boundary(&self) -> (T, T);
    fn log_conductance(&self, face: usize, a: T, b: T, y: &DVector<T>) -> LogConductance<T>;
}

pub(crate) fn cell_centers<T: Scalar>(m: usize) -> Vec<T> {
    let h = T::one() / T::lit(m as f64);
    (0..m).map(|i| (T::lit(i as f64) + T::lit(0.5)) * h).collect()
}

fn sides<T: Scalar>(m: usize, face: usize, bc: (T, T)) -> (Side<T>, Side<T>) {
    let left = if face == 0 {
        Side::Boundary(bc.0)
    } else {
        Side::Cell(face - 1)
    };
    let right = if face == m {
        Side::Boundary(bc.1)
    } else {
        Side::Cell(face)
    };
    (left, right)
}

fn value<T: Scalar>(side: Side<T>, u: &DVector<T>) -> T {
    match side {
        Side::Cell(i) => u[i],
        Side::Boundary(v) => v,
    }
}

/// Face transmissibility factor `τ` (1/h interior, 2/h at the boundary).
fn tau<T: Scalar>(m: usize, face: usize) -> T {
    let inv_h = T::lit(m as f64);
    if face == 0 || face == m {
        inv_h * T::lit(2.0)
    } else {
        inv_h
    }
}

struct FaceEval<T> {
    left: Side<T>,
    right: Side<T>,
    g: T,
    grad: [T; 4],
    hess: [[T; 4]; 4],
    coef: [CoefDir<T>; 2],
}

fn eval_face<T: Scalar, L: FaceLaw<T>>(
    law: &L,
    face: usize,
    u: &DVector<T>,
    y: &DVector<T>,
    need_hess: bool,
) -> FaceEval<T> {
    let m = law.cells();
    let (left, right) = sides(m, face, law.boundary());
    let a = value(left, u);
    let b = value(right, u);
    let lc = law.log_conductance(face, a, b, y);
    let t = tau::<T>(m, face);
    let k = lc.s.exp();
    let delta = a - b;
    let ddelta = [T::one(), -T::one(), T::zero(), T::zero()];
    let g = t * k * delta;
    let mut grad = [T::zero(); 4];
    for i in 0..4 {
        grad[i] = t * k * (lc.grad[i] * delta + ddelta[i]);
    }
    let mut hess = [[T::zero(); 4]; 4];
    if need_hess {
        for i in 0..4 {
            for j in 0..4 {
                hess[i][j] = t
                    * k
                    * ((lc.grad[i] * lc.grad[j] + lc.hess[i][j]) * delta
                        + lc.grad[i] * ddelta[j]
                        + lc.grad[j] * ddelta[i]);
            }
        }
    }
    FaceEval {
        left,
        right,
        g,
        grad,
        hess,
        coef: lc.coef,
    }
}

fn check_inputs<T: Scalar, L: FaceLaw<T>>(law: &L, u: &DVector<T>, y: &DVector<T>) -> Result<()> {
    check_dim("state vector", law.cells(), u.len())?;
    check_dim("parameter vector", law.params(), y.len())?;
    Ok(())
}

pub(crate) fn residual<T: Scalar, L: FaceLaw<T>>(law: &L, u: &DVector<T>, y: &DVector<T>) -> Result<DVector<T>> {
    check_inputs(law, u, y)?;
    let m = law.cells();
    let mut r: DVector<T> = DVector::zeros(m);
    for face in 0..=m {
        let f = eval_face(law, face, u, y, false);
        if let Side::Cell(i) = f.left {
            r[i] += f.g;
        }
        if let Side::Cell(j) = f.right {
            r[j] -= f.g;
        }
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual"));
    }
    Ok(r)
}

/// Residual, tridiagonal `∂L/∂u` and dense `∂L/∂y`.
pub(crate) fn sensitivities<T: Scalar, L: FaceLaw<T>>(
    law: &L,
    u: &DVector<T>,
    y: &DVector<T>,
) -> Result<(DVector<T>, Tridiagonal<T>, DMatrix<T>)> {
    check_inputs(law, u, y)?;
    let m = law.cells();
    let mut r: DVector<T> = DVector::zeros(m);
    let mut ju = Tridiagonal::zeros(m);
    let mut jy: DMatrix<T> = DMatrix::zeros(m, law.params());
    for face in 0..=m {
        let f = eval_face(law, face, u, y, false);
        for (side, sign) in [(f.left, T::one()), (f.right, -T::one())] {
            let Side::Cell(row) = side else { continue };
            r[row] += sign * f.g;
            if let Side::Cell(c) = f.left {
                ju.add(row, c, sign * f.grad[0]);
            }
            if let Side::Cell(c) = f.right {
                ju.add(row, c, sign * f.grad[1]);
            }
            for (slot, dir) in f.coef.iter().enumerate() {
                for &(k, w) in dir {
                    jy[(row, k)] += sign * f.grad[2 + slot] * w;
                }
            }
        }
    }
    if r.iter().any(|v| !v.is_finite()) || jy.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sensitivities"));
    }
    Ok((r, ju, jy))
}

/// `Σ_f (λ_left − λ_right) Dᵀ G_f D`, i.e. `λᵀ D²L` along the sensitivity
/// directions `du/dy`, symmetrized.
pub(crate) fn lambda_contraction<T: Scalar, L: FaceLaw<T>>(
    law: &L,
    u: &DVector<T>,
    y: &DVector<T>,
    lambda: &DVector<T>,
    du_dy: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    check_inputs(law, u, y)?;
    let m = law.cells();
    let n = law.params();
    check_dim("adjoint vector", m, lambda.len())?;
    check_dim("du/dy rows", m, du_dy.nrows())?;
    check_dim("du/dy columns", n, du_dy.ncols())?;
    let mut out = DMatrix::zeros(n, n);
    let mut dirs = DMatrix::zeros(4, n);
    for face in 0..=m {
        let f = eval_face(law, face, u, y, true);
        let lam = |s: Side<T>| match s {
            Side::Cell(i) => lambda[i],
            Side::Boundary(_) => T::zero(),
        };
        let weight = lam(f.left) - lam(f.right);
        if weight == T::zero() {
            continue;
        }
        dirs.fill(T::zero());
        for (row, side) in [(0usize, f.left), (1, f.right)] {
            if let Side::Cell(i) = side {
                dirs.row_mut(row).copy_from(&du_dy.row(i));
            }
        }
        for (slot, dir) in f.coef.iter().enumerate() {
            for &(k, w) in dir {
                dirs[(2 + slot, k)] += w;
            }
        }
        let g = DMatrix::from_fn(4, 4, |i, j| f.hess[i][j]);
        let gd = &g * &dirs;
        out.gemm_tr(weight, &dirs, &gd, T::one());
    }
    Ok((&out + out.transpose()) * T::lit(0.5))
}

/// Segment `m` of a strictly increasing grid used to interpolate at `x`, and
/// the local coordinate `t = (x − p_m)/(p_{m+1} − p_m)`. Outside the grid the
/// end segments are used, so `t` may leave `[0, 1]`.
pub(crate) fn segment<T: Scalar>(points: &[T], x: T) -> (usize, T) {
    let n = points.len();
    debug_assert!(n >= 2);
    let idx = points.partition_point(|p| *p <= x);
    let seg = idx.saturating_sub(1).min(n - 2);
    let t = (x - points[seg]) / (points[seg + 1] - points[seg]);
    (seg, t)
}
