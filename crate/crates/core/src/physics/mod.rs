//! Discretized forward models `L(u, y) = 0` with the first- and second-order
//! derivative assemblies needed by the adjoint module.

mod direct;
mod fv;
mod linear;
mod nonlinear;
mod tridiag;

pub use direct::DirectObservation;
pub use linear::LinearDiffusion;
pub use nonlinear::NonlinearDiffusion;
pub use tridiag::{Tridiagonal, TridiagonalLu};

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gp_prior::CoordinateSet;
use crate::scalar::Scalar;

/// Residual and first derivatives of the constraint at `(u, y)`.
#[derive(Debug, Clone)]
pub struct SensitivityBundle<T: Scalar> {
    pub residual: DVector<T>,
    /// `∂L/∂u`, tridiagonal for the 1D models.
    pub jac_u: Tridiagonal<T>,
    /// `∂L/∂y`, `M × N`.
    pub jac_y: DMatrix<T>,
}

/// A discretized physics constraint with `M` state and `N` coefficient degrees of freedom.
pub trait PhysicsModel<T: Scalar>: Send + Sync {
    /// `M`.
    fn state_dim(&self) -> usize;
    /// `N`.
    fn param_dim(&self) -> usize;
    /// Coordinates of the coefficient degrees of freedom (space or state values).
    fn coefficient_coordinates(&self) -> &CoordinateSet<T>;
    /// Spatial locations of the state degrees of freedom.
    fn state_coordinates(&self) -> Vec<T>;

    fn residual(&self, u: &DVector<T>, y: &DVector<T>) -> Result<DVector<T>>;
    fn sensitivities(&self, u: &DVector<T>, y: &DVector<T>) -> Result<SensitivityBundle<T>>;
    fn solve_forward(&self, y: &DVector<T>) -> Result<DVector<T>>;

    /// `(i, j) ↦ λᵀ[∂²L/∂yᵢ∂yⱼ + ∂²L/∂yᵢ∂u vⱼ + ∂²L/∂yⱼ∂u vᵢ + ∂²L/∂u²(vᵢ, vⱼ)]`
    /// with `vᵢ = ∂u/∂yᵢ` the columns of `du_dy`.
    fn lambda_d2l_contraction(
        &self,
        u: &DVector<T>,
        y: &DVector<T>,
        lambda: &DVector<T>,
        du_dy: &DMatrix<T>,
    ) -> Result<DMatrix<T>>;
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central finite difference of the residual in `u`, column by column.
    pub fn fd_jac_u<T: Scalar, P: PhysicsModel<T>>(p: &P, u: &DVector<T>, y: &DVector<T>) -> DMatrix<f64> {
        let m = u.len();
        let mut out = DMatrix::zeros(m, m);
        for j in 0..m {
            let h = 1e-6 * (1.0 + u[j].to_f64_lossy().abs());
            let mut up = u.clone();
            up[j] += T::lit(h);
            let mut dn = u.clone();
            dn[j] -= T::lit(h);
            let d = (p.residual(&up, y).unwrap() - p.residual(&dn, y).unwrap()) / T::lit(2.0 * h);
            for i in 0..m {
                out[(i, j)] = d[i].to_f64_lossy();
            }
        }
        out
    }

    pub fn fd_jac_y<T: Scalar, P: PhysicsModel<T>>(p: &P, u: &DVector<T>, y: &DVector<T>) -> DMatrix<f64> {
        let m = u.len();
        let n = y.len();
        let mut out = DMatrix::zeros(m, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + y[j].to_f64_lossy().abs());
            let mut yp = y.clone();
            yp[j] += T::lit(h);
            let mut yn = y.clone();
            yn[j] -= T::lit(h);
            let d = (p.residual(u, &yp).unwrap() - p.residual(u, &yn).unwrap()) / T::lit(2.0 * h);
            for i in 0..m {
                out[(i, j)] = d[i].to_f64_lossy();
            }
        }
        out
    }

    pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }
}
