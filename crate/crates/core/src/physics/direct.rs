use nalgebra::{DMatrix, DVector};

use super::tridiag::Tridiagonal;
use super::{PhysicsModel, SensitivityBundle};
use crate::error::{check_dim, Result};
use crate::gp_prior::CoordinateSet;
use crate::scalar::Scalar;

/// Model without a physics constraint (`M = 0`): only direct observations of
/// `y` enter the likelihood. Used for conjugate Gaussian checks.
#[derive(Debug, Clone)]
pub struct DirectObservation<T: Scalar> {
    coords: CoordinateSet<T>,
}

impl<T: Scalar> DirectObservation<T> {
    pub fn new(coords: CoordinateSet<T>) -> Self {
        DirectObservation { coords }
    }
}

impl<T: Scalar> PhysicsModel<T> for DirectObservation<T> {
    fn state_dim(&self) -> usize {
        0
    }

    fn param_dim(&self) -> usize {
        self.coords.len()
    }

    fn coefficient_coordinates(&self) -> &CoordinateSet<T> {
        &self.coords
    }

    fn state_coordinates(&self) -> Vec<T> {
        Vec::new()
    }

    fn residual(&self, u: &DVector<T>, y: &DVector<T>) -> Result<DVector<T>> {
        check_dim("state vector", 0, u.len())?;
        check_dim("parameter vector", self.coords.len(), y.len())?;
        Ok(DVector::zeros(0))
    }

    fn sensitivities(&self, u: &DVector<T>, y: &DVector<T>) -> Result<SensitivityBundle<T>> {
        let residual = self.residual(u, y)?;
        Ok(SensitivityBundle {
            residual,
            jac_u: Tridiagonal::zeros(0),
            jac_y: DMatrix::zeros(0, self.coords.len()),
        })
    }

    fn solve_forward(&self, y: &DVector<T>) -> Result<DVector<T>> {
        check_dim("parameter vector", self.coords.len(), y.len())?;
        Ok(DVector::zeros(0))
    }

    fn lambda_d2l_contraction(
        &self,
        _u: &DVector<T>,
        y: &DVector<T>,
        _lambda: &DVector<T>,
        _du_dy: &DMatrix<T>,
    ) -> Result<DMatrix<T>> {
        let n = self.coords.len();
        check_dim("parameter vector", n, y.len())?;
        Ok(DMatrix::zeros(n, n))
    }
}
