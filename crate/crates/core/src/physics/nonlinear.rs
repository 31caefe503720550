use nalgebra::{DMatrix, DVector};

use super::fv::{self, FaceLaw, LogConductance};
use super::{PhysicsModel, SensitivityBundle};
use crate::error::{Error, Result};
use crate::gp_prior::CoordinateSet;
use crate::instrument;
use crate::scalar::Scalar;

/// Newton iteration cap.
pub const MAX_NEWTON_ITERATIONS: usize = 50;
/// Smallest damping factor tried by the halving line search (2⁻²⁰).
pub const MIN_NEWTON_STEP: f64 = 1.0 / 1_048_576.0;

/// `d/dx (k(u) du/dx) = 0` on `[0, 1]` with Dirichlet ends, `k = exp(y(u))`.
///
/// `y(u)` is tabulated at `N` equispaced states on `[u_min, 0]` and
/// interpolated linearly (extrapolated from the end segments). Each face
/// evaluates `y` at the arithmetic mean of its two adjacent states, the
/// Dirichlet value standing in for the missing cell at the boundary.
#[derive(Debug, Clone)]
pub struct NonlinearDiffusion<T: Scalar> {
    m: usize,
    grid: CoordinateSet<T>,
    u_left: T,
    u_right: T,
    u_min: T,
}

impl<T: Scalar> NonlinearDiffusion<T> {
    pub fn new(m: usize, n: usize, u_left: T, u_right: T, u_min: T) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidInput("nonlinear model needs M >= 2".into()));
        }
        if !(u_min < u_left && u_left < u_right && u_right <= T::zero()) {
            return Err(Error::InvalidInput(format!(
                "nonlinear model requires u_min < u_L < u_R <= 0 (got {u_min}, {u_left}, {u_right})"
            )));
        }
        let grid = CoordinateSet::linspace(u_min, T::zero(), n)?;
        Ok(NonlinearDiffusion {
            m,
            grid,
            u_left,
            u_right,
            u_min,
        })
    }

    pub fn boundary_values(&self) -> (T, T) {
        (self.u_left, self.u_right)
    }

    pub fn u_min(&self) -> T {
        self.u_min
    }

    fn initial_guess(&self) -> DVector<T> {
        let x = fv::cell_centers::<T>(self.m);
        DVector::from_fn(self.m, |i, _| self.u_left + (self.u_right - self.u_left) * x[i])
    }
}

impl<T: Scalar> FaceLaw<T> for NonlinearDiffusion<T> {
    fn cells(&self) -> usize {
        self.m
    }

    fn params(&self) -> usize {
        self.grid.len()
    }

    fn boundary(&self) -> (T, T) {
        (self.u_left, self.u_right)
    }

    fn log_conductance(&self, _face: usize, a: T, b: T, y: &DVector<T>) -> LogConductance<T> {
        let pts = self.grid.as_slice();
        let half = T::lit(0.5);
        let ubar = (a + b) * half;
        let (seg, t) = fv::segment(pts, ubar);
        let width = pts[seg + 1] - pts[seg];
        let (y0, y1) = (y[seg], y[seg + 1]);
        let s = (T::one() - t) * y0 + t * y1;
        let ds = half * (y1 - y0) / width;
        let dw = half / width;
        let z = T::zero();
        LogConductance {
            s,
            grad: [ds, ds, T::one() - t, t],
            hess: [
                [z, z, -dw, dw],
                [z, z, -dw, dw],
                [-dw, -dw, z, z],
                [dw, dw, z, z],
            ],
            coef: [[(seg, T::one()), (seg, z)], [(seg + 1, T::one()), (seg + 1, z)]],
        }
    }
}

impl<T: Scalar> PhysicsModel<T> for NonlinearDiffusion<T> {
    fn state_dim(&self) -> usize {
        self.m
    }

    fn param_dim(&self) -> usize {
        self.grid.len()
    }

    fn coefficient_coordinates(&self) -> &CoordinateSet<T> {
        &self.grid
    }

    fn state_coordinates(&self) -> Vec<T> {
        fv::cell_centers(self.m)
    }

    fn residual(&self, u: &DVector<T>, y: &DVector<T>) -> Result<DVector<T>> {
        fv::residual(self, u, y)
    }

    fn sensitivities(&self, u: &DVector<T>, y: &DVector<T>) -> Result<SensitivityBundle<T>> {
        let (residual, jac_u, jac_y) = fv::sensitivities(self, u, y)?;
        Ok(SensitivityBundle {
            residual,
            jac_u,
            jac_y,
        })
    }

    /// Damped Newton with a halving line search on `‖r‖₂`; converged when
    /// `‖r‖∞ ≤ 1e-12 · max(1, ‖r(u₀)‖∞)`.
    fn solve_forward(&self, y: &DVector<T>) -> Result<DVector<T>> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient vector"));
        }
        instrument::forward_solve();
        let mut u = self.initial_guess();
        let mut r = fv::residual(self, &u, y)?;
        let scale = T::one().max(r.amax());
        let tol = T::tol(1e-12) * scale;
        let min_step = T::lit(MIN_NEWTON_STEP);
        let mut trace = vec![r.amax().to_f64_lossy()];
        for _ in 0..MAX_NEWTON_ITERATIONS {
            let rnorm = r.amax();
            let r2 = r.norm();
            if rnorm <= tol {
                return Ok(u);
            }
            let (_, ju, _) = fv::sensitivities(self, &u, y)?;
            let du = ju.factorize()?.solve(&(-&r))?;
            let mut step = T::one();
            loop {
                let trial = &u + &du * step;
                let accepted = match fv::residual(self, &trial, y) {
                    Ok(rt) if rt.norm() < r2 || rt.amax() <= tol => Some((trial, rt)),
                    _ => None,
                };
                if let Some((ut, rt)) = accepted {
                    u = ut;
                    r = rt;
                    break;
                }
                step *= T::lit(0.5);
                if step < min_step {
                    trace.push(rnorm.to_f64_lossy());
                    return Err(Error::NoConvergence {
                        iterations: trace.len() - 1,
                        trace,
                    });
                }
            }
            trace.push(r.amax().to_f64_lossy());
        }
        if r.amax() <= tol {
            return Ok(u);
        }
        Err(Error::NoConvergence {
            iterations: MAX_NEWTON_ITERATIONS,
            trace,
        })
    }

    fn lambda_d2l_contraction(
        &self,
        u: &DVector<T>,
        y: &DVector<T>,
        lambda: &DVector<T>,
        du_dy: &DMatrix<T>,
    ) -> Result<DMatrix<T>> {
        fv::lambda_contraction(self, u, y, lambda, du_dy)
    }
}
