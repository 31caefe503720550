use nalgebra::{DMatrix, DVector};

use super::fv::{self, CoefDir, FaceLaw, LogConductance};
use super::{PhysicsModel, SensitivityBundle};
use crate::error::{Error, Result};
use crate::gp_prior::CoordinateSet;
use crate::instrument;
use crate::scalar::Scalar;

/// `d/dx (k(x) du/dx) = 0` on `[0, 1]` with Dirichlet ends and `k = exp(y)`.
///
/// Cell-centered finite volumes; face conductances are harmonic averages of
/// the adjacent cell values. Cell log-coefficients are interpolated linearly
/// from the `N` coefficient coordinates (identity when they coincide with the
/// cell centers), with constant extrapolation past the end coordinates.
#[derive(Debug, Clone)]
pub struct LinearDiffusion<T: Scalar> {
    m: usize,
    coords: CoordinateSet<T>,
    u_left: T,
    u_right: T,
    cell_coef: Vec<CoefDir<T>>,
}

impl<T: Scalar> LinearDiffusion<T> {
    /// Coefficient coordinates default to the cell centers when `n == m`, and
    /// to `n` equispaced points on `[0, 1]` otherwise.
    pub fn new(m: usize, n: usize, u_left: T, u_right: T) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidInput("linear model needs M >= 2".into()));
        }
        let coords = if n == m {
            CoordinateSet::new(fv::cell_centers(m))?
        } else {
            CoordinateSet::linspace(T::zero(), T::one(), n)?
        };
        Self::with_coordinates(m, coords, u_left, u_right)
    }

    pub fn with_coordinates(m: usize, coords: CoordinateSet<T>, u_left: T, u_right: T) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidInput("linear model needs M >= 2".into()));
        }
        if !(u_left.is_finite() && u_right.is_finite()) {
            return Err(Error::NonFinite("boundary values"));
        }
        let pts = coords.as_slice();
        let cell_coef = fv::cell_centers::<T>(m)
            .into_iter()
            .map(|x| {
                let (seg, t) = fv::segment(pts, x);
                let t = t.max(T::zero()).min(T::one());
                [(seg, T::one() - t), (seg + 1, t)]
            })
            .collect();
        Ok(LinearDiffusion {
            m,
            coords,
            u_left,
            u_right,
            cell_coef,
        })
    }

    pub fn boundary_values(&self) -> (T, T) {
        (self.u_left, self.u_right)
    }

    fn cell_log_k(&self, cell: usize, y: &DVector<T>) -> T {
        self.cell_coef[cell]
            .iter()
            .fold(T::zero(), |acc, &(k, w)| acc + w * y[k])
    }
}

impl<T: Scalar> FaceLaw<T> for LinearDiffusion<T> {
    fn cells(&self) -> usize {
        self.m
    }

    fn params(&self) -> usize {
        self.coords.len()
    }

    fn boundary(&self) -> (T, T) {
        (self.u_left, self.u_right)
    }

    fn log_conductance(&self, face: usize, _a: T, _b: T, y: &DVector<T>) -> LogConductance<T> {
        let left = if face == 0 { 0 } else { face - 1 };
        let right = if face == self.m { self.m - 1 } else { face };
        let c0 = self.cell_log_k(left, y);
        let c1 = self.cell_log_k(right, y);
        // s = log of the harmonic mean 2 k0 k1 / (k0 + k1), evaluated stably.
        let hi = c0.max(c1);
        let lse = hi + ((c0 - hi).exp() + (c1 - hi).exp()).ln();
        let s = T::lit(2.0).ln() + c0 + c1 - lse;
        let p0 = T::one() / (T::one() + (c0 - c1).exp());
        let p1 = T::one() - p0;
        let q = p0 * p1;
        let z = T::zero();
        LogConductance {
            s,
            grad: [z, z, p0, p1],
            hess: [
                [z, z, z, z],
                [z, z, z, z],
                [z, z, -q, q],
                [z, z, q, -q],
            ],
            coef: [self.cell_coef[left], self.cell_coef[right]],
        }
    }
}

impl<T: Scalar> PhysicsModel<T> for LinearDiffusion<T> {
    fn state_dim(&self) -> usize {
        self.m
    }

    fn param_dim(&self) -> usize {
        self.coords.len()
    }

    fn coefficient_coordinates(&self) -> &CoordinateSet<T> {
        &self.coords
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

    /// One banded solve of `S(y) u = b(y)`, using `L(0, y) = −b` and `∂L/∂u = S`.
    fn solve_forward(&self, y: &DVector<T>) -> Result<DVector<T>> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient vector"));
        }
        let zero = DVector::zeros(self.m);
        let (r0, s, _) = fv::sensitivities(self, &zero, y)?;
        instrument::forward_solve();
        let u = s.factorize()?.solve(&(-r0))?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward solution"));
        }
        Ok(u)
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

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
    }

    #[test]
    fn linear_profile_is_exact_for_constant_k() {
        let model = LinearDiffusion::new(20, 20, 1.3, -0.4).unwrap();
        let y = DVector::from_element(20, 0.7);
        let x = model.state_coordinates();
        let u = DVector::from_fn(20, |i, _| 1.3 + (-0.4 - 1.3) * x[i]);
        assert!(model.residual(&u, &y).unwrap().amax() < 1e-12);
    }

    #[test]
    fn unit_coefficient_solution() {
        let model = LinearDiffusion::<f64>::new(50, 50, 1.0, 0.0).unwrap();
        let u = model.solve_forward(&DVector::zeros(50)).unwrap();
        let x = model.state_coordinates();
        for i in 0..50 {
            assert!((u[i] - (1.0 - x[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_layer_midpoint_value() {
        let (k1, k2) = (3.0f64, 0.5f64);
        let m = 40;
        let model = LinearDiffusion::<f64>::new(m, m, 1.0, 0.0).unwrap();
        let x = model.state_coordinates();
        let y = DVector::from_fn(m, |i, _| if x[i] < 0.5 { k1.ln() } else { k2.ln() });
        let u = model.solve_forward(&y).unwrap();
        // Flux through the domain, then reconstruct the interface value from the left cell.
        let q = 2.0 * k1 * k2 / (k1 + k2);
        let h = 1.0 / m as f64;
        let mid = u[m / 2 - 1] - q * (h / 2.0) / k1;
        assert!((mid - k1 / (k1 + k2)).abs() < 1e-12);
        for i in 0..m {
            let exact = if x[i] < 0.5 { 1.0 - q * x[i] / k1 } else { q * (1.0 - x[i]) / k2 };
            assert!((u[i] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = LinearDiffusion::new(10, 10, 1.0, 0.0).unwrap();
        let err = model.residual(&DVector::zeros(10), &DVector::zeros(0));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, n) in &[(10usize, 10usize), (10, 6), (12, 17)] {
            let model = LinearDiffusion::new(m, n, 1.0, 0.0).unwrap();
            let u = random_vec(m, 1.0, &mut rng);
            let y = random_vec(n, 1.0, &mut rng);
            let s = model.sensitivities(&u, &y).unwrap();
            let ju = s.jac_u.to_dense();
            assert!(rel_err(&ju, &fd_jac_u(&model, &u, &y)) < 1e-6);
            assert!(rel_err(&s.jac_y, &fd_jac_y(&model, &u, &y)) < 1e-6);
            // L is linear in u, so dL/du does not depend on u.
            let s2 = model.sensitivities(&random_vec(m, 3.0, &mut rng), &y).unwrap();
            assert!((s2.jac_u.to_dense() - ju).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_contraction() {
        let model = LinearDiffusion::new(8, 8, 1.0, 0.0).unwrap();
        let y = DVector::from_element(8, 0.2);
        let u = model.solve_forward(&y).unwrap();
        let v = DMatrix::from_element(8, 8, 0.3);
        let c = model
            .lambda_d2l_contraction(&u, &y, &DVector::zeros(8), &v)
            .unwrap();
        assert_eq!(c, DMatrix::zeros(8, 8));
    }

    #[test]
    fn maximum_principle_and_residual_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = LinearDiffusion::new(30, 30, 0.8, -0.3).unwrap();
        for _ in 0..20 {
            let y = random_vec(30, 2.0, &mut rng);
            let u = model.solve_forward(&y).unwrap();
            assert!(u.iter().all(|&v| (-0.3 - 1e-12..=0.8 + 1e-12).contains(&v)));
            let b = -model.residual(&DVector::zeros(30), &y).unwrap();
            let r = model.residual(&u, &y).unwrap();
            assert!(r.amax() <= 1e-10 * (1.0 + b.amax()));
        }
    }

    #[test]
    fn second_order_convergence_on_smooth_coefficient() {
        // k(x) = exp(x): u(x) = 1 - (1 - e^{-x}) / (1 - e^{-1}) for u_L = 1, u_R = 0.
        let err = |m: usize| {
            let model = LinearDiffusion::<f64>::new(m, m, 1.0, 0.0).unwrap();
            let x = model.state_coordinates();
            let y = DVector::from_fn(m, |i, _| x[i]);
            let u = model.solve_forward(&y).unwrap();
            (0..m)
                .map(|i| {
                    let e = 1.0 - (1.0 - (-x[i]).exp()) / (1.0 - (-1f64).exp());
                    (u[i] - e).abs()
                })
                .fold(0.0, f64::max)
        };
        let rate = (err(20) / err(40)).log2();
        assert!(rate >= 1.8, "observed rate {rate}");
    }
}
