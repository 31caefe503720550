//! Gaussian log-likelihood of sparse state and coefficient observations, with
//! its gradient and Hessian in `y` by the discrete adjoint method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::instrument;
use crate::physics::PhysicsModel;
use crate::scalar::Scalar;

/// Index-based observation operators `H_u`, `H_y` with observed values and
/// i.i.d. Gaussian noise scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSet<T> {
    pub u_indices: Vec<usize>,
    pub u_values: Vec<T>,
    pub y_indices: Vec<usize>,
    pub y_values: Vec<T>,
    pub sigma_us: T,
    pub sigma_ys: T,
}

impl<T: Scalar> ObservationSet<T> {
    /// No observations at all; the likelihood is identically zero.
    pub fn empty(sigma_us: T, sigma_ys: T) -> Self {
        ObservationSet {
            u_indices: Vec::new(),
            u_values: Vec::new(),
            y_indices: Vec::new(),
            y_values: Vec::new(),
            sigma_us,
            sigma_ys,
        }
    }

    pub fn n_u(&self) -> usize {
        self.u_indices.len()
    }

    pub fn n_y(&self) -> usize {
        self.y_indices.len()
    }

    /// Check index ranges, uniqueness and noise scales against a model with
    /// `m` states and `n` coefficients.
    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        check_dim("u observation values", self.u_indices.len(), self.u_values.len())?;
        check_dim("y observation values", self.y_indices.len(), self.y_values.len())?;
        for (name, idx, bound) in [("u", &self.u_indices, m), ("y", &self.y_indices, n)] {
            if idx.len() > bound {
                return Err(Error::InvalidInput(format!(
                    "{} {name} observations exceed {bound} degrees of freedom",
                    idx.len()
                )));
            }
            let mut seen = vec![false; bound];
            for &i in idx {
                if i >= bound {
                    return Err(Error::InvalidInput(format!(
                        "{name} observation index {i} out of range (< {bound})"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidInput(format!(
                        "duplicate {name} observation index {i}"
                    )));
                }
            }
        }
        if !(self.sigma_us > T::zero() && self.sigma_ys > T::zero()) {
            return Err(Error::InvalidInput(
                "observation noise scales must be positive".into(),
            ));
        }
        if self
            .u_values
            .iter()
            .chain(&self.y_values)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("observation values"));
        }
        Ok(())
    }

    /// `−(M_s/2) log(2π σ_us²) − (N_s/2) log(2π σ_ys²)`.
    pub fn normalization(&self) -> T {
        let half = T::lit(0.5);
        let two_pi = T::two_pi();
        -half * T::lit(self.n_u() as f64) * (two_pi * self.sigma_us * self.sigma_us).ln()
            - half * T::lit(self.n_y() as f64) * (two_pi * self.sigma_ys * self.sigma_ys).ln()
    }

    /// Misfit part `h(u, y)` of the log-likelihood (no normalization).
    pub fn misfit(&self, u: &DVector<T>, y: &DVector<T>) -> T {
        let half = T::lit(0.5);
        let su = self
            .u_indices
            .iter()
            .zip(&self.u_values)
            .fold(T::zero(), |acc, (&i, &v)| acc + (v - u[i]) * (v - u[i]));
        let sy = self
            .y_indices
            .iter()
            .zip(&self.y_values)
            .fold(T::zero(), |acc, (&i, &v)| acc + (v - y[i]) * (v - y[i]));
        -half * su / (self.sigma_us * self.sigma_us) - half * sy / (self.sigma_ys * self.sigma_ys)
    }

    /// `∂h/∂u = H_uᵀ(u_s − H_u u)/σ_us²`.
    fn misfit_grad_u(&self, u: &DVector<T>) -> DVector<T> {
        let mut g = DVector::zeros(u.len());
        let w = T::one() / (self.sigma_us * self.sigma_us);
        for (&i, &v) in self.u_indices.iter().zip(&self.u_values) {
            g[i] += w * (v - u[i]);
        }
        g
    }

    /// `∂h/∂y = H_yᵀ(y_s − H_y y)/σ_ys²`.
    fn misfit_grad_y(&self, y: &DVector<T>) -> DVector<T> {
        let mut g = DVector::zeros(y.len());
        let w = T::one() / (self.sigma_ys * self.sigma_ys);
        for (&i, &v) in self.y_indices.iter().zip(&self.y_values) {
            g[i] += w * (v - y[i]);
        }
        g
    }

    pub fn cast<U: Scalar>(&self) -> ObservationSet<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect();
        ObservationSet {
            u_indices: self.u_indices.clone(),
            u_values: c(&self.u_values),
            y_indices: self.y_indices.clone(),
            y_values: c(&self.y_values),
            sigma_us: U::lit(self.sigma_us.to_f64_lossy()),
            sigma_ys: U::lit(self.sigma_ys.to_f64_lossy()),
        }
    }
}

/// Log-likelihood value with its derivatives at one `y`.
#[derive(Debug, Clone)]
pub struct LikelihoodDerivatives<T: Scalar> {
    pub value: T,
    pub gradient: DVector<T>,
    pub hessian: Option<DMatrix<T>>,
    pub adjoint_solution: DVector<T>,
    /// Forward solution `u(y)`.
    pub state: DVector<T>,
}

fn check<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    y: &DVector<T>,
) -> Result<()> {
    check_dim("parameter vector", model.param_dim(), y.len())?;
    obs.validate(model.state_dim(), model.param_dim())
}

/// `log p(D | y)` including normalization constants.
pub fn log_likelihood<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    y: &DVector<T>,
) -> Result<T> {
    check(model, obs, y)?;
    let u = model.solve_forward(y)?;
    Ok(obs.misfit(&u, y) + obs.normalization())
}

/// Value and adjoint gradient; one backward solve.
pub fn grad_log_likelihood<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    y: &DVector<T>,
) -> Result<LikelihoodDerivatives<T>> {
    derivatives(model, obs, y, false)
}

/// Value, gradient and Hessian; one backward and `N` forward sensitivity solves
/// sharing a single factorization of `∂L/∂u`.
pub fn hessian_log_likelihood<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    y: &DVector<T>,
) -> Result<LikelihoodDerivatives<T>> {
    derivatives(model, obs, y, true)
}

fn derivatives<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    y: &DVector<T>,
    with_hessian: bool,
) -> Result<LikelihoodDerivatives<T>> {
    check(model, obs, y)?;
    let u = model.solve_forward(y)?;
    let value = obs.misfit(&u, y) + obs.normalization();
    let bundle = model.sensitivities(&u, y)?;
    let lu = bundle.jac_u.factorize()?;

    // (∂L/∂u)ᵀ λ = −(∂h/∂u)ᵀ
    let h_u = obs.misfit_grad_u(&u);
    instrument::backward_solve();
    let lambda = lu.solve_transpose(&(-h_u))?;
    let gradient = obs.misfit_grad_y(y) + bundle.jac_y.tr_mul(&lambda);
    if gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("likelihood gradient"));
    }

    let hessian = if with_hessian {
        let n = y.len();
        instrument::forward_sensitivity_solves(n);
        let du_dy = -lu.solve_matrix(&bundle.jac_y)?;

        let mut h = DMatrix::zeros(n, n);
        let wy = T::one() / (obs.sigma_ys * obs.sigma_ys);
        for &i in &obs.y_indices {
            h[(i, i)] -= wy;
        }
        if obs.n_u() > 0 {
            let wu = T::one() / (obs.sigma_us * obs.sigma_us);
            let rows = DMatrix::from_fn(obs.n_u(), n, |r, c| du_dy[(obs.u_indices[r], c)]);
            h.gemm_tr(-wu, &rows, &rows, T::one());
        }
        h += model.lambda_d2l_contraction(&u, y, &lambda, &du_dy)?;
        let h = (&h + h.transpose()) * T::lit(0.5);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("likelihood Hessian"));
        }
        Some(h)
    } else {
        None
    };

    Ok(LikelihoodDerivatives {
        value,
        gradient,
        hessian,
        adjoint_solution: lambda,
        state: u,
    })
}
