//! Laplace-EM: a Laplace approximation of the posterior at the MAP (E-step)
//! alternated with minimization of the closed-form `KL(q ‖ prior)` over the
//! prior hyperparameters (M-step).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adjoint::{grad_log_likelihood, hessian_log_likelihood, ObservationSet};
use crate::error::{check_dim, Error, Result};
use crate::gp_prior::{cholesky, kernel_grad, kernel_matrix, kl_to_prior, CoordinateSet, GpHyperparams, GpPrior, HyperParam};
use crate::instrument;
use crate::optim;
use crate::physics::PhysicsModel;
use crate::result::{factor_stddev, matrix_rows, InferenceResult, Method};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceControls<T: Scalar> {
    /// Relative hyperparameter change that stops the EM loop.
    pub rtol: T,
    pub max_cycles: usize,
    /// MAP stops once `‖∇‖_∞ ≤ map_gtol · (1 + |objective|)`.
    pub map_gtol: T,
    pub map_max_iters: usize,
    pub mstep_gtol: T,
    pub mstep_max_iters: usize,
    /// Scales for the stopping rule; `theta_init` when absent.
    pub theta_scales: Option<[T; 2]>,
    /// Skip M-steps and report the posterior at `theta_init`.
    pub fix_theta: bool,
}

impl<T: Scalar> Default for LaplaceControls<T> {
    fn default() -> Self {
        LaplaceControls {
            rtol: T::lit(1e-4),
            max_cycles: 100,
            map_gtol: T::lit(1e-8),
            map_max_iters: 500,
            mstep_gtol: T::lit(1e-8),
            mstep_max_iters: 200,
            theta_scales: None,
            fix_theta: false,
        }
    }
}

/// Gaussian approximation `N(mu_q, covariance)` at the MAP.
#[derive(Debug, Clone)]
pub struct LaplacePosterior<T: Scalar> {
    pub mu_q: DVector<T>,
    /// `H + C_p⁻¹`.
    pub precision: DMatrix<T>,
    pub covariance: DMatrix<T>,
    pub covariance_factor: DMatrix<T>,
    /// Jitter added to make the curvature factorizable; zero normally.
    pub jitter: T,
}

#[derive(Debug, Clone)]
pub struct MapOutcome<T: Scalar> {
    pub y: DVector<T>,
    /// `−log p(D|y) − log p(y|θ)`.
    pub objective: T,
    pub grad_inf: T,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct MStepOutcome<T: Scalar> {
    pub theta: GpHyperparams<T>,
    pub kl: T,
    pub kl_init: T,
    pub iterations: usize,
    /// Objective evaluations, each one prior factorization.
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct EmState<T: Scalar> {
    pub theta: GpHyperparams<T>,
    pub posterior: LaplacePosterior<T>,
    pub cycle: usize,
    pub theta_history: Vec<GpHyperparams<T>>,
    /// KL after each accepted M-step.
    pub kl_history: Vec<T>,
    pub converged: bool,
}

/// MAP of `p(y | D, θ)` by BFGS in whitened coordinates `y = L_p w`.
pub fn map_estimate<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    theta: &GpHyperparams<T>,
    y_init: &DVector<T>,
    controls: &LaplaceControls<T>,
) -> Result<MapOutcome<T>> {
    let prior = GpPrior::new(model.coefficient_coordinates(), *theta)?;
    map_with_prior(model, obs, &prior, y_init, controls)
}

fn map_with_prior<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    prior: &GpPrior<T>,
    y_init: &DVector<T>,
    controls: &LaplaceControls<T>,
) -> Result<MapOutcome<T>> {
    let n = model.param_dim();
    check_dim("MAP initial point", n, y_init.len())?;
    obs.validate(model.state_dim(), n)?;
    let l = prior.cov.factor();
    let constant = (prior.cov.log_det() + T::lit(n as f64) * T::two_pi().ln()) * T::lit(0.5);
    let w0 = prior.cov.solve_lower(y_init);

    let objective = |w: &DVector<T>| -> Result<(T, DVector<T>)> {
        let y = l * w;
        let d = grad_log_likelihood(model, obs, &y)?;
        let f = -d.value + w.norm_squared() * T::lit(0.5);
        let g = w - l.tr_mul(&d.gradient);
        Ok((f, g))
    };
    let mut grad_inf = T::zero();
    let gtol = controls.map_gtol;
    let out = optim::minimize(objective, w0, controls.map_max_iters, |_, f, gw| {
        // Gradient in y: L⁻ᵀ ∇_w.
        let gy = l
            .tr_solve_lower_triangular(gw)
            .unwrap_or_else(|| DVector::from_element(gw.len(), T::max_value().unwrap_or(T::one())));
        grad_inf = gy.amax();
        grad_inf <= gtol * (T::one() + (f + constant).abs())
    })?;
    if out.converged {
        return Ok(MapOutcome {
            y: l * &out.x,
            objective: out.f + constant,
            grad_inf,
            iterations: out.iterations,
            converged: true,
            message: out.message,
        });
    }
    // BFGS stalls when small observation noise makes the whitened curvature
    // badly conditioned; finish with damped Newton on the exact Hessian.
    let mut polished = newton_polish(model, obs, l, out.x, gtol, constant, controls.map_max_iters)?;
    polished.iterations += out.iterations;
    Ok(polished)
}

fn newton_polish<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    l: &DMatrix<T>,
    w0: DVector<T>,
    gtol: T,
    constant: T,
    max_iters: usize,
) -> Result<MapOutcome<T>> {
    let n = w0.len();
    let value = |w: &DVector<T>| -> Option<T> {
        let y = l * w;
        let ll = crate::adjoint::log_likelihood(model, obs, &y).ok()?;
        let f = -ll + w.norm_squared() * T::lit(0.5);
        f.is_finite().then_some(f)
    };
    let gradient = |w: &DVector<T>| -> Option<DVector<T>> {
        let d = grad_log_likelihood(model, obs, &(l * w)).ok()?;
        Some(w - l.tr_mul(&d.gradient))
    };
    let mut w = w0;
    let mut damping = T::zero();
    let mut message = String::from("Newton iteration limit reached");
    let mut grad_inf = T::max_value().unwrap_or(T::one());
    let mut iterations = 0;
    let mut f = T::zero();
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let y = l * &w;
        let d = hessian_log_likelihood(model, obs, &y)?;
        f = -d.value + w.norm_squared() * T::lit(0.5);
        let g = &w - l.tr_mul(&d.gradient);
        grad_inf = l
            .tr_solve_lower_triangular(&g)
            .ok_or(Error::Singular("prior factor"))?
            .amax();
        if grad_inf <= gtol * (T::one() + (f + constant).abs()) {
            converged = true;
            message = String::from("converged");
            break;
        }
        let h = -d.hessian.expect("hessian requested");
        let mut a = l.tr_mul(&(&h * l));
        a = (&a + a.transpose()) * T::lit(0.5);
        let scale = a.diagonal().amax().max(T::one());
        let slack = T::default_epsilon() * T::lit(8.0) * f.abs();
        let mut stepped = false;
        for _ in 0..30 {
            let mut m = a.clone();
            for i in 0..n {
                m[(i, i)] += T::one() + damping;
            }
            let Some(chol) = m.cholesky() else {
                damping = (damping * T::lit(10.0)).max(scale * T::lit(1e-10));
                continue;
            };
            let step = -chol.solve(&g);
            let slope = g.dot(&step);
            let mut t = T::one();
            for _ in 0..20 {
                let trial = &w + &step * t;
                if let Some(ft) = value(&trial) {
                    if ft <= f + T::lit(1e-4) * t * slope + slack {
                        w = trial;
                        stepped = true;
                        break;
                    }
                    // Near the optimum f stops resolving the decrease; take the
                    // full step if it stays within the noise and shrinks the gradient.
                    if t == T::one() && ft <= f + T::lit(1e-10) * (T::one() + f.abs()) {
                        if let Some(gt) = gradient(&trial) {
                            if gt.norm() < g.norm() * T::lit(0.5) {
                                w = trial;
                                stepped = true;
                                break;
                            }
                        }
                    }
                }
                t *= T::lit(0.5);
            }
            if stepped {
                if t == T::one() {
                    damping *= T::lit(0.1);
                }
                break;
            }
            damping = (damping * T::lit(10.0)).max(scale * T::lit(1e-10));
        }
        if !stepped {
            message = String::from("damped Newton made no progress");
            break;
        }
    }
    Ok(MapOutcome {
        y: l * &w,
        objective: f + constant,
        grad_inf,
        iterations,
        converged,
        message,
    })
}

/// Laplace posterior at `mu_q`: precision `H + C_p⁻¹` with `H` the negative
/// likelihood Hessian, covariance `(H + C_p⁻¹)⁻¹`.
pub fn laplace_covariance<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    theta: &GpHyperparams<T>,
    mu_q: &DVector<T>,
) -> Result<LaplacePosterior<T>> {
    let prior = GpPrior::new(model.coefficient_coordinates(), *theta)?;
    covariance_with_prior(model, obs, &prior, mu_q)
}

fn covariance_with_prior<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    prior: &GpPrior<T>,
    mu_q: &DVector<T>,
) -> Result<LaplacePosterior<T>> {
    let n = model.param_dim();
    let d = hessian_log_likelihood(model, obs, mu_q)?;
    let h = -d.hessian.expect("hessian requested");
    let l = prior.cov.factor();
    // (H + L⁻ᵀL⁻¹)⁻¹ = L (I + LᵀHL)⁻¹ Lᵀ
    let mut b = l.tr_mul(&(&h * l));
    b = (&b + b.transpose()) * T::lit(0.5);
    for i in 0..n {
        b[(i, i)] += T::one();
    }
    let precision = &h + prior.cov.inverse();
    let (lb, jitter) = cholesky(&b).map_err(|_| {
        let eig = precision.clone().symmetric_eigenvalues();
        let min = eig.iter().fold(T::max_value().unwrap_or(T::one()), |m, v| m.min(*v));
        Error::Em {
            cycle: 0,
            reason: format!(
                "posterior precision not positive definite (smallest eigenvalue {:.3e})",
                min.to_f64_lossy()
            ),
            theta_history: Vec::new(),
            kl_history: Vec::new(),
        }
    })?;
    let x = lb
        .solve_lower_triangular(&l.transpose())
        .ok_or(Error::Singular("Laplace curvature factor"))?;
    let covariance = x.tr_mul(&x);
    let (covariance_factor, _) = cholesky(&covariance)?;
    Ok(LaplacePosterior {
        mu_q: mu_q.clone(),
        precision,
        covariance,
        covariance_factor,
        jitter,
    })
}

/// Closed-form `KL(q ‖ N(0, C_p(θ)))`.
pub fn kl_q_prior<T: Scalar>(
    xi: &CoordinateSet<T>,
    posterior: &LaplacePosterior<T>,
    theta: &GpHyperparams<T>,
) -> Result<T> {
    let c = kernel_matrix(xi, theta)?;
    kl_to_prior(&c, &posterior.mu_q, &posterior.covariance_factor)
}

/// Gradient of [`kl_q_prior`] over `(log σ, log λ)`.
pub fn kl_grad_theta<T: Scalar>(
    xi: &CoordinateSet<T>,
    posterior: &LaplacePosterior<T>,
    theta: &GpHyperparams<T>,
) -> Result<[T; 2]> {
    Ok(kl_and_grad(xi, &posterior.mu_q, &posterior.covariance_factor, theta)?.1)
}

/// KL and its log-space gradient from a single prior factorization.
pub(crate) fn kl_and_grad<T: Scalar>(
    xi: &CoordinateSet<T>,
    mu: &DVector<T>,
    factor: &DMatrix<T>,
    theta: &GpHyperparams<T>,
) -> Result<(T, [T; 2])> {
    let c = kernel_matrix(xi, theta)?;
    let kl = kl_to_prior(&c, mu, factor)?;
    let alpha = c.solve(mu);
    let x = c.solve_matrix(factor);
    // W = C⁻¹ − C⁻¹ΣC⁻¹
    let mut w = c.inverse();
    w.gemm(-T::one(), &x, &x.transpose(), T::one());
    let half = T::lit(0.5);
    let mut grad = [T::zero(); 2];
    for (k, which) in HyperParam::ALL.into_iter().enumerate() {
        let ci = kernel_grad(xi, theta, which)?;
        let quad = alpha.dot(&(&ci * &alpha));
        let inner = ci.component_mul(&w).sum();
        grad[k] = (-half * quad + half * inner) * theta.get(which);
    }
    Ok((kl, grad))
}

/// Minimize the KL over `(log σ, log λ)` for a fixed posterior.
pub fn m_step<T: Scalar>(
    xi: &CoordinateSet<T>,
    posterior: &LaplacePosterior<T>,
    theta_init: &GpHyperparams<T>,
    controls: &LaplaceControls<T>,
) -> Result<MStepOutcome<T>> {
    gaussian_m_step(
        xi,
        &posterior.mu_q,
        &posterior.covariance_factor,
        theta_init,
        controls.mstep_gtol,
        controls.mstep_max_iters,
    )
}

pub(crate) fn gaussian_m_step<T: Scalar>(
    xi: &CoordinateSet<T>,
    mu: &DVector<T>,
    factor: &DMatrix<T>,
    theta_init: &GpHyperparams<T>,
    gtol: T,
    max_iters: usize,
) -> Result<MStepOutcome<T>> {
    let sigma_n = theta_init.sigma_n;
    let fg = |x: &DVector<T>| -> Result<(T, DVector<T>)> {
        let theta = GpHyperparams::from_log([x[0], x[1]], sigma_n)?;
        let (kl, g) = kl_and_grad(xi, mu, factor, &theta)?;
        Ok((kl, DVector::from_column_slice(&g)))
    };
    let (kl_init, _) = fg(&DVector::from_column_slice(&theta_init.log_params()))?;
    let x0 = DVector::from_column_slice(&theta_init.log_params());
    let out = optim::minimize(fg, x0, max_iters, |_, _, g| g.amax() <= gtol)?;
    if out.f > kl_init {
        return Ok(MStepOutcome {
            theta: *theta_init,
            kl: kl_init,
            kl_init,
            iterations: out.iterations,
            evaluations: out.evaluations + 1,
            converged: false,
        });
    }
    Ok(MStepOutcome {
        theta: GpHyperparams::from_log([out.x[0], out.x[1]], sigma_n)?,
        kl: out.f,
        kl_init,
        iterations: out.iterations,
        evaluations: out.evaluations + 1,
        converged: out.converged,
    })
}

/// E-step: MAP (warm-started) and Laplace covariance under one prior factorization.
pub fn e_step<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    theta: &GpHyperparams<T>,
    y_init: &DVector<T>,
    controls: &LaplaceControls<T>,
) -> Result<LaplacePosterior<T>> {
    let prior = GpPrior::new(model.coefficient_coordinates(), *theta)?;
    let map = map_with_prior(model, obs, &prior, y_init, controls)?;
    if !map.converged {
        return Err(Error::Em {
            cycle: 0,
            reason: format!(
                "MAP not converged after {} iterations ({}; gradient {:.3e})",
                map.iterations,
                map.message,
                map.grad_inf.to_f64_lossy()
            ),
            theta_history: Vec::new(),
            kl_history: Vec::new(),
        });
    }
    covariance_with_prior(model, obs, &prior, &map.y)
}

/// Full EM loop; the returned posterior is refreshed at the final `θ`.
pub fn laplace_em<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    theta_init: &GpHyperparams<T>,
    controls: &LaplaceControls<T>,
) -> Result<EmState<T>> {
    theta_init.validate()?;
    obs.validate(model.state_dim(), model.param_dim())?;
    if !(controls.rtol >= T::zero()) || controls.max_cycles == 0 {
        return Err(Error::InvalidInput("rtol must be ≥ 0 and max_cycles ≥ 1".into()));
    }
    let xi = model.coefficient_coordinates();
    let scales = controls
        .theta_scales
        .unwrap_or([theta_init.sigma, theta_init.lambda]);
    let mut theta = *theta_init;
    let mut y = DVector::zeros(model.param_dim());
    let mut theta_history = vec![theta];
    let mut kl_history = Vec::new();

    let fail = |cycle: usize, e: Error, th: &[GpHyperparams<T>], kl: &[T]| -> Error {
        let reason = match e {
            Error::Em { reason, .. } => reason,
            other => other.to_string(),
        };
        Error::Em {
            cycle,
            reason,
            theta_history: th
                .iter()
                .map(|t| [t.sigma.to_f64_lossy(), t.lambda.to_f64_lossy()])
                .collect(),
            kl_history: kl.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    };

    let mut cycle = 0;
    let mut converged = false;
    let mut posterior = None;
    while cycle < controls.max_cycles {
        cycle += 1;
        let post = e_step(model, obs, &theta, &y, controls)
            .map_err(|e| fail(cycle, e, &theta_history, &kl_history))?;
        if controls.fix_theta {
            posterior = Some(post);
            converged = true;
            break;
        }
        let ms = m_step(xi, &post, &theta, controls)
            .map_err(|e| fail(cycle, e, &theta_history, &kl_history))?;
        let change = ((ms.theta.sigma - theta.sigma) / scales[0])
            .abs()
            .max(((ms.theta.lambda - theta.lambda) / scales[1]).abs());
        theta = ms.theta;
        y = post.mu_q.clone();
        theta_history.push(theta);
        kl_history.push(ms.kl);
        if change <= controls.rtol {
            converged = true;
            break;
        }
    }
    let posterior = match posterior {
        Some(p) => p,
        None => e_step(model, obs, &theta, &y, controls)
            .map_err(|e| fail(cycle, e, &theta_history, &kl_history))?,
    };
    Ok(EmState {
        theta,
        posterior,
        cycle,
        theta_history,
        kl_history,
        converged,
    })
}

/// [`laplace_em`] packaged as an [`InferenceResult`].
pub fn run_laplace_em<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    theta_init: &GpHyperparams<T>,
    controls: &LaplaceControls<T>,
) -> Result<InferenceResult<T>> {
    let start = Instant::now();
    let (state, counts) = instrument::measure(|| laplace_em(model, obs, theta_init, controls));
    let state = state?;
    Ok(state.to_result(counts, start.elapsed().as_secs_f64()))
}

impl<T: Scalar> EmState<T> {
    pub fn to_result(&self, counts: instrument::Counts, wall_time_s: f64) -> InferenceResult<T> {
        let r = &self.posterior.covariance_factor;
        InferenceResult {
            method: Method::LaplaceEm,
            variant: None,
            theta_hat: self.theta,
            mean: self.posterior.mu_q.iter().copied().collect(),
            stddev: factor_stddev(r),
            factor: Some(matrix_rows(r)),
            n_samples: None,
            elbo: None,
            iterations: self.cycle,
            converged: self.converged,
            seed: None,
            trace: self.kl_history.iter().map(|v| v.to_f64_lossy()).collect(),
            counts,
            wall_time_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_prior::sample_prior;
    use crate::physics::{DirectObservation, LinearDiffusion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conjugate(n: usize, sigma: f64, seed: u64) -> (DirectObservation<f64>, ObservationSet<f64>) {
        let xi = CoordinateSet::linspace(0.0, 1.0, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = ObservationSet {
            u_indices: vec![],
            u_values: vec![],
            y_indices: (0..n).collect(),
            y_values: (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            sigma_us: 1.0,
            sigma_ys: sigma,
        };
        (DirectObservation::new(xi), obs)
    }

    /// `(C⁻¹ + σ⁻²I)⁻¹` and its mean, computed as `C (C + σ²I)⁻¹ ...`.
    fn closed_form(xi: &CoordinateSet<f64>, theta: &GpHyperparams<f64>, obs: &ObservationSet<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let c = crate::gp_prior::kernel_entries(xi, theta).unwrap();
        let n = c.nrows();
        let s2 = obs.sigma_ys * obs.sigma_ys;
        let a = &c + DMatrix::identity(n, n) * s2;
        let a_inv = a.cholesky().unwrap().inverse();
        let ys = DVector::from_column_slice(&obs.y_values);
        let mean = &c * &a_inv * &ys;
        let cov = &c - &c * &a_inv * &c;
        (mean, (&cov + cov.transpose()) * 0.5)
    }

    #[test]
    fn conjugate_e_step_is_exact() {
        let (model, obs) = conjugate(20, 0.3, 5);
        let theta = GpHyperparams::<f64>::new(1.0, 0.2, 0.1).unwrap();
        let post = e_step(&model, &obs, &theta, &DVector::zeros(20), &LaplaceControls::default()).unwrap();
        let (mean, cov) = closed_form(model.coefficient_coordinates(), &theta, &obs);
        assert!((&post.mu_q - &mean).amax() < 1e-8);
        assert!((&post.covariance - &cov).amax() < 1e-8);
        let prod = &post.precision * &post.covariance;
        assert!((prod - DMatrix::identity(20, 20)).amax() < 1e-8);
    }

    #[test]
    fn no_observations_gives_the_prior() {
        let model = LinearDiffusion::new(10, 10, 1.0, 0.0).unwrap();
        let obs = ObservationSet::empty(1.0, 1.0);
        let theta = GpHyperparams::<f64>::new(1.0, 0.3, 0.05).unwrap();
        let post = e_step(&model, &obs, &theta, &DVector::from_element(10, 0.3), &LaplaceControls::default()).unwrap();
        assert!(post.mu_q.amax() < 1e-8);
        let c = crate::gp_prior::kernel_entries(model.coefficient_coordinates(), &theta).unwrap();
        assert!((&post.covariance - c).amax() < 1e-10);
        assert!(kl_q_prior(model.coefficient_coordinates(), &post, &theta).unwrap().abs() < 1e-8);
        let g = kl_grad_theta(model.coefficient_coordinates(), &post, &theta).unwrap();
        assert!(g[0].abs() < 1e-6 && g[1].abs() < 1e-6);
    }

    #[test]
    fn tiny_noise_map_tracks_data() {
        let (model, obs) = conjugate(8, 1e-3, 2);
        let theta = GpHyperparams::<f64>::new(1.0, 0.3, 0.1).unwrap();
        let map = map_estimate(&model, &obs, &theta, &DVector::zeros(8), &LaplaceControls::default()).unwrap();
        assert!(map.converged, "{}", map.message);
        for (i, v) in obs.y_values.iter().enumerate() {
            assert!((map.y[i] - v).abs() < 10.0 * 1e-3);
        }
    }

    #[test]
    fn kl_single_component_hand_value() {
        let xi = CoordinateSet::new(vec![0.0, 1.0]).unwrap();
        // Independent components with unit variance: λ tiny makes C ≈ I.
        let theta = GpHyperparams::<f64>::new(1.0, 1e-3, 1e-12).unwrap();
        let post = LaplacePosterior {
            mu_q: DVector::from_vec(vec![2.0, 0.0]),
            precision: DMatrix::identity(2, 2),
            covariance: DMatrix::identity(2, 2),
            covariance_factor: DMatrix::identity(2, 2),
            jitter: 0.0,
        };
        assert!((kl_q_prior(&xi, &post, &theta).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = DMatrix::from_fn(10, 10, |i, j| {
            if i == j {
                0.5 + rng.random::<f64>()
            } else if j < i {
                0.3 * (rng.random::<f64>() - 0.5)
            } else {
                0.0
            }
        });
        let post = LaplacePosterior {
            mu_q: DVector::from_fn(10, |_, _| rng.random::<f64>() - 0.5),
            precision: DMatrix::zeros(10, 10),
            covariance: &r * r.transpose(),
            covariance_factor: r,
            jitter: 0.0,
        };
        let theta = GpHyperparams::<f64>::new(0.8, 0.25, 0.1).unwrap();
        let g = kl_grad_theta(&xi, &post, &theta).unwrap();
        let lp = theta.log_params();
        for k in 0..2 {
            let h = 1e-6;
            let (mut a, mut b) = (lp, lp);
            a[k] += h;
            b[k] -= h;
            let fa = kl_q_prior(&xi, &post, &GpHyperparams::from_log(a, 0.1).unwrap()).unwrap();
            let fb = kl_q_prior(&xi, &post, &GpHyperparams::from_log(b, 0.1).unwrap()).unwrap();
            let fd = (fa - fb) / (2.0 * h);
            assert!((g[k] - fd).abs() / fd.abs() < 1e-6, "{k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn m_step_recovers_prior_hyperparameters() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 15).unwrap();
        let truth = GpHyperparams::<f64>::new(1.3, 0.2, 0.05).unwrap();
        let c = kernel_matrix(&xi, &truth).unwrap();
        let post = LaplacePosterior {
            mu_q: DVector::zeros(15),
            precision: c.inverse(),
            covariance: c.matrix().clone(),
            covariance_factor: c.factor().clone(),
            jitter: 0.0,
        };
        let start = GpHyperparams::<f64>::new(0.7, 0.35, 0.05).unwrap();
        let ms = m_step(&xi, &post, &start, &LaplaceControls::default()).unwrap();
        assert!(ms.kl <= ms.kl_init);
        assert!((ms.theta.sigma / truth.sigma - 1.0).abs() < 1e-4);
        assert!((ms.theta.lambda / truth.lambda - 1.0).abs() < 1e-4);
        let g = kl_grad_theta(&xi, &post, &ms.theta).unwrap();
        assert!(g[0].abs().max(g[1].abs()) <= 1e-6);
    }

    #[test]
    fn m_step_on_a_gp_draw_recovers_length_scale() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 20).unwrap();
        let truth = GpHyperparams::<f64>::new(1.0, 0.2, 1e-2).unwrap();
        let y = sample_prior(&truth, &xi, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // A sharply peaked posterior around a single draw.
        let post = LaplacePosterior {
            mu_q: y,
            precision: DMatrix::identity(20, 20) * 1e6,
            covariance: DMatrix::identity(20, 20) * 1e-6,
            covariance_factor: DMatrix::identity(20, 20) * 1e-3,
            jitter: 0.0,
        };
        let start = GpHyperparams::<f64>::new(1.0, 0.25, 1e-2).unwrap();
        let ms = m_step(&xi, &post, &start, &LaplaceControls::default()).unwrap();
        assert!((ms.theta.lambda / truth.lambda - 1.0).abs() < 0.3, "{:?}", ms.theta);
    }

    #[test]
    fn infinite_rtol_runs_one_cycle_and_conjugate_result_is_exact() {
        let (model, obs) = conjugate(12, 0.3, 9);
        let theta = GpHyperparams::<f64>::new(1.0, 0.2, 0.1).unwrap();
        let controls = LaplaceControls {
            rtol: f64::INFINITY,
            ..LaplaceControls::default()
        };
        let state = laplace_em(&model, &obs, &theta, &controls).unwrap();
        assert_eq!(state.cycle, 1);
        assert_eq!(state.kl_history.len(), 1);

        let state = laplace_em(&model, &obs, &theta, &LaplaceControls::default()).unwrap();
        assert!(state.converged);
        let (mean, cov) = closed_form(model.coefficient_coordinates(), &state.theta, &obs);
        assert!((&state.posterior.mu_q - mean).amax() < 1e-8);
        assert!((&state.posterior.covariance - cov).amax() < 1e-8);
        for w in state.kl_history.windows(2) {
            assert!(w[1].is_finite());
        }
    }

    #[test]
    fn e_step_uses_one_prior_factorization() {
        let (model, obs) = conjugate(6, 0.3, 1);
        let theta = GpHyperparams::<f64>::new(1.0, 0.2, 0.1).unwrap();
        let (r, c) = instrument::measure(|| e_step(&model, &obs, &theta, &DVector::zeros(6), &LaplaceControls::default()));
        r.unwrap();
        assert_eq!(c.prior_factorizations, 1);
    }
}
