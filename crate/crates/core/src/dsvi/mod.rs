//! Doubly stochastic variational inference: reparameterized single-sample
//! ELBO gradients, batch averaging and adaptive stochastic gradient ascent
//! over the variational parameters and the prior hyperparameters jointly.

mod factor;
mod sga;

pub use factor::{materialize_factor, FactorParameterization, VariationalGaussian, DIAGONAL_FLOOR};
pub use sga::{adaptive_step, Accumulator, SgaState, StepRule};

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{grad_log_likelihood, log_likelihood, ObservationSet};
use crate::error::{check_dim, Error, Result};
use crate::gp_prior::{kernel_grad, standard_normal_vector, CoordinateSet, GpHyperparams, GpPrior, HyperParam};
use crate::instrument::{self, Counts};
use crate::physics::PhysicsModel;
use crate::result::{factor_stddev, matrix_rows, InferenceResult, Method};
use crate::scalar::Scalar;
use factor::log_abs_det;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsviControls {
    pub batch_size: usize,
    pub eta_phi: f64,
    pub eta_theta: f64,
    pub step_rule: StepRule,
    pub max_iters: usize,
    /// Relative change of consecutive window averages that counts as a plateau.
    pub ftol: f64,
    pub window: usize,
    /// Return the average of the iterates over the last `average_windows`
    /// completed windows instead of the last iterate (0 disables).
    pub average_windows: usize,
    pub seed: u64,
    pub fix_theta: bool,
    /// Hold `θ` at its initial value for this many iterations.
    pub theta_warmup: usize,
    /// Evaluate batch samples on the rayon pool.
    pub parallel: bool,
}

impl Default for DsviControls {
    fn default() -> Self {
        DsviControls {
            batch_size: 8,
            eta_phi: 0.1,
            eta_theta: 0.05,
            step_rule: StepRule::default(),
            max_iters: 20_000,
            ftol: 1e-4,
            window: 500,
            average_windows: 20,
            seed: 0,
            fix_theta: false,
            theta_warmup: 5_000,
            parallel: true,
        }
    }
}

/// Prior quantities shared by all samples of one iteration: `C_p(θ)` with its
/// factor, `∂C_p/∂θ_i` and `½ tr(C_p⁻¹ ∂C_p/∂θ_i)`.
#[derive(Debug, Clone)]
pub struct PriorContext<T: Scalar> {
    pub prior: GpPrior<T>,
    dc: [DMatrix<T>; 2],
    half_trace: [T; 2],
}

impl<T: Scalar> PriorContext<T> {
    pub fn new(xi: &CoordinateSet<T>, theta: GpHyperparams<T>) -> Result<Self> {
        let prior = GpPrior::new(xi, theta)?;
        let inv = prior.cov.inverse();
        let dc = [
            kernel_grad(xi, &theta, HyperParam::Sigma)?,
            kernel_grad(xi, &theta, HyperParam::Lambda)?,
        ];
        let half = T::lit(0.5);
        let half_trace = [
            half * inv.component_mul(&dc[0]).sum(),
            half * inv.component_mul(&dc[1]).sum(),
        ];
        Ok(PriorContext {
            prior,
            dc,
            half_trace,
        })
    }

    pub fn theta(&self) -> &GpHyperparams<T> {
        &self.prior.theta
    }
}

/// Gradients of one ELBO sample.
#[derive(Debug, Clone)]
pub struct SampleGrads<T: Scalar> {
    pub f: T,
    pub mu: DVector<T>,
    pub factor: DVector<T>,
    /// Over `(log σ, log λ)`.
    pub theta: [T; 2],
}

fn check_q<T: Scalar>(q: &VariationalGaussian<T>, param: FactorParameterization, ctx: &PriorContext<T>, z: &DVector<T>) -> Result<()> {
    let n = ctx.prior.dim();
    check_dim("variational mean", n, q.dim())?;
    check_dim("standard normal draw", n, z.len())?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("standard normal draw"));
    }
    param.validate(n)
}

/// `f(z) = log p(D|y) + log|det R_q| − ½[yᵀC_p⁻¹y + log det C_p − N]`,
/// `y = μ_q + R_q z`.
pub fn elbo_sample<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    q: &VariationalGaussian<T>,
    param: FactorParameterization,
    ctx: &PriorContext<T>,
    z: &DVector<T>,
) -> Result<T> {
    check_q(q, param, ctx, z)?;
    let r = materialize_factor(q, param)?;
    let y = &q.mu_q + &r * z;
    let ll = log_likelihood(model, obs, &y)?;
    let (quad, logdet) = ctx.prior.cov.quad_logdet(&y)?;
    let n = T::lit(y.len() as f64);
    Ok(ll + log_abs_det(&r) - T::lit(0.5) * (quad + logdet - n))
}

/// Value and pathwise gradients of [`elbo_sample`]; one adjoint gradient.
pub fn elbo_sample_grads<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    q: &VariationalGaussian<T>,
    param: FactorParameterization,
    ctx: &PriorContext<T>,
    z: &DVector<T>,
) -> Result<SampleGrads<T>> {
    check_q(q, param, ctx, z)?;
    let r = materialize_factor(q, param)?;
    let y = &q.mu_q + &r * z;
    let d = grad_log_likelihood(model, obs, &y)?;
    let alpha = ctx.prior.cov.solve(&y);
    let n = y.len();
    let half = T::lit(0.5);
    let f = d.value + log_abs_det(&r) - half * (y.dot(&alpha) + ctx.prior.cov.log_det() - T::lit(n as f64));
    let g_y = &d.gradient - &alpha;

    let factor = match param {
        FactorParameterization::MeanField => DVector::from_fn(n, |i, _| g_y[i] * z[i] * r[(i, i)] + T::one()),
        _ => {
            let pat = param.pattern(n);
            DVector::from_iterator(
                pat.len(),
                pat.iter().map(|&(i, j)| {
                    let mut v = g_y[i] * z[j];
                    if i == j {
                        v += T::one() / r[(i, i)];
                    }
                    v
                }),
            )
        }
    };

    let theta = ctx.theta();
    let mut g_theta = [T::zero(); 2];
    for (k, which) in HyperParam::ALL.into_iter().enumerate() {
        let quad = alpha.dot(&(&ctx.dc[k] * &alpha));
        g_theta[k] = (half * quad - ctx.half_trace[k]) * theta.get(which);
    }
    if !f.is_finite() || g_y.iter().chain(factor.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ELBO sample gradient"));
    }
    Ok(SampleGrads {
        f,
        mu: g_y,
        factor,
        theta: g_theta,
    })
}

/// Batch average of `n` sample gradients with the sample variance of `f`.
#[derive(Debug, Clone)]
pub struct BatchGrads<T: Scalar> {
    pub f_mean: T,
    pub f_var: T,
    pub mu: DVector<T>,
    pub factor: DVector<T>,
    pub theta: [T; 2],
    /// Samples that were redrawn after a failed forward solve.
    pub resampled: usize,
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::NoConvergence { .. } | Error::NonFinite(_) | Error::Singular(_)
    )
}

/// One sample from its own substream; a failed draw is replaced once.
fn substream_sample<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    q: &VariationalGaussian<T>,
    param: FactorParameterization,
    ctx: &PriorContext<T>,
    seed: u64,
) -> Result<(SampleGrads<T>, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = q.dim();
    let z = standard_normal_vector(n, &mut rng);
    match elbo_sample_grads(model, obs, q, param, ctx, &z) {
        Ok(g) => Ok((g, false)),
        Err(e) if recoverable(&e) => {
            let z = standard_normal_vector(n, &mut rng);
            match elbo_sample_grads(model, obs, q, param, ctx, &z) {
                Ok(g) => Ok((g, true)),
                Err(e2) => Err(Error::Sampling(format!(
                    "two consecutive sample failures: {e}; {e2}"
                ))),
            }
        }
        Err(e) => Err(e),
    }
}

/// Average of `n` independent sample gradients. Each sample gets a seed drawn
/// from `rng` up front, so the result does not depend on `parallel`.
#[allow(clippy::too_many_arguments)]
pub fn batch_grads<T: Scalar, P: PhysicsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    q: &VariationalGaussian<T>,
    param: FactorParameterization,
    ctx: &PriorContext<T>,
    n: usize,
    rng: &mut R,
    parallel: bool,
) -> Result<BatchGrads<T>> {
    if n == 0 {
        return Err(Error::InvalidInput("batch size must be ≥ 1".into()));
    }
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let run = |seed: &u64| instrument::measure_detached(|| substream_sample(model, obs, q, param, ctx, *seed));
    let outcomes: Vec<_> = if parallel && n > 1 {
        seeds.par_iter().map(run).collect()
    } else {
        seeds.iter().map(run).collect()
    };

    let dim = q.dim();
    let mut mu = DVector::zeros(dim);
    let mut factor = DVector::zeros(q.packed_factor.len());
    let mut theta = [T::zero(); 2];
    let mut fs = Vec::with_capacity(n);
    let mut resampled = 0;
    let mut first_err = None;
    for (res, counts) in outcomes {
        instrument::absorb(counts);
        match res {
            Ok((g, again)) => {
                mu += &g.mu;
                factor += &g.factor;
                theta[0] += g.theta[0];
                theta[1] += g.theta[1];
                fs.push(g.f);
                resampled += again as usize;
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let inv = T::one() / T::lit(n as f64);
    let f_mean = fs.iter().fold(T::zero(), |a, &f| a + f) * inv;
    let f_var = if n > 1 {
        fs.iter().fold(T::zero(), |a, &f| a + (f - f_mean) * (f - f_mean)) / T::lit((n - 1) as f64)
    } else {
        T::zero()
    };
    Ok(BatchGrads {
        f_mean,
        f_var,
        mu: mu * inv,
        factor: factor * inv,
        theta: [theta[0] * inv, theta[1] * inv],
        resampled,
    })
}

/// Final state of a DSVI run.
#[derive(Debug, Clone)]
pub struct DsviOutput<T: Scalar> {
    pub q: VariationalGaussian<T>,
    pub param: FactorParameterization,
    pub theta: GpHyperparams<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Average of `f_n` over each completed window.
    pub window_means: Vec<f64>,
    pub aborted_iterations: usize,
    pub counts: Counts,
    pub wall_time_s: f64,
}

impl<T: Scalar> DsviOutput<T> {
    pub fn factor(&self) -> DMatrix<T> {
        materialize_factor(&self.q, self.param).expect("validated during the run")
    }

    pub fn to_result(&self, seed: Option<u64>) -> InferenceResult<T> {
        let r = self.factor();
        InferenceResult {
            method: Method::Dsvi,
            variant: Some(self.param.to_string()),
            theta_hat: self.theta,
            mean: self.q.mu_q.iter().copied().collect(),
            stddev: factor_stddev(&r),
            factor: Some(matrix_rows(&r)),
            n_samples: None,
            elbo: None,
            iterations: self.iterations,
            converged: self.converged,
            seed,
            trace: self.window_means.clone(),
            counts: self.counts,
            wall_time_s: self.wall_time_s,
        }
    }
}

/// Stochastic gradient ascent on the ELBO over `(μ_q, R_q)` and, unless
/// `fix_theta`, the log hyperparameters.
pub fn run_dsvi<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    q_init: Option<VariationalGaussian<T>>,
    param: FactorParameterization,
    theta_init: &GpHyperparams<T>,
    controls: &DsviControls,
) -> Result<DsviOutput<T>> {
    let start = Instant::now();
    let (out, counts) = instrument::measure(|| dsvi_loop(model, obs, q_init, param, theta_init, controls));
    let mut out = out?;
    out.counts = counts;
    out.wall_time_s = start.elapsed().as_secs_f64();
    Ok(out)
}

fn dsvi_loop<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    q_init: Option<VariationalGaussian<T>>,
    param: FactorParameterization,
    theta_init: &GpHyperparams<T>,
    controls: &DsviControls,
) -> Result<DsviOutput<T>> {
    let n = model.param_dim();
    theta_init.validate()?;
    obs.validate(model.state_dim(), n)?;
    param.validate(n)?;
    if controls.batch_size == 0 || controls.window == 0 || controls.max_iters == 0 {
        return Err(Error::InvalidInput(
            "batch_size, window and max_iters must be ≥ 1".into(),
        ));
    }
    let xi = model.coefficient_coordinates();
    let mut q = match q_init {
        Some(q) => {
            check_dim("initial variational mean", n, q.dim())?;
            check_dim("initial packed factor", param.packed_len(n), q.packed_factor.len())?;
            q
        }
        None => {
            let ctx = PriorContext::new(xi, *theta_init)?;
            VariationalGaussian::initial(&ctx.prior.cov, theta_init.sigma, param)?
        }
    };
    let mut log_theta = theta_init.log_params();
    let sigma_n = theta_init.sigma_n;
    let mut sga = SgaState::new(T::lit(controls.eta_phi), T::lit(controls.eta_theta), controls.step_rule);
    let mut rng = ChaCha8Rng::seed_from_u64(controls.seed);
    let packed = q.packed_factor.len();

    let mut aborts: VecDeque<usize> = VecDeque::new();
    let mut aborted = 0;
    let mut window_sum = 0.0;
    let mut window_count = 0usize;
    let mut window_means = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    // Running sums of the iterates within the current window.
    let mut avg_mu = DVector::zeros(n);
    let mut avg_factor = DVector::zeros(packed);
    let mut avg_theta = [T::zero(); 2];
    let mut recent: VecDeque<(DVector<T>, DVector<T>, [T; 2])> = VecDeque::new();

    for j in 0..controls.max_iters {
        iterations = j + 1;
        let theta = GpHyperparams::from_log(log_theta, sigma_n)?;
        let ctx = PriorContext::new(xi, theta)?;
        match batch_grads(model, obs, &q, param, &ctx, controls.batch_size, &mut rng, controls.parallel) {
            Ok(b) => {
                let mut g_phi = DVector::zeros(n + packed);
                g_phi.rows_mut(0, n).copy_from(&b.mu);
                g_phi.rows_mut(n, packed).copy_from(&b.factor);
                let g_theta = DVector::from_column_slice(&b.theta);
                let (rho_phi, rho_theta) = adaptive_step(&mut sga, &g_phi, &g_theta);
                let step = rho_phi.component_mul(&g_phi);
                q.mu_q += step.rows(0, n);
                q.packed_factor += step.rows(n, packed);
                q.apply_floor(param);
                if !controls.fix_theta && j >= controls.theta_warmup {
                    log_theta[0] += rho_theta[0] * g_theta[0];
                    log_theta[1] += rho_theta[1] * g_theta[1];
                }
                window_sum += b.f_mean.to_f64_lossy();
                window_count += 1;
            }
            Err(e) if matches!(e, Error::Sampling(_)) => {
                aborted += 1;
                aborts.push_back(j);
                while aborts.front().is_some_and(|&a| a + 100 <= j) {
                    aborts.pop_front();
                }
                if aborts.len() > 10 {
                    return Err(Error::Sampling(format!(
                        "{} aborted iterations within the last 100 (iteration {j}): {e}",
                        aborts.len()
                    )));
                }
            }
            Err(e) => return Err(e),
        }
        avg_mu += &q.mu_q;
        avg_factor += &q.packed_factor;
        avg_theta[0] += log_theta[0];
        avg_theta[1] += log_theta[1];

        if (j + 1) % controls.window == 0 {
            if controls.average_windows > 0 {
                recent.push_back((avg_mu.clone(), avg_factor.clone(), avg_theta));
                if recent.len() > controls.average_windows {
                    recent.pop_front();
                }
            }
            avg_mu.fill(T::zero());
            avg_factor.fill(T::zero());
            avg_theta = [T::zero(); 2];

            if window_count > 0 {
                window_means.push(window_sum / window_count as f64);
            }
            window_sum = 0.0;
            window_count = 0;
            let k = window_means.len();
            let theta_free = controls.fix_theta || j >= controls.theta_warmup;
            if k >= 3 && theta_free {
                let rel = |a: f64, b: f64| (b - a).abs() <= controls.ftol * a.abs();
                if rel(window_means[k - 3], window_means[k - 2]) && rel(window_means[k - 2], window_means[k - 1]) {
                    converged = true;
                    break;
                }
            }
        }
    }

    let (q_final, theta_final) = if recent.is_empty() {
        (q, log_theta)
    } else {
        let count = T::lit((recent.len() * controls.window) as f64);
        let mut mu = DVector::zeros(n);
        let mut fac = DVector::zeros(packed);
        let mut lt = [T::zero(); 2];
        for (m, f, t) in &recent {
            mu += m;
            fac += f;
            lt[0] += t[0];
            lt[1] += t[1];
        }
        let mut qa = VariationalGaussian {
            mu_q: mu / count,
            packed_factor: fac / count,
        };
        qa.apply_floor(param);
        (qa, [lt[0] / count, lt[1] / count])
    };
    Ok(DsviOutput {
        q: q_final,
        param,
        theta: GpHyperparams::from_log(theta_final, sigma_n)?,
        iterations,
        converged,
        window_means,
        aborted_iterations: aborted,
        counts: Counts::default(),
        wall_time_s: 0.0,
    })
}
