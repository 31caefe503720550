//! Preconditioned Metropolis-adjusted Langevin sampler for the posterior
//! `p(y | D, θ)`, used as the reference against which the approximate methods
//! are compared.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{grad_log_likelihood, ObservationSet};
use crate::error::{Error, Result};
use crate::gp_prior::{standard_normal_vector, GpHyperparams, GpPrior};
use crate::instrument;
use crate::laplace_em::{e_step, map_estimate, LaplaceControls};
use crate::physics::PhysicsModel;
use crate::result::{InferenceResult, Method};
use crate::scalar::Scalar;

/// Proposal geometry: `y = A v` with MALA run on `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    /// `A = chol(C_p)`: the prior becomes standard normal.
    Prior,
    /// `A = chol(Σ)` of the Laplace approximation at the MAP.
    Laplace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub n_samples: usize,
    pub n_burn: usize,
    /// Initial step size in the preconditioned coordinates.
    pub step_size: f64,
    pub adapt_target: f64,
    pub seed: u64,
    pub preconditioner: Preconditioner,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_samples: 10_000,
            n_burn: 2_000,
            step_size: 0.1,
            adapt_target: 0.574,
            seed: 0,
            preconditioner: Preconditioner::Prior,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be ≥ 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidInput("step_size must be positive".into()));
        }
        if !(self.adapt_target > 0.0 && self.adapt_target < 1.0) {
            return Err(Error::InvalidInput("adapt_target must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChainResult<T: Scalar> {
    /// One row per stored sample.
    pub samples: DMatrix<T>,
    /// Over the post-burn-in transitions.
    pub acceptance_rate: f64,
    pub mean: DVector<T>,
    pub stddev: DVector<T>,
    /// Step size after adaptation.
    pub step_size: f64,
    pub warnings: Vec<String>,
}

impl<T: Scalar> ChainResult<T> {
    /// CSV with a header `y0,y1,...` and one row per sample.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.samples.ncols();
        let header: Vec<String> = (0..n).map(|i| format!("y{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in self.samples.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{:e}", v.to_f64_lossy())).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn to_result(&self, theta: GpHyperparams<T>, seed: u64, counts: instrument::Counts) -> InferenceResult<T> {
        InferenceResult {
            method: Method::Mcmc,
            variant: None,
            theta_hat: theta,
            mean: self.mean.iter().copied().collect(),
            stddev: self.stddev.iter().copied().collect(),
            factor: None,
            n_samples: Some(self.samples.nrows()),
            elbo: None,
            iterations: self.samples.nrows(),
            converged: self.warnings.is_empty(),
            seed: Some(seed),
            trace: vec![self.acceptance_rate],
            counts,
            wall_time_s: 0.0,
        }
    }
}

/// Componentwise sample mean and `(n−1)`-normalized standard deviation.
pub fn posterior_summary<T: Scalar>(samples: &DMatrix<T>) -> Result<(DVector<T>, DVector<T>)> {
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let d = samples.ncols();
    let inv = T::one() / T::lit(n as f64);
    let mean = DVector::from_fn(d, |j, _| samples.column(j).sum() * inv);
    let sd = DVector::from_fn(d, |j, _| {
        if n < 2 {
            return T::zero();
        }
        let m = mean[j];
        let ss = samples.column(j).iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
        (ss / T::lit((n - 1) as f64)).sqrt()
    });
    Ok((mean, sd))
}

struct State<T: Scalar> {
    v: DVector<T>,
    log_target: T,
    /// Gradient of the log target in `v`.
    grad: DVector<T>,
}

struct Target<'a, T: Scalar, P: ?Sized> {
    model: &'a P,
    obs: &'a ObservationSet<T>,
    prior: &'a GpPrior<T>,
    a: &'a DMatrix<T>,
}

impl<T: Scalar, P: PhysicsModel<T> + ?Sized> Target<'_, T, P> {
    /// `None` when the forward model fails (treated as zero density).
    fn eval(&self, v: DVector<T>) -> Option<State<T>> {
        let y = self.a * &v;
        let d = grad_log_likelihood(self.model, self.obs, &y).ok()?;
        let alpha = self.prior.cov.solve(&y);
        let log_target = d.value - y.dot(&alpha) * T::lit(0.5);
        let grad = self.a.tr_mul(&(&d.gradient - &alpha));
        if !log_target.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some(State { v, log_target, grad })
    }
}

/// `log q(to | from)` up to a constant for step `h`.
fn log_proposal<T: Scalar>(to: &DVector<T>, from: &State<T>, h: T) -> T {
    let mean = &from.v + &from.grad * (h * T::lit(0.5));
    -(to - mean).norm_squared() / (T::lit(2.0) * h)
}

/// MALA started at the MAP. The step size is adapted toward `adapt_target`
/// by Robbins-Monro during burn-in and frozen afterwards.
pub fn run_mala<T: Scalar, P: PhysicsModel<T> + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    theta: &GpHyperparams<T>,
    config: &ChainConfig,
) -> Result<ChainResult<T>> {
    config.validate()?;
    theta.validate()?;
    let n = model.param_dim();
    obs.validate(model.state_dim(), n)?;
    let prior = GpPrior::new(model.coefficient_coordinates(), *theta)?;
    let controls = LaplaceControls::default();
    let zero = DVector::zeros(n);
    let (y0, a) = match config.preconditioner {
        Preconditioner::Prior => {
            let map = map_estimate(model, obs, theta, &zero, &controls)?;
            (map.y, prior.cov.factor().clone())
        }
        Preconditioner::Laplace => {
            let post = e_step(model, obs, theta, &zero, &controls)?;
            (post.mu_q.clone(), post.covariance_factor)
        }
    };
    let target = Target {
        model,
        obs,
        prior: &prior,
        a: &a,
    };
    let v0 = a
        .solve_lower_triangular(&y0)
        .ok_or(Error::Singular("MALA preconditioner"))?;
    let mut state = target
        .eval(v0)
        .ok_or_else(|| Error::Sampling("forward model fails at the initial point".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log_h = config.step_size.ln();
    let target_rate = config.adapt_target;
    let mut samples = DMatrix::zeros(config.n_samples, n);
    let mut accepted = 0usize;
    let mut transitions = 0usize;

    let total = config.n_burn + config.n_samples - 1;
    let mut row = 0;
    if config.n_burn == 0 {
        samples.row_mut(0).copy_from(&(&a * &state.v).transpose());
        row = 1;
    }
    for t in 0..total {
        let h = T::lit(log_h.exp());
        let xi = standard_normal_vector::<T, _>(n, &mut rng);
        let prop_v = &state.v + &state.grad * (h * T::lit(0.5)) + xi * h.sqrt();
        let accept_prob = match target.eval(prop_v) {
            Some(prop) => {
                let log_ratio = prop.log_target - state.log_target + log_proposal(&state.v, &prop, h)
                    - log_proposal(&prop.v, &state, h);
                let p = log_ratio.to_f64_lossy().min(0.0).exp();
                let u: f64 = rng.random();
                if u < p {
                    state = prop;
                    if t >= config.n_burn {
                        accepted += 1;
                    }
                }
                p
            }
            None => {
                let _: f64 = rng.random();
                0.0
            }
        };
        if t < config.n_burn {
            let gamma = ((t + 1) as f64).powf(-0.6);
            log_h += gamma * (accept_prob - target_rate);
        } else {
            transitions += 1;
        }
        if t + 1 >= config.n_burn {
            samples.row_mut(row).copy_from(&(&a * &state.v).transpose());
            row += 1;
        }
    }
    debug_assert_eq!(row, config.n_samples);

    let acceptance_rate = if transitions > 0 {
        accepted as f64 / transitions as f64
    } else {
        0.0
    };
    let mut warnings = Vec::new();
    if transitions > 0 && !(0.1..=0.9).contains(&acceptance_rate) {
        warnings.push(format!(
            "post-burn-in acceptance rate {acceptance_rate:.3} outside [0.1, 0.9]"
        ));
    }
    let (mean, stddev) = posterior_summary(&samples)?;
    Ok(ChainResult {
        samples,
        acceptance_rate,
        mean,
        stddev,
        step_size: log_h.exp(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_prior::{kernel_entries, CoordinateSet};
    use crate::physics::DirectObservation;

    /// Standard error of a chain average by non-overlapping batch means.
    fn batch_se(x: &[f64]) -> f64 {
        let b = 50;
        let len = x.len() / b;
        let means: Vec<f64> = (0..b).map(|k| x[k * len..(k + 1) * len].iter().sum::<f64>() / len as f64).collect();
        let m = means.iter().sum::<f64>() / b as f64;
        let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1) as f64;
        (var / b as f64).sqrt()
    }

    #[test]
    fn summary_hand_values() {
        let s = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let (m, sd) = posterior_summary(&s).unwrap();
        assert_eq!(m[0], 1.0);
        assert!((sd[0] - 2f64.sqrt()).abs() < 1e-15);
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let (_, sd) = posterior_summary(&same).unwrap();
        assert_eq!(sd.amax(), 0.0);
        let a = DMatrix::from_row_slice(3, 1, &[1.0, 5.0, 2.0]);
        let b = DMatrix::from_row_slice(3, 1, &[5.0, 2.0, 1.0]);
        assert_eq!(posterior_summary(&a).unwrap(), posterior_summary(&b).unwrap());
    }

    #[test]
    fn single_sample_chain_is_the_initial_state() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 4).unwrap();
        let model = DirectObservation::new(xi);
        let obs = ObservationSet {
            u_indices: vec![],
            u_values: vec![],
            y_indices: vec![1],
            y_values: vec![0.7],
            sigma_us: 1.0,
            sigma_ys: 0.2,
        };
        let theta = GpHyperparams::<f64>::new(1.0, 0.3, 0.1).unwrap();
        let cfg = ChainConfig {
            n_samples: 1,
            n_burn: 0,
            ..ChainConfig::default()
        };
        let chain = run_mala(&model, &obs, &theta, &cfg).unwrap();
        let map = map_estimate(&model, &obs, &theta, &DVector::zeros(4), &LaplaceControls::default()).unwrap();
        assert_eq!(chain.samples.nrows(), 1);
        assert!((chain.samples.row(0).transpose() - map.y).amax() < 1e-12);
    }

    #[test]
    fn prior_moments_without_data() {
        let n = 5;
        let xi = CoordinateSet::linspace(0.0, 1.0, n).unwrap();
        let model = DirectObservation::new(xi.clone());
        let obs = ObservationSet::empty(1.0, 1.0);
        let theta = GpHyperparams::<f64>::new(1.0, 0.3, 0.1).unwrap();
        let cfg = ChainConfig {
            n_samples: 20_000,
            n_burn: 1_000,
            seed: 4,
            ..ChainConfig::default()
        };
        let chain = run_mala(&model, &obs, &theta, &cfg).unwrap();
        assert!(chain.warnings.is_empty(), "{:?}", chain.warnings);
        let c = kernel_entries(&xi, &theta).unwrap();
        for i in 0..n {
            let col: Vec<f64> = chain.samples.column(i).iter().copied().collect();
            assert!(chain.mean[i].abs() < 5.0 * batch_se(&col), "mean {i}");
            let sq: Vec<f64> = col.iter().map(|v| v * v).collect();
            let second = sq.iter().sum::<f64>() / sq.len() as f64;
            assert!((second - c[(i, i)]).abs() < 5.0 * batch_se(&sq), "variance {i}: {second} vs {}", c[(i, i)]);
        }
    }

    #[test]
    fn conjugate_posterior_mean_for_both_preconditioners() {
        let n = 6;
        let xi = CoordinateSet::linspace(0.0, 1.0, n).unwrap();
        let model = DirectObservation::new(xi.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = ObservationSet {
            u_indices: vec![],
            u_values: vec![],
            y_indices: (0..n).collect(),
            y_values: (0..n).map(|_| rng.random::<f64>() - 0.5).collect(),
            sigma_us: 1.0,
            sigma_ys: 0.3,
        };
        let theta = GpHyperparams::<f64>::new(1.0, 0.3, 0.1).unwrap();
        let c = kernel_entries(&xi, &theta).unwrap();
        let a = &c + DMatrix::identity(n, n) * 0.09;
        let mean = &c * a.cholesky().unwrap().solve(&DVector::from_column_slice(&obs.y_values));
        for pre in [Preconditioner::Prior, Preconditioner::Laplace] {
            let cfg = ChainConfig {
                n_samples: 20_000,
                n_burn: 1_000,
                seed: 9,
                preconditioner: pre,
                ..ChainConfig::default()
            };
            let chain = run_mala(&model, &obs, &theta, &cfg).unwrap();
            for i in 0..n {
                let col: Vec<f64> = chain.samples.column(i).iter().copied().collect();
                assert!((chain.mean[i] - mean[i]).abs() < 5.0 * batch_se(&col), "{pre:?} component {i}");
            }
        }
    }

    #[test]
    fn two_component_gaussian_moments() {
        // Correlated 2D target: identity observation of both components.
        let xi = CoordinateSet::new(vec![0.0, 0.1]).unwrap();
        let model = DirectObservation::new(xi.clone());
        let obs = ObservationSet {
            u_indices: vec![],
            u_values: vec![],
            y_indices: vec![0],
            y_values: vec![1.0],
            sigma_us: 1.0,
            sigma_ys: 0.5,
        };
        let theta = GpHyperparams::<f64>::new(1.0, 0.2, 0.1).unwrap();
        let c = kernel_entries(&xi, &theta).unwrap();
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let cov = (c.clone().try_inverse().unwrap() + h).try_inverse().unwrap();
        let mean = &cov * DVector::from_vec(vec![4.0, 0.0]);
        let cfg = ChainConfig {
            n_samples: 20_000,
            n_burn: 1_000,
            seed: 2,
            ..ChainConfig::default()
        };
        let chain = run_mala(&model, &obs, &theta, &cfg).unwrap();
        for i in 0..2 {
            let col: Vec<f64> = chain.samples.column(i).iter().copied().collect();
            assert!((chain.mean[i] - mean[i]).abs() < 5.0 * batch_se(&col));
            let sq: Vec<f64> = col.iter().map(|v| (v - mean[i]).powi(2)).collect();
            let var = sq.iter().sum::<f64>() / sq.len() as f64;
            assert!((var - cov[(i, i)]).abs() < 5.0 * batch_se(&sq));
        }
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let chain = ChainResult {
            samples: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            acceptance_rate: 0.5,
            mean: DVector::zeros(2),
            stddev: DVector::zeros(2),
            step_size: 0.1,
            warnings: vec![],
        };
        let mut buf = Vec::new();
        chain.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("y0,y1\n"));
    }
}
