use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{log_likelihood, ObservationSet};
use crate::error::{check_dim, Error, Result};
use crate::gp_prior::{kernel_matrix, kl_to_prior, standard_normal_vector, GpHyperparams};
use crate::instrument;
use crate::physics::PhysicsModel;
use crate::result::{ElboEstimate, InferenceResult};
use crate::scalar::Scalar;

/// Largest tolerated fraction of draws whose forward solve fails.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// `(1/n) Σ log p(D | y⁽ᵏ⁾) − KL(q ‖ p(·|θ))` with `y⁽ᵏ⁾ = μ + R z⁽ᵏ⁾`.
///
/// The standard error is the sample deviation of the log-likelihood term over
/// `√n`. All draws come from `rng` before any forward solve, so the estimate is
/// the same whether or not the solves run in parallel.
pub fn estimate_elbo_mc<T: Scalar, P: PhysicsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    obs: &ObservationSet<T>,
    mu: &DVector<T>,
    factor: &DMatrix<T>,
    theta: &GpHyperparams<T>,
    n: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    let dim = model.param_dim();
    check_dim("variational mean", dim, mu.len())?;
    check_dim("variational factor rows", dim, factor.nrows())?;
    check_dim("variational factor columns", dim, factor.ncols())?;
    obs.validate(model.state_dim(), dim)?;
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 ELBO samples".into()));
    }
    let c = kernel_matrix(model.coefficient_coordinates(), theta)?;
    let kl = kl_to_prior(&c, mu, factor)?.to_f64_lossy();

    let zs: Vec<DVector<T>> = (0..n).map(|_| standard_normal_vector(dim, rng)).collect();
    let evals: Vec<_> = zs
        .par_iter()
        .map(|z| {
            instrument::measure_detached(|| {
                let y = mu + factor * z;
                log_likelihood(model, obs, &y)
            })
        })
        .collect();

    let mut values = Vec::with_capacity(n);
    let mut failures = 0;
    for (res, counts) in evals {
        instrument::absorb(counts);
        match res.map(|v| v.to_f64_lossy()) {
            Ok(v) if v.is_finite() => values.push(v),
            _ => failures += 1,
        }
    }
    if failures as f64 > MAX_FAILURE_FRACTION * n as f64 || values.len() < 2 {
        return Err(Error::Sampling(format!(
            "{failures} of {n} ELBO draws failed the forward solve"
        )));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    Ok(ElboEstimate {
        value: mean - kl,
        stderr: (var / k).sqrt(),
        samples: n,
        failures,
    })
}

/// Pointwise agreement of a candidate posterior with a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `‖μ_b − μ_a‖ / ‖μ_a‖`.
    pub mean_rel_l2: f64,
    /// `‖s_b − s_a‖ / ‖s_a‖`.
    pub stddev_rel_l2: f64,
    pub mean_max_abs: f64,
    pub stddev_max_abs: f64,
    /// `(reference, candidate)` per coefficient.
    pub scatter_mean: Vec<(f64, f64)>,
    pub scatter_stddev: Vec<(f64, f64)>,
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (y - x).abs()))
}

/// Compare `candidate` against `reference` (normally the MCMC result).
pub fn compare_posteriors<T: Scalar>(reference: &InferenceResult<T>, candidate: &InferenceResult<T>) -> Result<Comparison> {
    let n = reference.mean.len();
    check_dim("candidate mean", n, candidate.mean.len())?;
    check_dim("reference stddev", n, reference.stddev.len())?;
    check_dim("candidate stddev", n, candidate.stddev.len())?;
    let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    let (ma, mb) = (f(&reference.mean), f(&candidate.mean));
    let (sa, sb) = (f(&reference.stddev), f(&candidate.stddev));
    Ok(Comparison {
        mean_rel_l2: rel_l2(&ma, &mb),
        stddev_rel_l2: rel_l2(&sa, &sb),
        mean_max_abs: max_abs(&ma, &mb),
        stddev_max_abs: max_abs(&sa, &sb),
        scatter_mean: ma.into_iter().zip(mb).collect(),
        scatter_stddev: sa.into_iter().zip(sb).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_prior::CoordinateSet;
    use crate::instrument::Counts;
    use crate::physics::DirectObservation;
    use crate::result::Method;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn result(mean: Vec<f64>, stddev: Vec<f64>) -> InferenceResult<f64> {
        InferenceResult {
            method: Method::Mcmc,
            variant: None,
            theta_hat: GpHyperparams::new(1.0, 0.2, 0.01).unwrap(),
            mean,
            stddev,
            factor: None,
            n_samples: None,
            elbo: None,
            iterations: 0,
            converged: true,
            seed: None,
            trace: vec![],
            counts: Counts::default(),
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn identical_posteriors_compare_to_zero() {
        let a = result(vec![1.0, -2.0, 0.5], vec![0.1, 0.2, 0.3]);
        let c = compare_posteriors(&a, &a).unwrap();
        assert_eq!((c.mean_rel_l2, c.stddev_rel_l2, c.mean_max_abs, c.stddev_max_abs), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(c.scatter_mean.len(), 3);
        assert_eq!(c.scatter_stddev.len(), 3);
    }

    #[test]
    fn doubled_stddev_gives_unit_error() {
        let a = result(vec![1.0, 2.0], vec![0.3, 0.4]);
        let b = result(vec![1.0, 2.0], vec![0.6, 0.8]);
        let c = compare_posteriors(&a, &b).unwrap();
        assert_eq!(c.mean_rel_l2, 0.0);
        assert!((c.stddev_rel_l2 - 1.0).abs() < 1e-15);
        assert!((c.stddev_max_abs - 0.4).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let a = result(vec![1.0, 2.0], vec![0.3, 0.4]);
        let b = result(vec![1.0], vec![0.6]);
        assert!(matches!(compare_posteriors(&a, &b), Err(Error::Dimension { .. })));
    }

    fn direct(n: usize) -> DirectObservation<f64> {
        DirectObservation::new(CoordinateSet::linspace(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn no_data_gives_minus_kl_exactly() {
        let model = direct(5);
        let obs = ObservationSet::empty(0.1, 0.1);
        let theta = GpHyperparams::new(1.0, 0.3, 0.05).unwrap();
        let mu = DVector::from_fn(5, |i, _| 0.1 * i as f64);
        let r = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.5 } else if j < i { 0.05 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = estimate_elbo_mc(&model, &obs, &mu, &r, &theta, 100, &mut rng).unwrap();
        let c = kernel_matrix(model.coefficient_coordinates(), &theta).unwrap();
        let kl = kl_to_prior(&c, &mu, &r).unwrap();
        assert_eq!(e.value, -kl);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.failures, 0);
    }

    #[test]
    fn same_seed_same_estimate() {
        let model = direct(4);
        let obs = ObservationSet {
            u_indices: vec![],
            u_values: vec![],
            y_indices: vec![1, 3],
            y_values: vec![0.2, -0.4],
            sigma_us: 0.1,
            sigma_ys: 0.1,
        };
        let theta = GpHyperparams::new(1.0, 0.3, 0.05).unwrap();
        let mu = DVector::zeros(4);
        let r = DMatrix::identity(4, 4) * 0.3;
        let a = estimate_elbo_mc(&model, &obs, &mu, &r, &theta, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = estimate_elbo_mc(&model, &obs, &mu, &r, &theta, 500, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.stderr > 0.0);
    }
}
