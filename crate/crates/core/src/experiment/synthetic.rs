use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Problem};
use crate::adjoint::ObservationSet;
use crate::error::{Error, Result};
use crate::gp_prior::{sample_prior, CoordinateSet};
use crate::physics::{LinearDiffusion, NonlinearDiffusion, PhysicsModel};

/// Maximum number of reference redraws after a forward failure.
pub const MAX_REDRAWS: usize = 5;

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Reference = 1,
    Noise = 2,
    Method = 3,
    Elbo = 4,
    Chain = 5,
}

/// Seed for `(stream, index)` under `master`. Distinct pairs give
/// non-overlapping ChaCha streams.
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((stream as u64) << 32) | (index & 0xffff_ffff));
    rng.next_u64()
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Synthetic observations and the truth they were generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Coefficient coordinates (space for the linear problem, state values otherwise).
    pub grid: Vec<f64>,
    pub y_ref: Vec<f64>,
    pub state_grid: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub observations: ObservationSet<f64>,
    /// Reference draws discarded because the forward solve failed.
    pub redraws: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn y_ref_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y_ref)
    }
}

/// Forward model described by the configuration.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Box<dyn PhysicsModel<f64>>> {
    Ok(match cfg.problem {
        Problem::Linear => Box::new(LinearDiffusion::new(cfg.m, cfg.n, cfg.u_left, cfg.u_right)?),
        Problem::Nonlinear => {
            let u_min = cfg
                .u_min
                .ok_or_else(|| Error::Config("the nonlinear problem needs u_min".into()))?;
            Box::new(NonlinearDiffusion::new(cfg.m, cfg.n, cfg.u_left, cfg.u_right, u_min)?)
        }
    })
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, len: usize, k: usize) -> Vec<usize> {
    let mut v = index::sample(rng, len, k).into_vec();
    v.sort_unstable();
    v
}

fn noisy<R: Rng + ?Sized>(rng: &mut R, exact: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        exact
    } else {
        let z: f64 = rng.sample(StandardNormal);
        exact + sigma * z
    }
}

/// Reference coefficient, forward solution and noisy observations.
///
/// The linear reference is a prior draw at `θ_ref` (redrawn on forward
/// failure); the nonlinear reference is `y(u) = u`, observed at both ends of
/// the coefficient grid.
pub fn generate_synthetic(cfg: &ExperimentConfig, model: &dyn PhysicsModel<f64>, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let xi: &CoordinateSet<f64> = model.coefficient_coordinates();
    let (y_ref, u_ref, redraws) = match cfg.problem {
        Problem::Linear => {
            let theta = cfg
                .theta_reference()
                .ok_or_else(|| Error::Config("prior.reference is required".into()))?;
            let mut last_err = None;
            let mut found = None;
            for attempt in 0..=MAX_REDRAWS {
                let mut rng = stream_rng(seed, Stream::Reference, attempt as u64);
                let y: DVector<f64> = sample_prior(&theta, xi, &mut rng)?;
                match model.solve_forward(&y) {
                    Ok(u) => {
                        found = Some((y, u, attempt));
                        break;
                    }
                    Err(e) => {
                        eprintln!("reference draw {attempt} rejected: {e}");
                        last_err = Some(e);
                    }
                }
            }
            match found {
                Some(f) => f,
                None => {
                    return Err(Error::Sampling(format!(
                        "no admissible reference after {MAX_REDRAWS} redraws: {}",
                        last_err.map(|e| e.to_string()).unwrap_or_default()
                    )))
                }
            }
        }
        Problem::Nonlinear => {
            let y = DVector::from_column_slice(xi.as_slice());
            let u = model.solve_forward(&y)?;
            (y, u, 0)
        }
    };

    let mut design = ChaCha8Rng::seed_from_u64(cfg.design.seed);
    let u_indices = sorted_sample(&mut design, cfg.m, cfg.design.n_u_obs);
    let y_indices = match cfg.problem {
        Problem::Linear => sorted_sample(&mut design, cfg.n, cfg.design.n_y_obs),
        Problem::Nonlinear => vec![0, cfg.n - 1],
    };

    let mut noise = stream_rng(seed, Stream::Noise, 0);
    let sig_u = cfg.noise.sigma_us;
    let sig_y = cfg.noise.sigma_ys;
    let u_values = u_indices.iter().map(|&i| noisy(&mut noise, u_ref[i], sig_u)).collect();
    let y_values = y_indices.iter().map(|&i| noisy(&mut noise, y_ref[i], sig_y)).collect();
    let observations = ObservationSet {
        u_indices,
        u_values,
        y_indices,
        y_values,
        sigma_us: sig_u,
        sigma_ys: sig_y,
    };

    Ok(Dataset {
        grid: xi.as_slice().to_vec(),
        y_ref: y_ref.iter().copied().collect(),
        state_grid: model.state_coordinates(),
        u_ref: u_ref.iter().copied().collect(),
        observations,
        redraws,
        seed,
    })
}
