//! Empirical-Bayes inversion of diffusion-type PDE coefficients.
//!
//! The unknown coefficient `y` (a log-conductivity indexed by space or by the
//! state value) gets a squared-exponential Gaussian process prior. Two
//! approximate inference schemes fit both the posterior over `y` and the prior
//! hyperparameters: Laplace approximation inside an EM loop ([`laplace_em`])
//! and doubly stochastic variational inference ([`dsvi`]). Gradients and
//! Hessians of the likelihood come from discrete adjoints ([`adjoint`]) of the
//! finite-volume models in [`physics`]; [`mcmc`] provides a MALA reference.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix `f64`.

pub mod adjoint;
pub mod dsvi;
pub mod error;
pub mod experiment;
pub mod gp_prior;
pub mod instrument;
pub mod laplace_em;
pub mod mcmc;
pub mod optim;
pub mod physics;
pub mod result;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type GpHyperparamsF64 = gp_prior::GpHyperparams<f64>;
pub type CoordinateSetF64 = gp_prior::CoordinateSet<f64>;
pub type GpPriorF64 = gp_prior::GpPrior<f64>;
pub type ObservationSetF64 = adjoint::ObservationSet<f64>;
pub type LinearDiffusionF64 = physics::LinearDiffusion<f64>;
pub type NonlinearDiffusionF64 = physics::NonlinearDiffusion<f64>;
pub type DirectObservationF64 = physics::DirectObservation<f64>;
pub type LaplaceControlsF64 = laplace_em::LaplaceControls<f64>;
pub type LaplacePosteriorF64 = laplace_em::LaplacePosterior<f64>;
pub type VariationalGaussianF64 = dsvi::VariationalGaussian<f64>;
pub type ChainResultF64 = mcmc::ChainResult<f64>;
pub type InferenceResultF64 = result::InferenceResult<f64>;
