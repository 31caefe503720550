use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gp_prior::GpHyperparams;
use crate::instrument::Counts;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LaplaceEm,
    Dsvi,
    Mcmc,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::LaplaceEm => "laplace-em",
            Method::Dsvi => "dsvi",
            Method::Mcmc => "mcmc",
        }
    }
}

/// Simple Monte Carlo ELBO estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    /// Draws whose forward solve failed (excluded from the average).
    pub failures: usize,
}

/// Output of any inference method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult<T: Scalar> {
    pub method: Method,
    /// Factor parameterization for DSVI, absent otherwise.
    pub variant: Option<String>,
    pub theta_hat: GpHyperparams<T>,
    pub mean: Vec<T>,
    pub stddev: Vec<T>,
    /// Lower-triangular covariance factor, row-major. Absent for MCMC.
    pub factor: Option<Vec<Vec<T>>>,
    /// Number of stored posterior samples (MCMC).
    pub n_samples: Option<usize>,
    pub elbo: Option<ElboEstimate>,
    /// EM cycles, SGA iterations or chain length.
    pub iterations: usize,
    pub converged: bool,
    pub seed: Option<u64>,
    /// Per-cycle KL (Laplace-EM), per-window ELBO average (DSVI) or
    /// acceptance rate (MCMC).
    pub trace: Vec<f64>,
    pub counts: Counts,
    /// Kept out of the serialized record so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl<T: Scalar> InferenceResult<T> {
    pub fn mean_vector(&self) -> DVector<T> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn stddev_vector(&self) -> DVector<T> {
        DVector::from_column_slice(&self.stddev)
    }

    pub fn factor_matrix(&self) -> Option<DMatrix<T>> {
        let rows = self.factor.as_ref()?;
        let n = rows.len();
        Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn covariance(&self) -> Option<DMatrix<T>> {
        self.factor_matrix().map(|r| &r * r.transpose())
    }
}

pub(crate) fn matrix_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `sqrt(diag(R Rᵀ))`.
pub(crate) fn factor_stddev<T: Scalar>(r: &DMatrix<T>) -> Vec<T> {
    (0..r.nrows()).map(|i| r.row(i).norm()).collect()
}
