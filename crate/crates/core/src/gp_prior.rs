//! Squared-exponential Gaussian-process prior over the discretized coefficient
//! field: covariance assembly, hyperparameter derivatives, jittered Cholesky,
//! prior sampling and quadratic-form / log-determinant evaluation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::instrument;
use crate::scalar::Scalar;

/// Relative jitter levels tried in order, as multiples of the mean diagonal.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Prior hyperparameters `(sigma, lambda)` plus the fixed nugget `sigma_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHyperparams<T> {
    pub sigma: T,
    pub lambda: T,
    pub sigma_n: T,
}

/// Which optimized hyperparameter a derivative refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperParam {
    Sigma,
    Lambda,
}

impl HyperParam {
    pub const ALL: [HyperParam; 2] = [HyperParam::Sigma, HyperParam::Lambda];
}

impl<T: Scalar> GpHyperparams<T> {
    pub fn new(sigma: T, lambda: T, sigma_n: T) -> Result<Self> {
        let theta = GpHyperparams {
            sigma,
            lambda,
            sigma_n,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma", self.sigma),
            ("lambda", self.lambda),
            ("sigma_n", self.sigma_n),
        ] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(Error::InvalidHyperparameter(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Build from `(log sigma, log lambda)`; positivity is structural.
    pub fn from_log(log_params: [T; 2], sigma_n: T) -> Result<Self> {
        Self::new(log_params[0].exp(), log_params[1].exp(), sigma_n)
    }

    pub fn log_params(&self) -> [T; 2] {
        [self.sigma.ln(), self.lambda.ln()]
    }

    pub fn get(&self, which: HyperParam) -> T {
        match which {
            HyperParam::Sigma => self.sigma,
            HyperParam::Lambda => self.lambda,
        }
    }

    pub fn cast<U: Scalar>(&self) -> GpHyperparams<U> {
        GpHyperparams {
            sigma: U::lit(self.sigma.to_f64_lossy()),
            lambda: U::lit(self.lambda.to_f64_lossy()),
            sigma_n: U::lit(self.sigma_n.to_f64_lossy()),
        }
    }
}

/// Strictly increasing coordinates at which the coefficient field is discretized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>")]
pub struct CoordinateSet<T: Scalar> {
    points: Vec<T>,
}

impl<T: Scalar> CoordinateSet<T> {
    pub fn new(points: Vec<T>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "coordinate set needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("coordinate set"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "coordinates must be strictly increasing".into(),
            ));
        }
        Ok(CoordinateSet { points })
    }

    /// `n` equispaced points from `lo` to `hi` inclusive.
    pub fn linspace(lo: T, hi: T, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("linspace needs n >= 2".into()));
        }
        let step = (hi - lo) / T::lit((n - 1) as f64);
        let mut pts: Vec<T> = (0..n).map(|i| lo + step * T::lit(i as f64)).collect();
        pts[n - 1] = hi;
        Self::new(pts)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.points
    }

    pub fn span(&self) -> T {
        self.points[self.points.len() - 1] - self.points[0]
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for CoordinateSet<T> {
    type Error = Error;
    fn try_from(v: Vec<T>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T: Scalar> From<CoordinateSet<T>> for Vec<T> {
    fn from(c: CoordinateSet<T>) -> Vec<T> {
        c.points
    }
}

/// Symmetric positive-definite matrix with its (possibly jittered) Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix<T: Scalar> {
    matrix: DMatrix<T>,
    factor: DMatrix<T>,
    log_det: T,
    jitter: T,
}

/// Lower Cholesky factor of `matrix + jitter * I`, escalating the jitter along
/// [`JITTER_LADDER`] (relative to the mean diagonal). Returns the factor and
/// the absolute jitter that was applied.
pub fn cholesky<T: Scalar>(matrix: &DMatrix<T>) -> Result<(DMatrix<T>, T)> {
    let n = matrix.nrows();
    check_dim("cholesky (square)", n, matrix.ncols())?;
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cholesky input"));
    }
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), T::zero()));
    }
    let mean_diag = matrix.diagonal().sum() / T::lit(n as f64);
    let scale = mean_diag.abs();
    let mut tried = Vec::with_capacity(JITTER_LADDER.len());
    for rel in JITTER_LADDER {
        let jitter = scale * T::lit(rel);
        tried.push(jitter.to_f64_lossy());
        let mut m = matrix.clone();
        if rel > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(ch) = m.cholesky() {
            let l = ch.unpack();
            if l.diagonal().iter().all(|d| d.is_finite() && *d > T::zero()) {
                return Ok((l, jitter));
            }
        }
    }
    Err(Error::NotPositiveDefinite { ladder: tried })
}

impl<T: Scalar> SpdMatrix<T> {
    /// Factorize a symmetric matrix. Asymmetry beyond 1e-10 relative is an error.
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        let n = matrix.nrows();
        check_dim("SpdMatrix (square)", n, matrix.ncols())?;
        let scale = matrix.amax();
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > T::tol(1e-10) * scale {
            return Err(Error::InvalidInput(format!(
                "matrix is not symmetric (max asymmetry {asym})"
            )));
        }
        let (factor, jitter) = cholesky(&matrix)?;
        let log_det = factor
            .diagonal()
            .iter()
            .fold(T::zero(), |acc, d| acc + d.ln())
            * T::lit(2.0);
        Ok(SpdMatrix {
            matrix,
            factor,
            log_det,
            jitter,
        })
    }

    /// Build from an existing lower-triangular factor `L`, representing `L Lᵀ`.
    pub fn from_factor(factor: DMatrix<T>) -> Result<Self> {
        let n = factor.nrows();
        check_dim("SpdMatrix::from_factor", n, factor.ncols())?;
        if factor.diagonal().iter().any(|d| !(*d > T::zero())) {
            return Err(Error::InvalidInput(
                "factor must have a positive diagonal".into(),
            ));
        }
        let factor = factor.lower_triangle();
        let matrix = &factor * factor.transpose();
        let log_det = factor
            .diagonal()
            .iter()
            .fold(T::zero(), |acc, d| acc + d.ln())
            * T::lit(2.0);
        Ok(SpdMatrix {
            matrix,
            factor,
            log_det,
            jitter: T::zero(),
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// Lower-triangular Cholesky factor.
    pub fn factor(&self) -> &DMatrix<T> {
        &self.factor
    }

    /// Log-determinant of the factorized (jittered) matrix.
    pub fn log_det(&self) -> T {
        self.log_det
    }

    /// Absolute diagonal jitter that was needed for the factorization.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<T>) -> DVector<T> {
        self.factor
            .solve_lower_triangular(b)
            .expect("positive Cholesky diagonal")
    }

    /// `C⁻¹ b` via two triangular solves.
    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        let w = self.solve_lower(b);
        self.factor
            .tr_solve_lower_triangular(&w)
            .expect("positive Cholesky diagonal")
    }

    /// `C⁻¹ B` for a matrix right-hand side.
    pub fn solve_matrix(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let w = self
            .factor
            .solve_lower_triangular(b)
            .expect("positive Cholesky diagonal");
        self.factor
            .tr_solve_lower_triangular(&w)
            .expect("positive Cholesky diagonal")
    }

    /// `L⁻¹ B`.
    pub fn solve_lower_matrix(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.factor
            .solve_lower_triangular(b)
            .expect("positive Cholesky diagonal")
    }

    /// Explicit inverse, symmetrized.
    pub fn inverse(&self) -> DMatrix<T> {
        let n = self.dim();
        let inv = self.solve_matrix(&DMatrix::identity(n, n));
        (&inv + inv.transpose()) * T::lit(0.5)
    }

    /// `(yᵀ C⁻¹ y, log det C)`.
    pub fn quad_logdet(&self, y: &DVector<T>) -> Result<(T, T)> {
        check_dim("prior_quad_logdet", self.dim(), y.len())?;
        let w = self.solve_lower(y);
        Ok((w.norm_squared(), self.log_det))
    }
}

/// Squared-exponential covariance between two coordinates, without nugget.
#[inline]
fn se<T: Scalar>(a: T, b: T, theta: &GpHyperparams<T>) -> T {
    let d = a - b;
    theta.sigma * theta.sigma * (-(d * d) / (T::lit(2.0) * theta.lambda * theta.lambda)).exp()
}

/// Dense kernel entries `σ² exp(−(ξᵢ−ξⱼ)²/2λ²) + σ_n² 1{i=j}` without factorization.
pub fn kernel_entries<T: Scalar>(xi: &CoordinateSet<T>, theta: &GpHyperparams<T>) -> Result<DMatrix<T>> {
    theta.validate()?;
    let x = xi.as_slice();
    let n = x.len();
    let mut c = DMatrix::zeros(n, n);
    let nugget = theta.sigma_n * theta.sigma_n;
    for i in 0..n {
        c[(i, i)] = theta.sigma * theta.sigma + nugget;
        for j in (i + 1)..n {
            let v = se(x[i], x[j], theta);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidHyperparameter(
            "kernel matrix has non-finite entries".into(),
        ));
    }
    Ok(c)
}

/// Prior covariance `C_p(θ)` with its Cholesky factor.
pub fn kernel_matrix<T: Scalar>(xi: &CoordinateSet<T>, theta: &GpHyperparams<T>) -> Result<SpdMatrix<T>> {
    let c = kernel_entries(xi, theta)?;
    instrument::prior_factorization();
    SpdMatrix::new(c)
}

/// Elementwise derivative `∂C_p/∂σ` or `∂C_p/∂λ` (the nugget is constant).
pub fn kernel_grad<T: Scalar>(
    xi: &CoordinateSet<T>,
    theta: &GpHyperparams<T>,
    which: HyperParam,
) -> Result<DMatrix<T>> {
    theta.validate()?;
    let x = xi.as_slice();
    let n = x.len();
    let two = T::lit(2.0);
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d = x[i] - x[j];
            let v = match which {
                HyperParam::Sigma => two * se(x[i], x[j], theta) / theta.sigma,
                HyperParam::Lambda => {
                    let l = theta.lambda;
                    se(x[i], x[j], theta) * d * d / (l * l * l)
                }
            };
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel gradient"));
    }
    Ok(g)
}

/// Draw `y = L z`, `z ~ N(0, I)`, from the zero-mean GP prior.
pub fn sample_prior<T: Scalar, R: Rng + ?Sized>(
    theta: &GpHyperparams<T>,
    xi: &CoordinateSet<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    let c = kernel_matrix(xi, theta)?;
    let z = standard_normal_vector(xi.len(), rng);
    Ok(c.factor() * z)
}

/// `(yᵀC⁻¹y, log det C)` through the cached factor.
pub fn prior_quad_logdet<T: Scalar>(c: &SpdMatrix<T>, y: &DVector<T>) -> Result<(T, T)> {
    c.quad_logdet(y)
}

/// Vector of i.i.d. standard normals, drawn in `f64` and converted.
pub fn standard_normal_vector<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<T> {
    DVector::from_iterator(
        n,
        (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))),
    )
}

/// `KL(N(μ, RRᵀ) ‖ N(0, C))` for a lower-triangular factor `R` with nonzero
/// diagonal.
pub fn kl_to_prior<T: Scalar>(c: &SpdMatrix<T>, mu: &DVector<T>, r: &DMatrix<T>) -> Result<T> {
    let n = c.dim();
    check_dim("KL mean", n, mu.len())?;
    check_dim("KL factor rows", n, r.nrows())?;
    check_dim("KL factor columns", n, r.ncols())?;
    let trace = c.solve_lower_matrix(r).norm_squared();
    let (quad, log_det_c) = c.quad_logdet(mu)?;
    let log_det_q = r
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, d| acc + d.abs().ln())
        * T::lit(2.0);
    let kl = (trace + quad - T::lit(n as f64) + log_det_c - log_det_q) * T::lit(0.5);
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL divergence"));
    }
    Ok(kl)
}

/// A GP prior bound to a coordinate set and hyperparameters, holding `C_p(θ)`
/// and its factorization. Building one counts as one prior factorization.
#[derive(Debug, Clone)]
pub struct GpPrior<T: Scalar> {
    pub xi: CoordinateSet<T>,
    pub theta: GpHyperparams<T>,
    pub cov: SpdMatrix<T>,
}

impl<T: Scalar> GpPrior<T> {
    pub fn new(xi: &CoordinateSet<T>, theta: GpHyperparams<T>) -> Result<Self> {
        let cov = kernel_matrix(xi, &theta)?;
        Ok(GpPrior {
            xi: xi.clone(),
            theta,
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn kernel_grad(&self, which: HyperParam) -> Result<DMatrix<T>> {
        kernel_grad(&self.xi, &self.theta, which)
    }

    /// `log N(y | 0, C_p)`.
    pub fn log_density(&self, y: &DVector<T>) -> Result<T> {
        let (q, ld) = self.cov.quad_logdet(y)?;
        let n = T::lit(self.dim() as f64);
        Ok(-(q + ld + n * T::two_pi().ln()) * T::lit(0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta(s: f64, l: f64, n: f64) -> GpHyperparams<f64> {
        GpHyperparams::new(s, l, n).unwrap()
    }

    #[test]
    fn diagonal_is_signal_plus_nugget() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 7).unwrap();
        let c = kernel_entries(&xi, &theta(1.3, 0.2, 0.1)).unwrap();
        for i in 0..7 {
            assert!((c[(i, i)] - (1.69 + 0.01)).abs() < 1e-14);
        }
        assert_eq!(c, c.transpose());
    }

    #[test]
    fn off_diagonal_at_one_length_scale() {
        let xi = CoordinateSet::new(vec![0.0, 0.15]).unwrap();
        let c = kernel_entries(&xi, &theta(1.0, 0.15, 1e-2)).unwrap();
        assert!((c[(0, 1)] - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn long_length_scale_is_constant() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 11).unwrap();
        let c = kernel_entries(&xi, &theta(0.7, 1e8, 1e-2)).unwrap();
        for i in 0..11 {
            for j in 0..11 {
                if i != j {
                    assert!((c[(i, j)] - 0.49).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn kernel_grad_trivial_entries() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 5).unwrap();
        let t = theta(1.7, 0.3, 1e-2);
        let gs = kernel_grad(&xi, &t, HyperParam::Sigma).unwrap();
        let gl = kernel_grad(&xi, &t, HyperParam::Lambda).unwrap();
        for i in 0..5 {
            assert!((gs[(i, i)] - 3.4).abs() < 1e-14);
            assert_eq!(gl[(i, i)], 0.0);
        }
    }

    #[test]
    fn hand_cholesky() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0f64, 2.0, 2.0, 3.0]);
        let s = SpdMatrix::new(m).unwrap();
        let l = s.factor();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert_eq!(s.jitter(), 0.0);
    }

    #[test]
    fn identity_cholesky() {
        let s = SpdMatrix::new(DMatrix::<f64>::identity(4, 4)).unwrap();
        assert_eq!(s.factor(), &DMatrix::identity(4, 4));
        assert_eq!(s.log_det(), 0.0);
    }

    #[test]
    fn ladder_on_fifty_point_kernel() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 50).unwrap();
        let c = kernel_matrix(&xi, &theta(1.0, 0.15, 1e-2)).unwrap();
        let mean_diag = c.matrix().diagonal().mean();
        assert!(c.jitter() <= 1e-8 * mean_diag);
        let recon = c.factor() * c.factor().transpose();
        let err = (recon - c.matrix()).norm() / c.matrix().norm();
        assert!(err <= 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn singular_matrix_needs_jitter_and_indefinite_fails() {
        let ones = DMatrix::from_element(3, 3, 1.0);
        let s = SpdMatrix::new(ones).unwrap();
        assert!(s.jitter() > 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match SpdMatrix::new(bad) {
            Err(Error::NotPositiveDefinite { ladder }) => assert_eq!(ladder.len(), 4),
            other => panic!("expected non-SPD error, got {other:?}"),
        }
    }

    #[test]
    fn quad_logdet_cases() {
        let id = SpdMatrix::new(DMatrix::<f64>::identity(2, 2)).unwrap();
        let (q, ld) = id.quad_logdet(&DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert!((q - 25.0).abs() < 1e-14 && ld.abs() < 1e-15);

        let d = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![4.0f64, 9.0]))).unwrap();
        let (q, ld) = d.quad_logdet(&DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert!((q - 2.0).abs() < 1e-14);
        assert!((ld - 36f64.ln()).abs() < 1e-14);

        let (q, ld) = d.quad_logdet(&DVector::zeros(2)).unwrap();
        assert_eq!(q, 0.0);
        assert!((ld - 36f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sampling_is_deterministic_and_degenerate_prior_is_zero() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 10).unwrap();
        let t = theta(1.0, 0.2, 1e-2);
        let a = sample_prior(&t, &xi, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_prior(&t, &xi, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let tiny = theta(1e-12, 0.2, 1e-12);
        let y = sample_prior(&tiny, &xi, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(y.amax() <= 1e-10);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(GpHyperparams::new(-1.0, 0.1, 0.01).is_err());
        assert!(GpHyperparams::new(1.0, f64::NAN, 0.01).is_err());
        assert!(CoordinateSet::new(vec![0.0, 0.0, 1.0]).is_err());
        assert!(CoordinateSet::new(vec![0.0]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let xi = CoordinateSet::<f32>::linspace(0.0, 1.0, 8).unwrap();
        let t = GpHyperparams::new(1.0f32, 0.3, 0.1).unwrap();
        let c = kernel_matrix(&xi, &t).unwrap();
        let (q, _) = c.quad_logdet(&DVector::from_element(8, 1.0)).unwrap();
        assert!(q.is_finite() && q > 0.0);
    }

    #[test]
    fn kl_to_prior_hand_values() {
        let xi = CoordinateSet::new(vec![0.0, 1.0]).unwrap();
        let c = kernel_matrix(&xi, &theta(1.0, 0.3, 0.2)).unwrap();
        let r = c.factor().clone();
        assert!(kl_to_prior(&c, &DVector::zeros(2), &r).unwrap().abs() < 1e-12);
        // Sign of the factor diagonal does not matter.
        let flipped = -r.clone();
        assert!(kl_to_prior(&c, &DVector::zeros(2), &flipped).unwrap().abs() < 1e-12);
        let unit = SpdMatrix::new(DMatrix::<f64>::identity(2, 2)).unwrap();
        let mu = DVector::from_vec(vec![2.0, 0.0]);
        let v = kl_to_prior(&unit, &mu, &DMatrix::identity(2, 2)).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn monte_carlo_moments_match_kernel() {
        let xi = CoordinateSet::linspace(0.0, 1.0, 5).unwrap();
        let t = theta(1.0, 0.3, 0.1);
        let c = kernel_entries(&xi, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mut mean = DVector::<f64>::zeros(5);
        let mut second = DMatrix::<f64>::zeros(5, 5);
        let prior = kernel_matrix(&xi, &t).unwrap();
        for _ in 0..n {
            let y = prior.factor() * standard_normal_vector::<f64, _>(5, &mut rng);
            mean += &y;
            second.ger(1.0, &y, &y, 1.0);
        }
        mean /= n as f64;
        second /= n as f64;
        for i in 0..5 {
            // Standard error of a mean is sqrt(C_ii / n).
            assert!(mean[i].abs() < 5.0 * (c[(i, i)] / n as f64).sqrt());
            for j in 0..5 {
                let se = ((c[(i, i)] * c[(j, j)] + c[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((second[(i, j)] - c[(i, j)]).abs() < 5.0 * se);
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(20))]
        #[test]
        fn kernel_grad_matches_finite_differences(
            s in 0.2f64..3.0,
            l in 0.05f64..1.0,
            n in 2usize..9,
        ) {
            let xi = CoordinateSet::linspace(0.0, 1.0, n).unwrap();
            let t = theta(s, l, 1e-2);
            for which in HyperParam::ALL {
                let g = kernel_grad(&xi, &t, which).unwrap();
                let h = 1e-6 * t.get(which);
                let (mut tp, mut tn) = (t, t);
                match which {
                    HyperParam::Sigma => { tp.sigma += h; tn.sigma -= h; }
                    HyperParam::Lambda => { tp.lambda += h; tn.lambda -= h; }
                }
                let fd = (kernel_entries(&xi, &tp).unwrap() - kernel_entries(&xi, &tn).unwrap()) / (2.0 * h);
                let err = (&g - &fd).norm() / fd.norm().max(1e-12);
                proptest::prop_assert!(err < 1e-6 || (&g - &fd).amax() < 1e-9, "rel err {err}");
            }
        }
    }
}
