use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp_prior::SpdMatrix;
use crate::scalar::Scalar;

/// Smallest magnitude allowed on the factor diagonal.
pub const DIAGONAL_FLOOR: f64 = 1e-8;

/// Sparsity structure of the lower-triangular covariance factor `R_q`.
///
/// Parsed from and printed as `full`, `chevron:<k>` or `meanfield`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FactorParameterization {
    FullRank,
    /// Dense in the first `k` columns, diagonal elsewhere.
    Chevron(usize),
    /// Positive diagonal `exp(ω)`.
    MeanField,
}

impl FactorParameterization {
    pub fn validate(self, n: usize) -> Result<()> {
        match self {
            FactorParameterization::Chevron(k) if k == 0 || k >= n => Err(Error::InvalidInput(
                format!("chevron parameter {k} must satisfy 1 ≤ k < N = {n}"),
            )),
            _ if n == 0 => Err(Error::InvalidInput("empty parameter vector".into())),
            _ => Ok(()),
        }
    }

    /// Stored `(row, column)` entries of the factor, row-major. For the mean
    /// field these are the diagonal positions of `ω`.
    pub fn pattern(self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.packed_len(n));
        for i in 0..n {
            for j in 0..=i {
                let keep = match self {
                    FactorParameterization::FullRank => true,
                    FactorParameterization::Chevron(k) => j < k || i == j,
                    FactorParameterization::MeanField => i == j,
                };
                if keep {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Length of the packed factor vector.
    pub fn packed_len(self, n: usize) -> usize {
        match self {
            FactorParameterization::FullRank => n * (n + 1) / 2,
            FactorParameterization::Chevron(k) => (2 * n - k) * (k + 1) / 2,
            FactorParameterization::MeanField => n,
        }
    }

    /// Total variational parameter count including the mean.
    pub fn param_count(self, n: usize) -> usize {
        n + self.packed_len(n)
    }
}

impl fmt::Display for FactorParameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorParameterization::FullRank => write!(f, "full"),
            FactorParameterization::Chevron(k) => write!(f, "chevron:{k}"),
            FactorParameterization::MeanField => write!(f, "meanfield"),
        }
    }
}

impl FromStr for FactorParameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "full" | "fullrank" | "full-rank" => Ok(FactorParameterization::FullRank),
            "meanfield" | "mean-field" => Ok(FactorParameterization::MeanField),
            other => {
                let k = other
                    .strip_prefix("chevron:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown factor parameterization {s:?}")))?;
                Ok(FactorParameterization::Chevron(k))
            }
        }
    }
}

impl TryFrom<String> for FactorParameterization {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FactorParameterization> for String {
    fn from(p: FactorParameterization) -> String {
        p.to_string()
    }
}

/// `q(y) = N(mu_q, R_q R_qᵀ)` with `R_q` stored in packed form.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalGaussian<T: Scalar> {
    pub mu_q: DVector<T>,
    pub packed_factor: DVector<T>,
}

pub(crate) fn floor_magnitude<T: Scalar>(d: T) -> T {
    let floor = T::lit(DIAGONAL_FLOOR);
    if d.abs() >= floor {
        d
    } else if d < T::zero() {
        -floor
    } else {
        floor
    }
}

impl<T: Scalar> VariationalGaussian<T> {
    /// `μ = 0`; factor `0.1·chol(C_p)` restricted to the pattern, or
    /// `ω = log(0.1·σ)` for the mean field.
    pub fn initial(prior: &SpdMatrix<T>, sigma: T, param: FactorParameterization) -> Result<Self> {
        let n = prior.dim();
        param.validate(n)?;
        let packed = match param {
            FactorParameterization::MeanField => {
                DVector::from_element(n, (T::lit(0.1) * sigma).ln())
            }
            _ => {
                let l = prior.factor();
                let pat = param.pattern(n);
                DVector::from_iterator(pat.len(), pat.iter().map(|&(i, j)| T::lit(0.1) * l[(i, j)]))
            }
        };
        let mut q = VariationalGaussian {
            mu_q: DVector::zeros(n),
            packed_factor: packed,
        };
        q.apply_floor(param);
        Ok(q)
    }

    pub fn dim(&self) -> usize {
        self.mu_q.len()
    }

    /// Keep factor diagonal magnitudes at or above [`DIAGONAL_FLOOR`].
    pub fn apply_floor(&mut self, param: FactorParameterization) {
        if param == FactorParameterization::MeanField {
            let lo = T::lit(DIAGONAL_FLOOR).ln();
            for w in self.packed_factor.iter_mut() {
                *w = w.max(lo);
            }
            return;
        }
        for (p, (i, j)) in param.pattern(self.dim()).into_iter().enumerate() {
            if i == j {
                self.packed_factor[p] = floor_magnitude(self.packed_factor[p]);
            }
        }
    }
}

/// Dense lower-triangular `R_q`.
pub fn materialize_factor<T: Scalar>(q: &VariationalGaussian<T>, param: FactorParameterization) -> Result<DMatrix<T>> {
    let n = q.dim();
    param.validate(n)?;
    check_dim("packed factor", param.packed_len(n), q.packed_factor.len())?;
    let mut r = DMatrix::zeros(n, n);
    if param == FactorParameterization::MeanField {
        for i in 0..n {
            r[(i, i)] = q.packed_factor[i].exp();
        }
        return Ok(r);
    }
    for (p, (i, j)) in param.pattern(n).into_iter().enumerate() {
        let v = q.packed_factor[p];
        r[(i, j)] = if i == j { floor_magnitude(v) } else { v };
    }
    Ok(r)
}

/// `log |det R_q|` of a materialized factor.
pub(crate) fn log_abs_det<T: Scalar>(r: &DMatrix<T>) -> T {
    r.diagonal().iter().fold(T::zero(), |acc, d| acc + d.abs().ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_lengths_match_pattern() {
        for n in 2..12 {
            for p in [
                FactorParameterization::FullRank,
                FactorParameterization::MeanField,
                FactorParameterization::Chevron(1),
                FactorParameterization::Chevron(n - 1),
            ] {
                assert_eq!(p.pattern(n).len(), p.packed_len(n), "{p} n={n}");
            }
        }
        assert_eq!(FactorParameterization::FullRank.param_count(50), 50 + 1275);
        assert_eq!(FactorParameterization::Chevron(20).param_count(50), 50 + 80 * 21 / 2);
        assert_eq!(FactorParameterization::MeanField.param_count(50), 100);
    }

    #[test]
    fn full_rank_row_major_packing() {
        let q = VariationalGaussian {
            mu_q: DVector::zeros(3),
            packed_factor: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        };
        let r = materialize_factor(&q, FactorParameterization::FullRank).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0]);
        assert_eq!(r, expect);
    }

    #[test]
    fn mean_field_zero_is_identity() {
        let q = VariationalGaussian {
            mu_q: DVector::<f64>::zeros(4),
            packed_factor: DVector::zeros(4),
        };
        let r = materialize_factor(&q, FactorParameterization::MeanField).unwrap();
        assert_eq!(r, DMatrix::identity(4, 4));
    }

    #[test]
    fn chevron_pattern_shape() {
        let p = FactorParameterization::Chevron(3);
        let n = 10;
        let q = VariationalGaussian {
            mu_q: DVector::<f64>::zeros(n),
            packed_factor: DVector::from_element(p.packed_len(n), 1.0),
        };
        let r = materialize_factor(&q, p).unwrap();
        for i in 0..n {
            for j in 0..n {
                let nonzero = j <= i && (j < 3 || i == j);
                assert_eq!(r[(i, j)] != 0.0, nonzero, "({i}, {j})");
            }
        }
    }

    #[test]
    fn chevron_bounds_and_parsing() {
        assert!(FactorParameterization::Chevron(0).validate(5).is_err());
        assert!(FactorParameterization::Chevron(5).validate(5).is_err());
        assert!(FactorParameterization::Chevron(4).validate(5).is_ok());
        for s in ["full", "chevron:20", "meanfield"] {
            let p: FactorParameterization = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("chevron:x".parse::<FactorParameterization>().is_err());
        let json = serde_json::to_string(&FactorParameterization::Chevron(5)).unwrap();
        assert_eq!(json, "\"chevron:5\"");
    }

    #[test]
    fn floor_preserves_sign() {
        assert_eq!(floor_magnitude(-1e-12), -DIAGONAL_FLOOR);
        assert_eq!(floor_magnitude(0.0), DIAGONAL_FLOOR);
        assert_eq!(floor_magnitude(-0.5), -0.5);
        let mut q = VariationalGaussian {
            mu_q: DVector::zeros(2),
            packed_factor: DVector::from_vec(vec![1e-20, 3.0, -1e-20]),
        };
        q.apply_floor(FactorParameterization::FullRank);
        assert_eq!(q.packed_factor.as_slice(), &[DIAGONAL_FLOOR, 3.0, -DIAGONAL_FLOOR]);
    }
}
