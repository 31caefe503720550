use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dsvi::{DsviControls, FactorParameterization};
use crate::error::{Error, Result};
use crate::gp_prior::GpHyperparams;
use crate::laplace_em::LaplaceControls;
use crate::mcmc::{ChainConfig, Preconditioner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    /// `−(e^{y(x)} u')' = 0` on `[0, 1]`, coefficient indexed by space.
    Linear,
    /// `(k(u) u')' = 0`, `log k` indexed by state value on `[u_min, 0]`.
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaLambda {
    pub sigma: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_sigma_n")]
    pub sigma_n: f64,
    /// Generating hyperparameters; required for the linear problem.
    #[serde(default)]
    pub reference: Option<SigmaLambda>,
    /// Starting point of the hyperparameter search; `(1, span)` if absent.
    #[serde(default)]
    pub init: Option<SigmaLambda>,
}

fn default_sigma_n() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub n_u_obs: usize,
    /// Ignored for the nonlinear problem, which observes `y` at both ends.
    pub n_y_obs: usize,
    /// Seed for index selection, independent of the noise.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_us: f64,
    pub sigma_ys: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum MethodConfig {
    LaplaceEm {
        #[serde(default)]
        controls: LaplaceControls<f64>,
    },
    Dsvi {
        #[serde(default = "default_variants")]
        variants: Vec<FactorParameterization>,
        #[serde(default)]
        controls: DsviControls,
    },
    Mcmc {
        #[serde(default)]
        chain: ChainConfig,
    },
}

fn default_variants() -> Vec<FactorParameterization> {
    vec![FactorParameterization::FullRank]
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::LaplaceEm { .. } => "laplace-em",
            MethodConfig::Dsvi { .. } => "dsvi",
            MethodConfig::Mcmc { .. } => "mcmc",
        }
    }

    /// Default block for a method name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "laplace-em" => Ok(MethodConfig::LaplaceEm {
                controls: LaplaceControls::default(),
            }),
            "dsvi" => Ok(MethodConfig::Dsvi {
                variants: default_variants(),
                controls: DsviControls::default(),
            }),
            "mcmc" => Ok(MethodConfig::Mcmc {
                chain: ChainConfig::default(),
            }),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected laplace-em, dsvi or mcmc)"
            ))),
        }
    }

    fn set_fix_theta(&mut self) {
        match self {
            MethodConfig::LaplaceEm { controls } => controls.fix_theta = true,
            MethodConfig::Dsvi { controls, .. } => controls.fix_theta = true,
            MethodConfig::Mcmc { .. } => {}
        }
    }
}

/// One method block or a list of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodList {
    One(MethodConfig),
    Many(Vec<MethodConfig>),
}

impl MethodList {
    pub fn as_slice(&self) -> &[MethodConfig] {
        match self {
            MethodList::One(m) => std::slice::from_ref(m),
            MethodList::Many(v) => v,
        }
    }
}

/// MCMC reference run used by the comparison stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default)]
    pub chain: ChainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub m: usize,
    pub n: usize,
    pub u_left: f64,
    pub u_right: f64,
    #[serde(default)]
    pub u_min: Option<f64>,
    pub prior: PriorConfig,
    pub design: DesignConfig,
    pub noise: NoiseConfig,
    pub method: MethodList,
    /// Draws for the Monte Carlo ELBO estimate.
    #[serde(default = "default_elbo_samples")]
    pub elbo_samples: usize,
    #[serde(default)]
    pub reference: Option<ReferenceConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_elbo_samples() -> usize {
    10_000
}

impl ExperimentConfig {
    /// Linear diffusion defaults: `M = N = 50`, 10 state and 1 coefficient
    /// observation at noise `1e-3`, reference `θ = (1.0, 0.15)`.
    pub fn linear_default() -> Self {
        ExperimentConfig {
            problem: Problem::Linear,
            m: 50,
            n: 50,
            u_left: 1.0,
            u_right: 0.0,
            u_min: None,
            prior: PriorConfig {
                sigma_n: 1e-2,
                reference: Some(SigmaLambda {
                    sigma: 1.0,
                    lambda: 0.15,
                }),
                init: None,
            },
            design: DesignConfig {
                n_u_obs: 10,
                n_y_obs: 1,
                seed: 0,
            },
            noise: NoiseConfig {
                sigma_us: 1e-3,
                sigma_ys: 1e-3,
            },
            method: MethodList::One(MethodConfig::LaplaceEm {
                controls: LaplaceControls::default(),
            }),
            elbo_samples: default_elbo_samples(),
            reference: None,
            output_dir: None,
            seed: 0,
        }
    }

    /// Nonlinear diffusion defaults: `M = 50`, `N = 21`, boundary values
    /// `−2.0`/`−0.5`, `u_min = −2.5`, 5 state observations, noise `1e-2`.
    pub fn nonlinear_default() -> Self {
        ExperimentConfig {
            problem: Problem::Nonlinear,
            m: 50,
            n: 21,
            u_left: -2.0,
            u_right: -0.5,
            u_min: Some(-2.5),
            prior: PriorConfig {
                sigma_n: 1e-2,
                reference: None,
                init: None,
            },
            design: DesignConfig {
                n_u_obs: 5,
                n_y_obs: 2,
                seed: 0,
            },
            noise: NoiseConfig {
                sigma_us: 1e-2,
                sigma_ys: 1e-2,
            },
            method: MethodList::One(MethodConfig::LaplaceEm {
                controls: LaplaceControls::default(),
            }),
            elbo_samples: default_elbo_samples(),
            reference: None,
            output_dir: None,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m < 2 || self.n < 2 {
            return bad(format!("M = {} and N = {} must both be ≥ 2", self.m, self.n));
        }
        if self.design.n_u_obs > self.m {
            return bad(format!(
                "{} state observations requested but M = {}",
                self.design.n_u_obs, self.m
            ));
        }
        if self.design.n_y_obs > self.n {
            return bad(format!(
                "{} coefficient observations requested but N = {}",
                self.design.n_y_obs, self.n
            ));
        }
        if !(self.noise.sigma_us >= 0.0 && self.noise.sigma_ys >= 0.0) {
            return bad("noise scales must be ≥ 0".into());
        }
        if !(self.prior.sigma_n > 0.0) {
            return bad("sigma_n must be positive".into());
        }
        for sl in [self.prior.reference, self.prior.init].into_iter().flatten() {
            if !(sl.sigma > 0.0 && sl.lambda > 0.0) {
                return bad("sigma and lambda must be positive".into());
            }
        }
        if self.elbo_samples < 2 {
            return bad("elbo_samples must be ≥ 2".into());
        }
        match self.problem {
            Problem::Linear => {
                if self.prior.reference.is_none() {
                    return bad("the linear problem draws its reference from prior.reference".into());
                }
            }
            Problem::Nonlinear => {
                let Some(u_min) = self.u_min else {
                    return bad("the nonlinear problem needs u_min".into());
                };
                if !(u_min < self.u_left && self.u_left < self.u_right && self.u_right <= 0.0) {
                    return bad("need u_min < u_left < u_right ≤ 0".into());
                }
                if self.design.n_y_obs != 2 {
                    return bad("the nonlinear problem observes y at u_min and 0 (n_y_obs = 2)".into());
                }
            }
        }
        if self.method.as_slice().is_empty() {
            return bad("no method configured".into());
        }
        for m in self.method.as_slice() {
            match m {
                MethodConfig::Dsvi { variants, controls } => {
                    if variants.is_empty() {
                        return bad("dsvi needs at least one variant".into());
                    }
                    for v in variants {
                        v.validate(self.n)?;
                    }
                    if controls.batch_size == 0 {
                        return bad("dsvi batch_size must be ≥ 1".into());
                    }
                }
                MethodConfig::Mcmc { chain } => chain.validate()?,
                MethodConfig::LaplaceEm { .. } => {}
            }
        }
        if let Some(r) = &self.reference {
            r.chain.validate()?;
        }
        Ok(())
    }

    /// Width of the coefficient coordinate range.
    pub fn coefficient_span(&self) -> f64 {
        match self.problem {
            Problem::Linear => 1.0,
            Problem::Nonlinear => -self.u_min.unwrap_or(0.0),
        }
    }

    pub fn theta_reference(&self) -> Option<GpHyperparams<f64>> {
        self.prior.reference.map(|r| GpHyperparams {
            sigma: r.sigma,
            lambda: r.lambda,
            sigma_n: self.prior.sigma_n,
        })
    }

    /// Starting hyperparameters; `(1, span)` unless configured.
    pub fn theta_init(&self) -> GpHyperparams<f64> {
        let sl = self.prior.init.unwrap_or(SigmaLambda {
            sigma: 1.0,
            lambda: self.coefficient_span(),
        });
        GpHyperparams {
            sigma: sl.sigma,
            lambda: sl.lambda,
            sigma_n: self.prior.sigma_n,
        }
    }

    /// Hyperparameters held fixed under `fix_theta`: the reference if known.
    pub fn theta_fixed(&self) -> GpHyperparams<f64> {
        self.theta_reference().unwrap_or_else(|| self.theta_init())
    }

    /// Apply `--fix-theta`: disable hyperparameter updates everywhere.
    pub fn fix_theta(&mut self) {
        let mut methods = self.method.as_slice().to_vec();
        methods.iter_mut().for_each(MethodConfig::set_fix_theta);
        self.method = MethodList::Many(methods);
    }

    /// Apply `--method`: keep matching blocks or fall back to the default block.
    pub fn select_method(&mut self, name: &str) -> Result<()> {
        let kept: Vec<MethodConfig> = self
            .method
            .as_slice()
            .iter()
            .filter(|m| m.name() == name)
            .cloned()
            .collect();
        self.method = if kept.is_empty() {
            MethodList::One(MethodConfig::from_name(name)?)
        } else {
            MethodList::Many(kept)
        };
        Ok(())
    }

    pub fn fixes_theta(&self) -> bool {
        self.method.as_slice().iter().any(|m| match m {
            MethodConfig::LaplaceEm { controls } => controls.fix_theta,
            MethodConfig::Dsvi { controls, .. } => controls.fix_theta,
            MethodConfig::Mcmc { .. } => true,
        })
    }

    /// DSVI variants used by the table sweep.
    pub fn table_sweep(n: usize) -> Vec<FactorParameterization> {
        let mut v = vec![FactorParameterization::FullRank];
        for k in [20, 10, 5] {
            if k < n {
                v.push(FactorParameterization::Chevron(k));
            }
        }
        v.push(FactorParameterization::MeanField);
        v
    }
}

/// Shorthand for a chain configuration preconditioned by the Laplace posterior.
pub fn laplace_preconditioned_chain(n_samples: usize, n_burn: usize, seed: u64) -> ChainConfig {
    ChainConfig {
        n_samples,
        n_burn,
        seed,
        preconditioner: Preconditioner::Laplace,
        ..ChainConfig::default()
    }
}
