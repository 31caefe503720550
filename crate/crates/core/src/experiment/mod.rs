//! Synthetic experiments end to end: data generation, fitting, Monte Carlo
//! ELBO, comparison against an MCMC reference, and persisted artifacts.

mod config;
pub mod io;
mod metrics;
mod synthetic;

pub use config::{
    laplace_preconditioned_chain, DesignConfig, ExperimentConfig, MethodConfig, MethodList, NoiseConfig,
    PriorConfig, Problem, ReferenceConfig, SigmaLambda,
};
pub use metrics::{compare_posteriors, estimate_elbo_mc, Comparison, MAX_FAILURE_FRACTION};
pub use synthetic::{build_model, derive_seed, generate_synthetic, stream_rng, Dataset, Stream, MAX_REDRAWS};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::dsvi::run_dsvi;
use crate::error::{Error, Result};
use crate::instrument;
use crate::laplace_em::run_laplace_em;
use crate::mcmc::{run_mala, ChainResult};
use crate::physics::PhysicsModel;
use crate::result::InferenceResult;

/// Pipeline stage, used to tag failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Generate,
    Fit,
    Elbo,
    Compare,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Fit => "fit",
            Stage::Elbo => "elbo",
            Stage::Compare => "compare",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// How far the pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Goal {
    Generate,
    Fit,
    Elbo,
    Compare,
    /// Everything; the comparison only if the config asks for a reference.
    Run,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub goal: Goal,
    /// Overrides the configured master seed.
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    pub out: Option<PathBuf>,
}

/// In-memory products of a pipeline run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dataset: Dataset,
    pub results: Vec<InferenceResult<f64>>,
    pub chain: Option<ChainResult<f64>>,
    pub reference: Option<InferenceResult<f64>>,
    pub comparisons: Vec<(String, Comparison)>,
    pub out_dir: PathBuf,
}

/// Short identifier used in file names and scatter rows.
pub fn result_label(r: &InferenceResult<f64>) -> String {
    match &r.variant {
        Some(v) => format!("{}-{}", r.method.tag(), v.replace(':', "-")),
        None => r.method.tag().to_string(),
    }
}

/// Fit every configured method; DSVI contributes one result per variant.
pub fn fit_methods(
    cfg: &ExperimentConfig,
    model: &dyn PhysicsModel<f64>,
    data: &Dataset,
    seed: u64,
) -> Result<(Vec<InferenceResult<f64>>, Option<ChainResult<f64>>)> {
    let obs = &data.observations;
    let mut results = Vec::new();
    let mut chain = None;
    let mut run_index = 0u64;
    for method in cfg.method.as_slice() {
        match method {
            MethodConfig::LaplaceEm { controls } => {
                let theta0 = if controls.fix_theta { cfg.theta_fixed() } else { cfg.theta_init() };
                results.push(run_laplace_em(model, obs, &theta0, controls)?);
            }
            MethodConfig::Dsvi { variants, controls } => {
                let theta0 = if controls.fix_theta { cfg.theta_fixed() } else { cfg.theta_init() };
                for &param in variants {
                    let mut c = controls.clone();
                    c.seed = derive_seed(seed, Stream::Method, run_index);
                    run_index += 1;
                    let out = run_dsvi(model, obs, None, param, &theta0, &c)?;
                    results.push(out.to_result(Some(c.seed)));
                }
            }
            MethodConfig::Mcmc { chain: cc } => {
                let mut cc = cc.clone();
                cc.seed = derive_seed(seed, Stream::Chain, 0);
                let theta = cfg.theta_fixed();
                let start = Instant::now();
                let (res, counts) = instrument::measure(|| run_mala(model, obs, &theta, &cc));
                let res = res?;
                let mut r = res.to_result(theta, cc.seed, counts);
                r.wall_time_s = start.elapsed().as_secs_f64();
                results.push(r);
                chain = Some(res);
            }
        }
    }
    Ok((results, chain))
}

/// Attach a Monte Carlo ELBO to every result that has a covariance factor.
pub fn attach_elbo(
    cfg: &ExperimentConfig,
    model: &dyn PhysicsModel<f64>,
    data: &Dataset,
    results: &mut [InferenceResult<f64>],
    seed: u64,
) -> Result<()> {
    for (i, r) in results.iter_mut().enumerate() {
        let Some(factor) = r.factor_matrix() else { continue };
        let mut rng = stream_rng(seed, Stream::Elbo, i as u64);
        let e = estimate_elbo_mc(
            model,
            &data.observations,
            &r.mean_vector(),
            &factor,
            &r.theta_hat,
            cfg.elbo_samples,
            &mut rng,
        )?;
        r.elbo = Some(e);
    }
    Ok(())
}

/// MALA reference at the fixed hyperparameters.
pub fn reference_chain(
    cfg: &ExperimentConfig,
    model: &dyn PhysicsModel<f64>,
    data: &Dataset,
    seed: u64,
) -> Result<(InferenceResult<f64>, ChainResult<f64>)> {
    let mut cc = cfg.reference.clone().unwrap_or(ReferenceConfig {
        chain: laplace_preconditioned_chain(10_000, 2_000, 0),
    }).chain;
    cc.seed = derive_seed(seed, Stream::Chain, 1);
    let theta = cfg.theta_fixed();
    let start = Instant::now();
    let (res, counts) = instrument::measure(|| run_mala(model, &data.observations, &theta, &cc));
    let res = res?;
    let mut r = res.to_result(theta, cc.seed, counts);
    r.wall_time_s = start.elapsed().as_secs_f64();
    Ok((r, res))
}

#[derive(Serialize)]
struct Timing {
    stages: Vec<(Stage, f64)>,
    results: Vec<(String, f64)>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum ResultRecord<'a> {
    One(&'a InferenceResult<f64>),
    Many(&'a [InferenceResult<f64>]),
}

fn write_results(dir: &Path, data: &Dataset, results: &[InferenceResult<f64>], chain: Option<&ChainResult<f64>>) -> Result<()> {
    let record = match results {
        [one] => ResultRecord::One(one),
        many => ResultRecord::Many(many),
    };
    io::write_json(&dir.join("result.json"), &record)?;
    if let Some(first) = results.first() {
        io::write_y_estimate(&dir.join("y_estimate.csv"), data, first)?;
    }
    if results.len() > 1 {
        for r in results {
            io::write_y_estimate(&dir.join(format!("y_estimate_{}.csv", result_label(r))), data, r)?;
        }
    }
    if let Some(c) = chain {
        let mut buf = Vec::new();
        c.write_csv(&mut buf)?;
        io::write_atomic(&dir.join("chain.csv"), &buf)?;
    }
    Ok(())
}

/// Execute the pipeline up to `opts.goal`, writing artifacts as each stage
/// completes. A failure leaves earlier artifacts in place together with a
/// `FAILED` marker naming the stage.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> std::result::Result<ExperimentOutcome, StageError> {
    cfg.validate().at(Stage::Config)?;
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(Error::from).at(Stage::Write)?;
    let marker = dir.join(io::FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(Error::from).at(Stage::Write)?;
    }
    let outcome = pipeline(cfg, opts, &dir);
    if let Err(e) = &outcome {
        let _ = io::write_atomic(&marker, format!("{e}\n").as_bytes());
    }
    outcome
}

fn pipeline(cfg: &ExperimentConfig, opts: &RunOptions, dir: &Path) -> std::result::Result<ExperimentOutcome, StageError> {
    let seed = opts.seed.unwrap_or(cfg.seed);
    let mut stages = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |stage: Stage, stages: &mut Vec<(Stage, f64)>| {
        stages.push((stage, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let model = build_model(cfg).at(Stage::Generate)?;
    let data = generate_synthetic(cfg, model.as_ref(), seed).at(Stage::Generate)?;
    io::write_json(&dir.join("dataset.json"), &data).at(Stage::Write)?;
    io::write_observations(&dir.join("observations.csv"), &data).at(Stage::Write)?;
    lap(Stage::Generate, &mut stages);

    let mut outcome = ExperimentOutcome {
        dataset: data,
        results: Vec::new(),
        chain: None,
        reference: None,
        comparisons: Vec::new(),
        out_dir: dir.to_path_buf(),
    };
    if opts.goal > Goal::Generate {
        let (results, chain) = fit_methods(cfg, model.as_ref(), &outcome.dataset, seed).at(Stage::Fit)?;
        outcome.results = results;
        outcome.chain = chain;
        write_results(dir, &outcome.dataset, &outcome.results, outcome.chain.as_ref()).at(Stage::Write)?;
        lap(Stage::Fit, &mut stages);
    }
    if opts.goal >= Goal::Elbo && opts.goal != Goal::Compare {
        attach_elbo(cfg, model.as_ref(), &outcome.dataset, &mut outcome.results, seed).at(Stage::Elbo)?;
        write_results(dir, &outcome.dataset, &outcome.results, None).at(Stage::Write)?;
        io::write_elbo_table(&dir.join("elbo.csv"), &outcome.results).at(Stage::Write)?;
        lap(Stage::Elbo, &mut stages);
    }
    let want_compare = opts.goal == Goal::Compare || (opts.goal == Goal::Run && cfg.reference.is_some());
    if want_compare {
        let (reference, ref_chain) = reference_chain(cfg, model.as_ref(), &outcome.dataset, seed).at(Stage::Compare)?;
        for r in &outcome.results {
            let c = compare_posteriors(&reference, r).at(Stage::Compare)?;
            outcome.comparisons.push((result_label(r), c));
        }
        io::write_json(&dir.join("reference.json"), &reference).at(Stage::Write)?;
        let mut buf = Vec::new();
        ref_chain.write_csv(&mut buf).at(Stage::Write)?;
        io::write_atomic(&dir.join("reference_chain.csv"), &buf).at(Stage::Write)?;
        let metrics: Vec<_> = outcome
            .comparisons
            .iter()
            .map(|(l, c)| {
                serde_json::json!({
                    "label": l,
                    "mean_rel_l2": c.mean_rel_l2,
                    "stddev_rel_l2": c.stddev_rel_l2,
                    "mean_max_abs": c.mean_max_abs,
                    "stddev_max_abs": c.stddev_max_abs,
                })
            })
            .collect();
        io::write_json(&dir.join("comparison.json"), &metrics).at(Stage::Write)?;
        io::write_scatter(&dir.join("scatter_mean.csv"), &outcome.comparisons, false).at(Stage::Write)?;
        io::write_scatter(&dir.join("scatter_stddev.csv"), &outcome.comparisons, true).at(Stage::Write)?;
        outcome.reference = Some(reference);
        lap(Stage::Compare, &mut stages);
    }

    let timing = Timing {
        stages,
        results: outcome
            .results
            .iter()
            .map(|r| (result_label(r), r.wall_time_s))
            .chain(outcome.reference.iter().map(|r| ("reference".to_string(), r.wall_time_s)))
            .collect(),
    };
    io::write_json(&dir.join("timing.json"), &timing).at(Stage::Write)?;
    Ok(outcome)
}
