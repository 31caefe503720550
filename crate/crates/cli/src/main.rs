use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pde_invert::experiment::{run_experiment, ExperimentConfig, Goal, RunOptions, Stage, StageError};
use pde_invert::Error;

#[derive(Parser, Debug)]
#[command(name = "pde-invert", version, about = "Empirical-Bayes inversion of diffusion coefficients")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Draw the reference coefficient and noisy observations.
    Generate(Args),
    /// Generate, then fit the configured methods.
    Fit(Args),
    /// Fit and attach Monte Carlo ELBO estimates.
    Elbo(Args),
    /// Fit and compare against a MALA reference at the fixed hyperparameters.
    Compare(Args),
    /// Full pipeline; compares only if the config has a `reference` block.
    Run(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep hyperparameters fixed (reference values if configured).
    #[arg(long)]
    fix_theta: bool,
    /// Run only this method: laplace-em, dsvi or mcmc.
    #[arg(long)]
    method: Option<String>,
}

fn load(args: &Args) -> Result<ExperimentConfig, StageError> {
    let at = |source: Error| StageError {
        stage: Stage::Config,
        source,
    };
    let text = std::fs::read_to_string(&args.config).map_err(|e| at(e.into()))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| at(e.into()))?;
    if let Some(m) = &args.method {
        cfg.select_method(m).map_err(at)?;
    }
    if args.fix_theta {
        cfg.fix_theta();
    }
    cfg.validate().map_err(at)?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("PDE_INVERT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("PDE_INVERT_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("PDE_INVERT_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let (goal, args) = match &cli.verb {
        Verb::Generate(a) => (Goal::Generate, a),
        Verb::Fit(a) => (Goal::Fit, a),
        Verb::Elbo(a) => (Goal::Elbo, a),
        Verb::Compare(a) => (Goal::Compare, a),
        Verb::Run(a) => (Goal::Run, a),
    };
    let result = load(args).and_then(|cfg| {
        let opts = RunOptions {
            goal,
            seed: args.seed,
            out: args.out.clone(),
        };
        run_experiment(&cfg, &opts)
    });
    match result {
        Ok(outcome) => {
            for r in &outcome.results {
                let label = pde_invert::experiment::result_label(r);
                match r.elbo {
                    Some(e) => println!(
                        "{label}: sigma {:.4} lambda {:.4} elbo {:.3} ± {:.3}",
                        r.theta_hat.sigma, r.theta_hat.lambda, e.value, e.stderr
                    ),
                    None => println!("{label}: sigma {:.4} lambda {:.4}", r.theta_hat.sigma, r.theta_hat.lambda),
                }
            }
            for (label, c) in &outcome.comparisons {
                println!(
                    "{label} vs reference: mean rel L2 {:.4}, stddev rel L2 {:.4}",
                    c.mean_rel_l2, c.stddev_rel_l2
                );
            }
            println!("artifacts in {}", outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.stage {
                Stage::Config => 2,
                _ => 1,
            })
        }
    }
}
