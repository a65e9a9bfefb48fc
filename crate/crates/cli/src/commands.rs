use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use rkb_core::decomposition::{CorrectionKernel, DecompositionTable, Kernel};
use rkb_core::export::{self, EnsembleWriter};
use rkb_core::minimax::{midpoint_convex, MinimaxProblem, PolicyClass, SaddleReport, SearchOptions};
use rkb_core::{
    mse_monte_carlo, simulate_path, solve_error_stats, solve_riccati, DriftPolicy, FilterEngine, McEstimate,
    ValidatedModel,
};

use crate::{policy_arg, Context};

/// Paths simulated per batch when streaming an ensemble to disk.
const BATCH: usize = 64;

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of paths (default: `run.paths`, else 10).
    #[arg(long)]
    pub paths: Option<usize>,
    /// Signal drift: a constant (`0.5`, `1,-1`) or a CSV with `theta_*` columns.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
}

#[derive(Debug, Args)]
pub struct RiccatiArgs {
    /// True drift for the error statistics (default: `run.theta`).
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    /// Filter drift for the error statistics (default: `run.theta_hat`).
    #[arg(long, allow_hyphen_values = true)]
    pub theta_hat: Option<String>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Observation CSV: `m_*` levels (e.g. `simulate` output) or `dm_*` increments.
    #[arg(long)]
    pub obs: PathBuf,
    /// Path to filter when the file holds an ensemble.
    #[arg(long, default_value_t = 0)]
    pub path_id: usize,
    /// Filter drift (default: `run.theta_hat`); the classical filter when neither is set.
    #[arg(long, allow_hyphen_values = true)]
    pub theta_hat: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Drift used by the adjusted filter and the correction (default: `run.theta`, else μ).
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    /// Observation CSV; without it one path is simulated under `--theta`.
    #[arg(long)]
    pub obs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub path_id: usize,
}

#[derive(Debug, Args)]
pub struct MinimaxArgs {
    /// Evaluation time (default: first of `run.t`, else min(1, T)).
    #[arg(long)]
    pub t: Option<f64>,
    /// Adversary class: constant | piecewise:N | bang_bang.
    #[arg(long)]
    pub class: Option<PolicyClass>,
    /// Estimator class: constant | piecewise:N.
    #[arg(long)]
    pub estimator_class: Option<PolicyClass>,
    /// Search grid step as a fraction of μ.
    #[arg(long)]
    pub grid_resolution: Option<f64>,
    /// Golden-section tolerance as a fraction of μ.
    #[arg(long, default_value_t = 1e-9)]
    pub golden_tol: f64,
    /// Monte Carlo paths for the cross-check of the reported values; 0 skips it.
    #[arg(long, default_value_t = 0)]
    pub paths: usize,
}

fn theta_or(ctx: &Context, arg: Option<&str>, fallback: Option<&rkb_core::config::PolicySpec>, n_steps: usize) -> Result<Option<DriftPolicy>> {
    let n = ctx.scenario.n();
    match (arg, fallback) {
        (Some(s), _) => Ok(Some(policy_arg(s, n_steps, n)?)),
        (None, Some(spec)) => Ok(Some(spec.resolve(n_steps, n)?)),
        (None, None) => Ok(None),
    }
}

pub fn simulate(ctx: &Context, args: &SimulateArgs) -> Result<()> {
    let model = ctx.scenario.simulation_model()?;
    let steps = model.n_steps();
    let theta = theta_or(ctx, args.theta.as_deref(), ctx.scenario.run.theta.as_ref(), steps)?
        .unwrap_or_else(|| DriftPolicy::zeros(steps, model.n()));
    let n_paths = args.paths.or(ctx.scenario.run.paths).unwrap_or(10);
    if n_paths == 0 {
        bail!("--paths must be at least 1");
    }
    let header = ctx.header();
    let mut out = EnsembleWriter::new(ctx.create("simulate.csv")?, Some(&header), model.n(), model.m())?;
    for start in (0..n_paths).step_by(BATCH) {
        let end = (start + BATCH).min(n_paths);
        let batch = (start..end)
            .into_par_iter()
            .map(|j| simulate_path(&model, &theta, ctx.seed, j as u64))
            .collect::<rkb_core::Result<Vec<_>>>()?;
        for (i, p) in batch.iter().enumerate() {
            out.write_path(start + i, p, model.grid())?;
        }
    }
    out.finish()?;
    println!("wrote {n_paths} paths to {}", ctx.out_path("simulate.csv").display());
    Ok(())
}

pub fn riccati(ctx: &Context, args: &RiccatiArgs) -> Result<()> {
    let model = ctx.scenario.model()?;
    let p = solve_riccati(&model)?;
    let header = ctx.header();
    export::write_riccati(ctx.create("riccati.csv")?, Some(&header), &p)?;
    println!("trace P(T) = {}", p.trace_at(model.n_steps()));

    let run = &ctx.scenario.run;
    if args.theta.is_some() || args.theta_hat.is_some() || run.theta.is_some() || run.theta_hat.is_some() {
        let steps = model.n_steps();
        let zero = || DriftPolicy::zeros(steps, model.n());
        let theta = theta_or(ctx, args.theta.as_deref(), run.theta.as_ref(), steps)?.unwrap_or_else(zero);
        let theta_hat = theta_or(ctx, args.theta_hat.as_deref(), run.theta_hat.as_ref(), steps)?.unwrap_or_else(zero);
        let stats = solve_error_stats(&model, &theta, &theta_hat, &p)?;
        export::write_error_stats(ctx.create("error_stats.csv")?, Some(&header), &stats)?;
        println!("mse(T) = {}", stats.mse[steps]);
    }
    Ok(())
}

fn read_obs(path: &PathBuf, model: &ValidatedModel, path_id: usize) -> Result<rkb_core::NodeSeries> {
    let f = fs::File::open(path).with_context(|| format!("cannot read observations {}", path.display()))?;
    export::read_observation_increments(f, model.n_steps(), model.m(), path_id)
        .with_context(|| format!("invalid observation file {}", path.display()))
}

pub fn filter(ctx: &Context, args: &FilterArgs) -> Result<()> {
    let model = ctx.scenario.model()?;
    let obs = read_obs(&args.obs, &model, args.path_id)?;
    let engine = FilterEngine::new(&model, Arc::new(solve_riccati(&model)?))?;
    let theta_hat = theta_or(ctx, args.theta_hat.as_deref(), ctx.scenario.run.theta_hat.as_ref(), model.n_steps())?;
    let run = match &theta_hat {
        Some(th) => engine.robust(th, &obs)?,
        None => engine.classical(&obs)?,
    };
    let header = ctx.header();
    export::write_filter(ctx.create("filter.csv")?, Some(&header), &run)?;
    println!("wrote {}", ctx.out_path("filter.csv").display());
    Ok(())
}

pub fn decompose(ctx: &Context, args: &DecomposeArgs) -> Result<()> {
    let model = ctx.scenario.model()?;
    let steps = model.n_steps();
    let theta = match theta_or(ctx, args.theta.as_deref(), ctx.scenario.run.theta.as_ref(), steps)? {
        Some(t) => t,
        None => DriftPolicy::constant(steps, ctx.scenario.bound.mu()),
    };
    let obs = match &args.obs {
        Some(p) => read_obs(p, &model, args.path_id)?,
        None => simulate_path(&model, &theta, ctx.seed, args.path_id as u64)?.observation_increments(),
    };
    let p = solve_riccati(&model)?;
    let engine = FilterEngine::new(&model, Arc::new(p.clone()))?;
    let kernel = CorrectionKernel::new(&model, &p)?;
    let table = DecompositionTable::build(&engine, &kernel, &theta, &obs)?;
    let header = ctx.header();
    export::write_decomposition(ctx.create("decompose.csv")?, Some(&header), &table, model.grid())?;
    println!(
        "sup gap: ode kernel {:.6e}, printed kernel {:.6e}",
        table.sup_gap(Kernel::Ode),
        table.sup_gap(Kernel::Printed)
    );
    Ok(())
}

/// Evaluation time from the flag, the scenario, or `min(1, T)`.
pub fn eval_time(ctx: &Context, flag: Option<f64>) -> f64 {
    flag.or_else(|| ctx.scenario.run.t.first().copied())
        .unwrap_or_else(|| ctx.scenario.grid.horizon().min(1.0))
}

#[derive(Debug, Serialize)]
pub struct MinimaxOutput {
    pub report: SaddleReport,
    pub profile_midpoint_convex: bool,
    pub monte_carlo: Option<MonteCarloCheck>,
}

#[derive(Debug, Serialize)]
pub struct MonteCarloCheck {
    pub paths: usize,
    pub upper: McEstimate,
    pub lower: McEstimate,
    pub upper_within_3se: bool,
    pub lower_within_3se: bool,
}

/// Points at which the robust-drift profile is reported.
pub const PROFILE_POINTS: usize = 11;

pub fn minimax(ctx: &Context, args: &MinimaxArgs) -> Result<()> {
    let model = ctx.scenario.model()?;
    let t = eval_time(ctx, args.t);
    let run = &ctx.scenario.run;
    let adversary = args.class.or(run.adversary_class).unwrap_or(PolicyClass::Constant);
    let estimator = args.estimator_class.or(run.estimator_class).unwrap_or(PolicyClass::Constant);
    let opts = SearchOptions {
        resolution: args.grid_resolution.or(run.grid_resolution).unwrap_or(0.01),
        golden_tol: args.golden_tol,
        ..Default::default()
    };
    let problem = MinimaxProblem::new(&model, ctx.scenario.bound.clone(), t)?;
    let report = problem.saddle_report(estimator, adversary, &opts)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }

    let mu0 = ctx.scenario.bound.mu()[0];
    let points: Vec<f64> = (0..PROFILE_POINTS)
        .map(|j| mu0 * (2.0 * j as f64 - (PROFILE_POINTS - 1) as f64) / (PROFILE_POINTS - 1) as f64)
        .collect();
    let profile = problem.profile(estimator, adversary, &report.theta_hat_params, 0, &points, &opts)?;
    let convex = midpoint_convex(&profile.iter().map(|p| p.1).collect::<Vec<_>>(), 1e-9);
    let header = ctx.header();
    let rows: Vec<Vec<f64>> = profile.iter().map(|&(x, g)| vec![x, g]).collect();
    export::write_profile(ctx.create("minimax_profile.csv")?, Some(&header), &["theta_hat_0", "g"], &rows)?;

    let monte_carlo = if args.paths > 0 {
        let upper = mse_monte_carlo(&model, &report.theta_star, &report.theta_hat_star, t, args.paths, ctx.seed)?;
        let lower = mse_monte_carlo(&model, &report.theta_star, &report.theta_star, t, args.paths, ctx.seed ^ 1)?;
        Some(MonteCarloCheck {
            paths: args.paths,
            upper_within_3se: upper.agrees_with(report.upper_value, 3.0),
            lower_within_3se: lower.agrees_with(report.lower_value, 3.0),
            upper,
            lower,
        })
    } else {
        None
    };
    println!(
        "t = {t}: upper {:.12} lower {:.12} gap {:.12}",
        report.upper_value, report.lower_value, report.duality_gap
    );
    ctx.write_json(
        "minimax.json",
        &MinimaxOutput {
            report,
            profile_midpoint_convex: convex,
            monte_carlo,
        },
    )
}
