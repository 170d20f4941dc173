//! Monte Carlo consistency check of an exported surface pair.

use std::path::PathBuf;

use clap::Args;

use liqhjb::mc::{evaluate_policy_surface, CostMode, PathConfig};
use liqhjb::surface::read_surfaces;

use crate::args::CommonArgs;
use crate::manifest::RunManifest;
use crate::{CliError, CliResult, Status};

pub const MC_CHECK_SCHEMA: &str = "# schema: liqhjb-mc-check v1";

/// Discrepancy, in standard errors, beyond which the check fails.
pub const Z_LIMIT: f64 = 4.0;

#[derive(Debug, Args)]
pub struct McCheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `surfaces.csv` written by `solve`.
    #[arg(long, value_name = "PATH")]
    pub surface: PathBuf,
    #[arg(long, value_name = "N", default_value_t = 100_000)]
    pub paths: usize,
    /// `expected_approx` or `realized_exact`.
    #[arg(long, default_value = "expected_approx")]
    pub cost_mode: CostMode,
    /// Seed of the simulation noise.
    #[arg(long, default_value_t = 0)]
    pub mc_seed: u64,
    /// Euler steps per rebalancing interval.
    #[arg(long, default_value_t = 1)]
    pub substeps: usize,
    #[arg(long)]
    pub antithetic: bool,
    #[arg(long, default_value_t = 2.5)]
    pub w0: f64,
    #[arg(long, default_value_t = 0.6)]
    pub l0: f64,
}

pub fn run(args: &McCheckArgs) -> CliResult<Status> {
    let cfg = args.common.load_config()?;
    let (policy, value) = read_surfaces(&args.surface)
        .map_err(|e| CliError::Usage(format!("cannot read surface `{}`: {e}", args.surface.display())))?;
    if policy.axes.t[0] > 0.0 {
        return Err(CliError::Usage(format!(
            "surface `{}` starts at t = {}; the check needs t = 0",
            args.surface.display(),
            policy.axes.t[0]
        )));
    }
    let mc = PathConfig {
        n_paths: args.paths,
        substeps: args.substeps,
        seed: args.mc_seed,
        cost_mode: args.cost_mode,
        antithetic: args.antithetic,
        w0: args.w0,
        l0: args.l0,
        ..Default::default()
    };
    mc.validate(&cfg.params)?;

    let mut manifest = RunManifest::begin(&args.common.out, "mc-check", &cfg, &[args.mc_seed])?;
    manifest.set("surface", args.surface.display().to_string());
    manifest.set("paths", args.paths as i64);
    manifest.set("cost_mode", args.cost_mode.name());

    let stats = evaluate_policy_surface(&policy, &cfg.params, &cfg.utility, &mc)?;
    let q0 = value.interpolate([args.w0, args.l0, 0.0]);
    let z = (stats.mean_utility - q0) / stats.std_error;
    manifest.write("mc.csv", stats.to_csv().as_bytes())?;
    let report = format!(
        "{MC_CHECK_SCHEMA}\nn_paths,seed,cost_mode,w0,l0,mc_mean,std_error,solver_value,z\n{},{},{},{},{},{},{},{},{}\n",
        stats.n_paths,
        stats.seed,
        stats.cost_mode.name(),
        args.w0,
        args.l0,
        stats.mean_utility,
        stats.std_error,
        q0,
        z
    );
    manifest.write("mc_check.csv", report.as_bytes())?;
    println!(
        "n_paths {} seed {}: E[U(W_T)] = {:.6} ± {:.6}, Q({}, {}, 0) = {q0:.6}, {z:+.2} SE",
        stats.n_paths, stats.seed, stats.mean_utility, stats.std_error, args.w0, args.l0
    );
    if !(z.abs() <= Z_LIMIT) {
        manifest.finish(3)?;
        return Err(CliError::Validation(format!(
            "Monte Carlo mean differs from the solver value by {z:+.2} standard errors (limit {Z_LIMIT})"
        )));
    }
    manifest.finish(0)?;
    Ok(Status::Done)
}
