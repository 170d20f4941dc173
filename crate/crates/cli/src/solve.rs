use rayon::prelude::*;

use liqhjb::surface::{bands_to_csv, linspace, surfaces_to_csv, Band};
use liqhjb::{GridAxes, ModelParams, RunConfig, Solution, Solver, StopReason, TwoLayerNet};

use crate::args::{CommonArgs, SeedArgs};
use crate::manifest::{params_hash, RunManifest, RunSummary};
use crate::{CliResult, Status};

/// Export grid: the full training box in `W` and `L`, all of `[0, T]` in
/// `t`. With the default box the standard slice `W = 2.5` is a node.
pub fn export_axes(cfg: &RunConfig) -> CliResult<GridAxes> {
    let bx = &cfg.sampler.training_box;
    Ok(GridAxes::new(
        linspace(bx.w_min, bx.w_max, 61),
        linspace(bx.l_min, bx.l_max, 21),
        linspace(0.0, bx.maturity, 21),
    )?)
}

/// One training job of a batch.
pub struct Job {
    pub label: String,
    pub params: ModelParams,
    pub seed: u64,
}

/// Runs every job on the rayon pool. Results keep job order.
pub fn train_all(cfg: &RunConfig, jobs: &[Job]) -> Vec<liqhjb::Result<Solution>> {
    jobs.par_iter()
        .map(|job| {
            let solver = Solver::new(job.params, cfg.utility, cfg.sampler, cfg.solver.clone(), job.seed)?;
            let sol = solver.run()?;
            log::info!(
                "{} seed {}: k = {} ({:?})",
                job.label,
                job.seed,
                sol.trace.iterations(),
                sol.trace.stop
            );
            Ok(sol)
        })
        .collect()
}

pub fn summary(label: &str, sol: &Solution) -> RunSummary {
    RunSummary {
        label: label.to_string(),
        seed: sol.seed,
        iterations: sol.trace.iterations(),
        converged: sol.trace.stop == StopReason::Converged,
        seconds: sol.trace.seconds(),
    }
}

fn checkpoint(net: &TwoLayerNet) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    net.write_checkpoint(&mut buf)?;
    Ok(buf)
}

pub fn run(common: &CommonArgs, seed_args: &SeedArgs) -> CliResult<Status> {
    let cfg = common.load_config()?;
    let seeds = seed_args.resolve()?;
    let axes = export_axes(&cfg)?;
    let mut manifest = RunManifest::begin(&common.out, "solve", &cfg, &seeds)?;

    let jobs: Vec<Job> = seeds
        .iter()
        .map(|&seed| Job {
            label: "solve".into(),
            params: cfg.params,
            seed,
        })
        .collect();
    let results = train_all(&cfg, &jobs);

    let hash = params_hash(&cfg);
    let mut solutions = Vec::new();
    let mut first_error = None;
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(sol) => {
                let dir = format!("seed-{}", job.seed);
                let (policy, value) = sol.surfaces(axes.clone(), hash);
                manifest.write(
                    &format!("{dir}/surfaces.csv"),
                    surfaces_to_csv(&policy, &value)?.as_bytes(),
                )?;
                manifest.write(&format!("{dir}/trace.csv"), sol.trace.to_csv().as_bytes())?;
                manifest.write(&format!("{dir}/value.ckpt"), &checkpoint(&sol.value_net)?)?;
                manifest.write(&format!("{dir}/control.ckpt"), &checkpoint(&sol.control_net)?)?;
                for w in &sol.trace.warnings {
                    log::warn!("seed {}: {w}", job.seed);
                }
                println!(
                    "seed {}: {} after k = {} outer iterations ({:.1}s)",
                    job.seed,
                    if sol.trace.stop == StopReason::Converged {
                        "converged"
                    } else {
                        "stopped at budget"
                    },
                    sol.trace.iterations(),
                    sol.trace.seconds()
                );
                manifest.add_run(summary("solve", &sol));
                solutions.push((sol, policy.values, value.values));
            }
            Err(e) => {
                eprintln!("seed {}: {e}", job.seed);
                first_error.get_or_insert(e);
            }
        }
    }

    if solutions.len() > 1 {
        let omegas: Vec<&[f64]> = solutions.iter().map(|s| s.1.as_slice()).collect();
        let values: Vec<&[f64]> = solutions.iter().map(|s| s.2.as_slice()).collect();
        let csv = bands_to_csv(&axes, &Band::from_members(&omegas)?, &Band::from_members(&values)?);
        manifest.write("band.csv", csv.as_bytes())?;
    }

    let converged = solutions.iter().all(|s| s.0.trace.stop == StopReason::Converged);
    let code = match (&first_error, converged) {
        (Some(_), _) => 1,
        (None, true) => 0,
        (None, false) => 2,
    };
    manifest.finish(code)?;
    match first_error {
        Some(e) => Err(e.into()),
        None if converged => Ok(Status::Done),
        None => Ok(Status::NotConverged),
    }
}
