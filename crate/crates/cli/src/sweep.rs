//! Parameter sweeps producing plot-ready curves.

use std::fmt::Write as _;

use clap::{Args, ValueEnum};

use liqhjb::oracles::merton_policy;
use liqhjb::surface::linspace;
use liqhjb::{ModelParams, StopReason};

use crate::args::{CommonArgs, SeedArgs, Slice, SliceArg};
use crate::manifest::RunManifest;
use crate::solve::{summary, train_all, Job};
use crate::{CliError, CliResult, Status};

pub const SWEEP_SCHEMA: &str = "# schema: liqhjb-sweep v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "beta")]
    Beta,
    #[value(name = "kappa")]
    Kappa,
    #[value(name = "theta_bar")]
    ThetaBar,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Kappa => "kappa",
            SweepParam::ThetaBar => "theta_bar",
        }
    }

    fn apply(self, base: &ModelParams, v: f64) -> ModelParams {
        let mut p = *base;
        match self {
            SweepParam::Beta => p.beta = v,
            SweepParam::Kappa => p.kappa = v,
            SweepParam::ThetaBar => p.theta_bar = v,
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "t")]
    T,
    #[value(name = "W")]
    W,
    #[value(name = "L")]
    L,
    /// The swept value itself, evaluated at the slice; needs
    /// `--sweep-param theta_bar`.
    #[value(name = "theta_bar")]
    ThetaBar,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub seeds: SeedArgs,
    #[command(flatten)]
    pub slice: SliceArg,
    #[arg(long, value_enum)]
    pub sweep_param: SweepParam,
    #[arg(
        long,
        value_name = "v1,v2,..",
        value_delimiter = ',',
        required = true,
        allow_negative_numbers = true
    )]
    pub sweep_values: Vec<f64>,
    /// Variable along each curve; the other two stay at the slice.
    #[arg(long, value_enum, default_value = "t")]
    pub axis: Axis,
    /// Points per curve.
    #[arg(long, default_value_t = 21)]
    pub axis_points: usize,
}

/// Evaluation points of one curve as `(axis_value, state)`.
fn curve(args: &SweepArgs, slice: Slice, sweep_value: f64, range: [f64; 2]) -> Vec<(f64, [f64; 3])> {
    let n = args.axis_points;
    match args.axis {
        Axis::T => linspace(range[0], range[1], n)
            .into_iter()
            .map(|t| (t, [slice.w, slice.l, t]))
            .collect(),
        Axis::W => linspace(range[0], range[1], n)
            .into_iter()
            .map(|w| (w, [w, slice.l, slice.t]))
            .collect(),
        Axis::L => linspace(range[0], range[1], n)
            .into_iter()
            .map(|l| (l, [slice.w, l, slice.t]))
            .collect(),
        Axis::ThetaBar => vec![(sweep_value, slice.point())],
    }
}

pub fn run(args: &SweepArgs) -> CliResult<Status> {
    let cfg = args.common.load_config()?;
    let seeds = args.seeds.resolve()?;
    let slice = args.slice.slice;
    let bx = cfg.sampler.training_box;
    slice.check_inside(&bx)?;
    if args.sweep_values.is_empty() {
        return Err(CliError::Usage("--sweep-values is empty".into()));
    }
    if args.axis_points == 0 {
        return Err(CliError::Usage("--axis-points must be >= 1".into()));
    }
    if args.axis == Axis::ThetaBar && args.sweep_param != SweepParam::ThetaBar {
        return Err(CliError::Usage("--axis theta_bar needs --sweep-param theta_bar".into()));
    }
    let v = &cfg.solver.validation;
    let range = match args.axis {
        Axis::T => [0.0, bx.maturity],
        Axis::W => v.w,
        Axis::L => v.l,
        Axis::ThetaBar => [0.0, 0.0],
    };
    for &value in &args.sweep_values {
        args.sweep_param
            .apply(&cfg.params, value)
            .validate()
            .map_err(|e| CliError::Usage(format!("--sweep-values {value}: {e}")))?;
    }

    let mut manifest = RunManifest::begin(&args.common.out, "sweep", &cfg, &seeds)?;
    manifest.set("sweep_param", args.sweep_param.name());
    manifest.set(
        "sweep_values",
        toml::Value::Array(args.sweep_values.iter().map(|&x| x.into()).collect()),
    );
    manifest.set("slice", format!("W={},L={},t={}", slice.w, slice.l, slice.t));

    let jobs: Vec<Job> = args
        .sweep_values
        .iter()
        .flat_map(|&value| {
            seeds.iter().map(move |&seed| Job {
                label: format!("{}={value}", args.sweep_param.name()),
                params: args.sweep_param.apply(&cfg.params, value),
                seed,
            })
        })
        .collect();
    let results = train_all(&cfg, &jobs);

    // Merton's line always uses the frictionless formula.
    let frictionless = ModelParams {
        beta: 0.0,
        kappa: 0.0,
        sigma_l: 0.0,
        ..cfg.params
    };
    let mut csv = format!("{SWEEP_SCHEMA}\naxis_value,sweep_value,omega_mean,omega_min,omega_max,merton_line\n");
    let mut first_error = None;
    let mut converged = true;
    for (i, &value) in args.sweep_values.iter().enumerate() {
        let group = &results[i * seeds.len()..(i + 1) * seeds.len()];
        let mut sols = Vec::new();
        for (j, r) in group.iter().enumerate() {
            match r {
                Ok(sol) => sols.push(sol),
                Err(e) => {
                    eprintln!("{} seed {}: {e}", jobs[i * seeds.len() + j].label, seeds[j]);
                    if first_error.is_none() {
                        first_error = Some(e.to_string());
                    }
                }
            }
        }
        if sols.len() < group.len() {
            continue;
        }
        for sol in &sols {
            manifest.add_run(summary(&jobs[i * seeds.len()].label, sol));
            converged &= sol.trace.stop == StopReason::Converged;
        }
        for (axis_value, x) in curve(args, slice, value, range) {
            let omegas: Vec<f64> = sols.iter().map(|s| s.policy(x)).collect();
            let mean = omegas.iter().sum::<f64>() / omegas.len() as f64;
            let min = omegas.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = omegas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let merton = merton_policy(&cfg.utility, &frictionless, x[0], x[2])?.omega;
            let _ = writeln!(
                csv,
                "{axis_value},{value},{},{min},{max},{merton}",
                mean.clamp(min, max)
            );
        }
        let at_slice: Vec<f64> = sols.iter().map(|s| s.policy(slice.point())).collect();
        println!(
            "{}={value}: omega at slice {:.4} (mean of {} seed(s))",
            args.sweep_param.name(),
            at_slice.iter().sum::<f64>() / at_slice.len() as f64,
            at_slice.len()
        );
    }
    manifest.write("sweep.csv", csv.as_bytes())?;

    if let Some(e) = first_error {
        manifest.finish(1)?;
        return Err(CliError::Failed(format!("sweep incomplete, partial CSV written: {e}")));
    }
    manifest.finish(if converged { 0 } else { 2 })?;
    Ok(if converged { Status::Done } else { Status::NotConverged })
}
