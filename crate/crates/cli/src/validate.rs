//! Frictionless training checked against the Merton closed forms.

use std::fmt::Write as _;

use rayon::prelude::*;

use liqhjb::oracles::{merton_policy, merton_value};
use liqhjb::surface::linspace;
use liqhjb::{ModelParams, RunConfig, Solution, Solver, StopReason, TwoLayerNet, Utility};

use crate::args::{CommonArgs, SeedArgs, SliceArg};
use crate::manifest::RunManifest;
use crate::solve::summary;
use crate::{CliError, CliResult, Status};

pub const VALIDATE_SCHEMA: &str = "# schema: liqhjb-validate v1";
pub const POLICY_TOL: f64 = 0.02;
pub const VALUE_TOL: f64 = 0.01;

/// Relative errors are taken against `max(|Q|, 1e-3)` so that log utility,
/// whose value crosses zero, stays well defined.
const VALUE_FLOOR: f64 = 1e-3;

/// Largest error over a set of points and where it occurs.
#[derive(Debug, Clone, Copy, Default)]
struct Worst {
    err: f64,
    at: [f64; 3],
}

impl Worst {
    fn update(&mut self, err: f64, at: [f64; 3]) {
        if err > self.err || err.is_nan() {
            self.err = err;
            self.at = at;
        }
    }
}

struct Oracle {
    utility: Utility,
    params: ModelParams,
}

impl Oracle {
    fn errors(&self, q: &TwoLayerNet, omega: &TwoLayerNet, points: &[[f64; 3]]) -> liqhjb::Result<(Worst, Worst)> {
        let mut value = Worst::default();
        let mut policy = Worst::default();
        for &x in points {
            let exact_q = merton_value(&self.utility, &self.params, x[0], x[2])?;
            let exact_w = merton_policy(&self.utility, &self.params, x[0], x[2])?.omega;
            value.update(
                (q.forward_unchecked(x) - exact_q).abs() / exact_q.abs().max(VALUE_FLOOR),
                x,
            );
            policy.update((omega.forward_unchecked(x).clamp(0.0, 1.0) - exact_w).abs(), x);
        }
        Ok((value, policy))
    }
}

/// Errors of one outer iteration.
struct Row {
    k: usize,
    value_t0: Worst,
    value_mid: Worst,
    policy_t0: Worst,
    policy_mid: Worst,
    value_grid: Worst,
    policy_grid: Worst,
}

struct SeedReport {
    solution: Solution,
    rows: Vec<Row>,
}

fn lg(x: f64) -> f64 {
    x.max(f64::MIN_POSITIVE).log10()
}

fn train(cfg: &RunConfig, oracle: &Oracle, seed: u64, slices: &[Vec<[f64; 3]>; 3]) -> liqhjb::Result<SeedReport> {
    let solver = Solver::new(oracle.params, oracle.utility, cfg.sampler, cfg.solver.clone(), seed)?;
    let mut rows = Vec::new();
    let mut failure = None;
    let solution = solver.run_observed(|k, q, omega| {
        let measured = (|| -> liqhjb::Result<Row> {
            let (value_t0, policy_t0) = oracle.errors(q, omega, &slices[0])?;
            let (value_mid, policy_mid) = oracle.errors(q, omega, &slices[1])?;
            let (value_grid, policy_grid) = oracle.errors(q, omega, &slices[2])?;
            Ok(Row {
                k,
                value_t0,
                value_mid,
                policy_t0,
                policy_mid,
                value_grid,
                policy_grid,
            })
        })();
        match measured {
            Ok(row) => rows.push(row),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(SeedReport { solution, rows })
}

pub fn run(common: &CommonArgs, seed_args: &SeedArgs, slice: &SliceArg) -> CliResult<Status> {
    let mut cfg = common.load_config()?;
    cfg.params = ModelParams {
        beta: 0.0,
        kappa: 0.0,
        sigma_l: 0.0,
        ..cfg.params
    };
    cfg.validate()?;
    let seeds = seed_args.resolve()?;
    let l = slice.slice.l;
    let bx = cfg.sampler.training_box;
    slice.slice.check_inside(&bx)?;
    let v = &cfg.solver.validation;
    let maturity = cfg.params.maturity;
    let ws = linspace(v.w[0], v.w[1], 21);
    let line = |t: f64| ws.iter().map(|&w| [w, l, t]).collect::<Vec<_>>();
    let t_lo = v.t_margin * maturity;
    let grid: Vec<[f64; 3]> = linspace(t_lo, maturity - t_lo, 21)
        .into_iter()
        .flat_map(|t| line(t))
        .collect();
    let slices = [line(0.0), line(0.5 * maturity), grid];
    let oracle = Oracle {
        utility: cfg.utility,
        params: cfg.params,
    };

    let mut manifest = RunManifest::begin(&common.out, "validate", &cfg, &seeds)?;
    manifest.set("slice_L", l);
    manifest.set("policy_tol", POLICY_TOL);
    manifest.set("value_tol", VALUE_TOL);

    let results: Vec<liqhjb::Result<SeedReport>> =
        seeds.par_iter().map(|&s| train(&cfg, &oracle, s, &slices)).collect();

    let mut csv = format!(
        "{VALIDATE_SCHEMA}\nseed,k,log10_value_err_t0,log10_value_err_tmid,log10_policy_err_t0,log10_policy_err_tmid,log10_value_err_grid,log10_policy_err_grid\n"
    );
    let mut first_error = None;
    let mut failures: Vec<(f64, String)> = Vec::new();
    let mut all_converged = true;
    for (&seed, result) in seeds.iter().zip(results) {
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                first_error.get_or_insert(e);
                continue;
            }
        };
        for r in &report.rows {
            let _ = writeln!(
                csv,
                "{seed},{},{},{},{},{},{},{}",
                r.k,
                lg(r.value_t0.err),
                lg(r.value_mid.err),
                lg(r.policy_t0.err),
                lg(r.policy_mid.err),
                lg(r.value_grid.err),
                lg(r.policy_grid.err)
            );
        }
        manifest.add_run(summary("validate", &report.solution));
        all_converged &= report.solution.trace.stop == StopReason::Converged;
        let Some(last) = report.rows.last() else { continue };
        let trend = report.rows.len() >= 3
            && report.rows[1].value_grid.err <= report.rows[0].value_grid.err
            && report.rows[2].value_grid.err <= report.rows[1].value_grid.err;
        println!(
            "seed {seed}: k = {}, policy sup error {:.4}, value rel error {:.2e}, value error non-increasing over k = 1..3: {}",
            last.k,
            last.policy_grid.err,
            last.value_grid.err,
            if trend { "yes" } else { "no" }
        );
        let ratio_p = last.policy_grid.err / POLICY_TOL;
        if !(ratio_p < 1.0) {
            let at = last.policy_grid.at;
            failures.push((
                ratio_p,
                format!(
                    "seed {seed}: policy error {:.4} ≥ {POLICY_TOL} at W={:.4}, L={:.4}, t={:.4}",
                    last.policy_grid.err, at[0], at[1], at[2]
                ),
            ));
        }
        let ratio_v = last.value_grid.err / VALUE_TOL;
        if !(ratio_v < 1.0) {
            let at = last.value_grid.at;
            failures.push((
                ratio_v,
                format!(
                    "seed {seed}: value relative error {:.2e} ≥ {VALUE_TOL} at W={:.4}, L={:.4}, t={:.4}",
                    last.value_grid.err, at[0], at[1], at[2]
                ),
            ));
        }
    }
    manifest.write("validate.csv", csv.as_bytes())?;

    if let Some(e) = first_error {
        manifest.finish(1)?;
        return Err(e.into());
    }
    if !failures.is_empty() {
        manifest.finish(3)?;
        failures.sort_by(|a, b| b.0.total_cmp(&a.0));
        return Err(CliError::Validation(format!(
            "{} check(s) failed; worst offender {}",
            failures.len(),
            failures[0].1
        )));
    }
    println!("validation passed: policy < {POLICY_TOL}, value < {VALUE_TOL} relative on every seed");
    manifest.finish(if all_converged { 0 } else { 2 })?;
    Ok(if all_converged {
        Status::Done
    } else {
        Status::NotConverged
    })
}
