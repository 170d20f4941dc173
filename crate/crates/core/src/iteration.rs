//! Alternating policy evaluation and policy improvement over a value network
//! `Q_φ` and a control network `ω_ψ`.
//!
//! The interior collocation set is drawn once per run and then grows by the
//! adaptive refreshes until they are exhausted; from then on every optimizer
//! step sees the same points. Optimizer moments persist across outer
//! iterations and both networks are warm-started from the previous iterate.

use std::time::Instant;

use crate::collocation::{adaptive_resample, sample_uniform, SamplerConfig, TrainingBox};
use crate::error::{Error, Result};
use crate::hjb::{
    controls, evaluate_loss, improvement_objective_and_grad, pde_loss_and_grad, pointwise_optimal_control, quadratics,
    refit_output_layer, EvaluationResiduals, ImprovementResiduals, PointCoefficients, PreparedBatch,
};
use crate::lm::{levenberg_marquardt, LmConfig};
use crate::market::{ModelParams, StatePoint, Utility};
use crate::net::{adam_step, AdamState, Head, ParamGrad, TwoLayerNet, DEFAULT_HIDDEN};
use crate::surface::{linspace, GridAxes, PolicySurface, SurfaceMeta, ValueSurface};

/// Seed offsets for the independent random pieces of one run.
const VALUE_INIT: u64 = 0x5641_4c55;
const CONTROL_INIT: u64 = 0x4354_524c;
const HOLDOUT: u64 = 0x484f_4c44;
const REFRESH: u64 = 0x5245_4652;

/// The grid on which convergence, residuals and accuracy are measured.
///
/// It sits well inside the training box: with no conditions imposed on the
/// box faces, the fitted value is only weakly determined within a diffusion
/// length of them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationGrid {
    pub n_w: usize,
    pub n_l: usize,
    pub n_t: usize,
    pub w: [f64; 2],
    pub l: [f64; 2],
    /// Fraction of `[0, T]` trimmed off each end.
    pub t_margin: f64,
}

impl Default for ValidationGrid {
    fn default() -> Self {
        Self {
            n_w: 21,
            n_l: 21,
            n_t: 11,
            w: [1.0, 4.5],
            l: [0.1, 1.5],
            t_margin: 0.1,
        }
    }
}

impl ValidationGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidParam {
                name: "validation",
                reason: reason.into(),
            })
        };
        if self.n_w == 0 || self.n_l == 0 || self.n_t == 0 {
            return bad("grid needs >= 1 node per axis");
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        if !ordered(self.w) || !ordered(self.l) {
            return bad("ranges must be finite and increasing");
        }
        if !(0.0..0.5).contains(&self.t_margin) {
            return bad("t_margin must lie in [0, 0.5)");
        }
        Ok(())
    }

    /// Grid axes, checked to lie inside `bx`.
    pub fn axes(&self, bx: &TrainingBox) -> Result<GridAxes> {
        self.validate()?;
        let region = TrainingBox {
            w_min: self.w[0],
            w_max: self.w[1],
            l_min: self.l[0],
            l_max: self.l[1],
            maturity: bx.maturity,
        };
        if region.w_min < bx.w_min || region.w_max > bx.w_max || region.l_min < bx.l_min || region.l_max > bx.l_max {
            return Err(Error::Config(format!(
                "validation region W {:?}, L {:?} leaves the training box {bx:?}",
                self.w, self.l
            )));
        }
        let t0 = self.t_margin * bx.maturity;
        GridAxes::new(
            linspace(region.w_min, region.w_max, self.n_w),
            linspace(region.l_min, region.l_max, self.n_l),
            linspace(t0, bx.maturity - t0, self.n_t),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationConfig {
    pub max_outer: usize,
    pub pe_steps: usize,
    /// Evaluation steps for the first outer iteration, which starts from an
    /// untrained value network. `None` uses `pe_steps`.
    pub first_pe_steps: Option<usize>,
    pub pi_steps: usize,
    pub stop_tol: f64,
    pub w_term: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub validation: ValidationGrid,
    /// Size of the held-out batch used for the entry/exit sanity checks.
    pub n_holdout: usize,
    /// Outer iterations with a rising evaluation loss before aborting.
    pub divergence_patience: usize,
    /// Least-squares refit of the value network's output layer at the end
    /// of every evaluation phase.
    pub refit: bool,
    /// Tikhonov weight of the refit, relative to the mean diagonal of its
    /// normal matrix.
    pub refit_ridge: f64,
    /// Levenberg–Marquardt iterations on the evaluation loss at the end of
    /// every evaluation phase; 0 for none.
    pub lm_iterations: usize,
    /// The same for the first evaluation phase. `None` uses `lm_iterations`.
    pub first_lm_iterations: Option<usize>,
    /// Levenberg–Marquardt iterations on the improvement objective at the
    /// end of every improvement phase; 0 for none.
    pub pi_lm_iterations: usize,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            max_outer: 20,
            pe_steps: 50,
            first_pe_steps: Some(500),
            pi_steps: 100,
            stop_tol: 1e-5,
            w_term: 1.0,
            learning_rate: 1e-3,
            hidden: DEFAULT_HIDDEN,
            validation: ValidationGrid::default(),
            n_holdout: 1024,
            divergence_patience: 3,
            refit: true,
            refit_ridge: 1e-10,
            lm_iterations: 20,
            first_lm_iterations: Some(60),
            pi_lm_iterations: 20,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParam {
                name,
                reason: reason.into(),
            })
        };
        if self.max_outer == 0 {
            return bad("max_outer", "must be >= 1");
        }
        if self.pe_steps == 0 || self.first_pe_steps == Some(0) {
            return bad("pe_steps", "must be >= 1");
        }
        if !(self.stop_tol > 0.0) {
            return bad("stop_tol", "must be > 0");
        }
        if !(self.w_term > 0.0 && self.w_term.is_finite()) {
            return bad("w_term", "must be positive and finite");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive and finite");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be >= 1");
        }
        self.validation.validate()?;
        if self.n_holdout == 0 {
            return bad("n_holdout", "must be >= 1");
        }
        if self.divergence_patience == 0 {
            return bad("divergence_patience", "must be >= 1");
        }
        if !(self.refit_ridge > 0.0 && self.refit_ridge < 1.0) {
            return bad("refit_ridge", "must lie in (0, 1)");
        }
        Ok(())
    }
}

pub const TRACE_SCHEMA: &str = "# schema: liqhjb-trace v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
}

/// Diagnostics for one outer iteration `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// Training loss at the end of policy evaluation.
    pub pe_loss: f64,
    pub pe_terminal: f64,
    /// Held-out loss before and after policy evaluation.
    pub holdout_entry: f64,
    pub holdout_exit: f64,
    /// Improvement objective on the training batch after policy improvement;
    /// `None` when the run stopped before improving.
    pub pi_objective: Option<f64>,
    /// Mean relative change of `Q` on the validation grid against the
    /// previous iterate.
    pub relative_change: f64,
    /// Mean of `Q_k` over the validation grid.
    pub mean_value: f64,
    /// `sup |𝓛^{ω_{k−1}} Q_k|` over the validation grid.
    pub residual_sup: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    pub warnings: Vec<String>,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Pairs `(k, shortfall)` where `mean_{k+1} < mean_k − (T − t_min)·ē_k`.
    pub fn monotonicity_violations(&self, horizon: f64) -> Vec<(usize, f64)> {
        self.records
            .windows(2)
            .filter_map(|p| {
                let bound = p[0].mean_value - horizon * p[0].residual_sup;
                (p[1].mean_value < bound).then(|| (p[0].k, bound - p[1].mean_value))
            })
            .collect()
    }

    /// Per-iteration diagnostics. Wall-clock times are left out so that
    /// reruns with the same seed give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{TRACE_SCHEMA}\nk,pe_loss,pe_terminal,holdout_entry,holdout_exit,pi_objective,relative_change,mean_value,residual_sup\n"
        );
        for r in &self.records {
            let pi = r.pi_objective.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.k,
                r.pe_loss,
                r.pe_terminal,
                r.holdout_entry,
                r.holdout_exit,
                pi,
                r.relative_change,
                r.mean_value,
                r.residual_sup
            ));
        }
        out
    }

    pub fn seconds(&self) -> f64 {
        self.records.iter().map(|r| r.seconds).sum()
    }
}

/// Result of a full run for one seed.
#[derive(Debug, Clone)]
pub struct Solution {
    pub value_net: TwoLayerNet,
    pub control_net: TwoLayerNet,
    pub trace: IterationTrace,
    pub seed: u64,
}

impl Solution {
    pub fn value(&self, x: [f64; 3]) -> f64 {
        self.value_net.forward_unchecked(x)
    }

    pub fn policy(&self, x: [f64; 3]) -> f64 {
        self.control_net.forward_unchecked(x).clamp(0.0, 1.0)
    }

    pub fn surfaces(&self, axes: GridAxes, params_hash: u64) -> (PolicySurface, ValueSurface) {
        let meta = SurfaceMeta {
            params_hash,
            seed: self.seed,
            iteration: self.trace.iterations(),
        };
        (
            PolicySurface::from_net(&self.control_net, axes.clone(), meta),
            ValueSurface::from_net(&self.value_net, axes, meta),
        )
    }
}

/// One training run: networks, optimizer state and collocation data.
pub struct Solver {
    params: ModelParams,
    utility: Utility,
    sampler: SamplerConfig,
    config: IterationConfig,
    seed: u64,
    pub value_net: TwoLayerNet,
    pub control_net: TwoLayerNet,
    value_opt: AdamState,
    control_opt: AdamState,
    batch: PreparedBatch,
    holdout: PreparedBatch,
    grid: Vec<[f64; 3]>,
    grid_coefficients: Vec<PointCoefficients>,
    steps_taken: usize,
    refreshes: usize,
    lm_damping: f64,
    lm_control_damping: f64,
    warnings: Vec<String>,
}

impl Solver {
    pub fn new(
        params: ModelParams,
        utility: Utility,
        sampler: SamplerConfig,
        config: IterationConfig,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        utility.validate()?;
        sampler.validate()?;
        sampler.training_box.validate_for(&utility)?;
        config.validate()?;
        let bx = sampler.training_box;
        if (bx.maturity - params.maturity).abs() > 1e-12 * params.maturity {
            return Err(Error::Config(format!(
                "training box maturity {} differs from model maturity {}",
                bx.maturity, params.maturity
            )));
        }
        let scaling = bx.input_scaling();
        let value_net = TwoLayerNet::init(config.hidden, Head::Linear, scaling, seed ^ VALUE_INIT)?;
        let control_net =
            TwoLayerNet::init(config.hidden, Head::Sigmoid, scaling, seed ^ CONTROL_INIT)?.with_zero_output_layer();
        let drawn = sample_uniform(&bx, sampler.n_interior, sampler.n_terminal, seed)?;
        let batch = PreparedBatch::from_batch(&params, &utility, &drawn)?;
        let held = sample_uniform(&bx, config.n_holdout, config.n_holdout, seed ^ HOLDOUT)?;
        let holdout = PreparedBatch::from_batch(&params, &utility, &held)?;
        let grid = config.validation.axes(&bx)?.points();
        let grid_coefficients = grid
            .iter()
            .map(|x| PointCoefficients::new(&params, StatePoint::from_array(*x)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            value_opt: AdamState::new(config.hidden).with_learning_rate(config.learning_rate),
            control_opt: AdamState::new(config.hidden).with_learning_rate(config.learning_rate),
            params,
            utility,
            sampler,
            config,
            seed,
            value_net,
            control_net,
            batch,
            holdout,
            grid,
            grid_coefficients,
            steps_taken: 0,
            refreshes: 0,
            lm_damping: LmConfig::default().initial_damping,
            lm_control_damping: LmConfig::default().initial_damping,
            warnings: Vec::new(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn utility(&self) -> &Utility {
        &self.utility
    }

    pub fn batch(&self) -> &PreparedBatch {
        &self.batch
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    fn maybe_refresh(&mut self, omegas: &mut Vec<f64>) -> Result<()> {
        let s = &self.sampler;
        if s.refresh_every == 0 || self.refreshes >= s.max_refreshes || self.steps_taken == 0 {
            return Ok(());
        }
        if self.steps_taken % s.refresh_every != 0 {
            return Ok(());
        }
        let stream = self.seed ^ REFRESH.wrapping_add(self.refreshes as u64);
        let (value_net, control_net, params) = (&self.value_net, &self.control_net, &self.params);
        let picked = adaptive_resample(
            &s.training_box,
            |x| {
                let pc = match PointCoefficients::new(params, StatePoint::from_array(*x)) {
                    Ok(pc) => pc,
                    Err(_) => return f64::NAN,
                };
                let omega = control_net.forward_unchecked(*x).clamp(0.0, 1.0);
                pc.quadratic(&value_net.forward_jet(*x)).eval(omega)
            },
            s.pool_size,
            s.keep_k,
            stream,
        )?;
        omegas.extend(controls(&self.control_net, &picked)?);
        self.batch.extend_interior(&self.params, &picked)?;
        self.refreshes += 1;
        Ok(())
    }

    /// Fits `Q_φ` to the current control for `steps` Adam steps. Returns the
    /// final training loss and its terminal part.
    pub fn policy_evaluation(&mut self, steps: usize, lm_iterations: usize) -> Result<(f64, f64)> {
        let mut omegas = controls(&self.control_net, &self.batch.interior)?;
        let mut grad = ParamGrad::zeros(self.config.hidden);
        let mut last = (f64::NAN, f64::NAN);
        let cfg = &self.config;
        let (w_term, refit, ridge) = (cfg.w_term, cfg.refit, cfg.refit_ridge);
        for _ in 0..steps {
            self.maybe_refresh(&mut omegas)?;
            last = pde_loss_and_grad(&self.value_net, &self.batch, &omegas, w_term, &mut grad)?;
            adam_step(&mut self.value_net, &grad, &mut self.value_opt)?;
            self.steps_taken += 1;
        }
        if refit {
            refit_output_layer(&mut self.value_net, &self.batch, &omegas, w_term, ridge)?;
        }
        if lm_iterations > 0 {
            let system = EvaluationResiduals::new(&self.batch, &omegas, w_term, ridge)?;
            let cfg = LmConfig {
                iterations: lm_iterations,
                ..Default::default()
            };
            let rep = levenberg_marquardt(&mut self.value_net, &system, &cfg, &mut self.lm_damping)?;
            log::debug!("evaluation LM: {rep:?}, damping {:.2e}", self.lm_damping);
        }
        if refit || lm_iterations > 0 {
            let loss = evaluate_loss(&self.value_net, &self.batch, &omegas, w_term)?;
            last = (loss.total, loss.terminal);
        }
        Ok(last)
    }

    /// Ascends the mean generator over the training batch for `steps` Adam
    /// steps with `Q_φ` frozen. Returns the final objective.
    pub fn policy_improvement(&mut self, steps: usize) -> Result<f64> {
        let quads = quadratics(&self.params, &self.value_net, &self.batch.interior)?;
        let mut grad = ParamGrad::zeros(self.config.hidden);
        let mut objective = f64::NAN;
        for _ in 0..steps {
            objective = improvement_objective_and_grad(&self.control_net, &self.batch.interior, &quads, &mut grad)?;
            grad.scale(-1.0);
            adam_step(&mut self.control_net, &grad, &mut self.control_opt)?;
        }
        if self.config.pi_lm_iterations > 0 {
            let system = ImprovementResiduals::new(&self.batch.interior, &quads)?;
            let cfg = LmConfig {
                iterations: self.config.pi_lm_iterations,
                ..Default::default()
            };
            let rep = levenberg_marquardt(&mut self.control_net, &system, &cfg, &mut self.lm_control_damping)?;
            log::debug!("improvement LM: {rep:?}, damping {:.2e}", self.lm_control_damping);
            objective = -rep.last;
        }
        Ok(objective)
    }

    fn holdout_loss(&self) -> Result<f64> {
        let omegas = controls(&self.control_net, &self.holdout.interior)?;
        Ok(evaluate_loss(&self.value_net, &self.holdout, &omegas, self.config.w_term)?.total)
    }

    fn holdout_objective(&self) -> Result<f64> {
        let quads = quadratics(&self.params, &self.value_net, &self.holdout.interior)?;
        let omegas = controls(&self.control_net, &self.holdout.interior)?;
        Ok(quads.iter().zip(&omegas).map(|(q, &w)| q.eval(w)).sum::<f64>() / quads.len() as f64)
    }

    fn grid_values(&self) -> Vec<f64> {
        self.grid.iter().map(|x| self.value_net.forward_unchecked(*x)).collect()
    }

    fn grid_residual_sup(&self) -> f64 {
        let mut tape = vec![0.0; self.value_net.hidden()];
        self.grid
            .iter()
            .zip(&self.grid_coefficients)
            .map(|(x, pc)| {
                let omega = self.control_net.forward_unchecked(*x).clamp(0.0, 1.0);
                pc.quadratic(&self.value_net.forward_jet_taped(*x, &mut tape))
                    .eval(omega)
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    /// Greatest gap between the control network and the exact pointwise
    /// maximizer of the current value network's generator on the grid.
    pub fn greedy_gap(&self) -> f64 {
        let mut tape = vec![0.0; self.value_net.hidden()];
        self.grid
            .iter()
            .zip(&self.grid_coefficients)
            .map(|(x, pc)| {
                let q = pc.quadratic(&self.value_net.forward_jet_taped(*x, &mut tape));
                (pointwise_optimal_control(&q) - self.control_net.forward_unchecked(*x)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Runs outer iterations until the value iterates settle or the budget
    /// runs out.
    pub fn run(self) -> Result<Solution> {
        self.run_observed(|_, _, _| {})
    }

    /// [`Self::run`], calling `observe(k, Q_k, ω_k)` at the end of every
    /// outer iteration. On the stopping iteration `ω_k` is the policy that
    /// `Q_k` evaluates.
    pub fn run_observed<F: FnMut(usize, &TwoLayerNet, &TwoLayerNet)>(mut self, mut observe: F) -> Result<Solution> {
        let cfg = self.config.clone();
        let mut previous = self.grid_values();
        let mut records: Vec<IterationRecord> = Vec::new();
        let mut rising = 0usize;
        let mut stop = StopReason::MaxIterations;
        for k in 1..=cfg.max_outer {
            let started = Instant::now();
            let (steps, lm) = if k == 1 {
                (
                    cfg.first_pe_steps.unwrap_or(cfg.pe_steps),
                    cfg.first_lm_iterations.unwrap_or(cfg.lm_iterations),
                )
            } else {
                (cfg.pe_steps, cfg.lm_iterations)
            };
            let holdout_entry = self.holdout_loss()?;
            let (pe_loss, pe_terminal) = self.policy_evaluation(steps, lm)?;
            let holdout_exit = self.holdout_loss()?;
            if holdout_exit > holdout_entry {
                self.warn(format!(
                    "iteration {k}: held-out evaluation loss rose from {holdout_entry:.3e} to {holdout_exit:.3e}"
                ));
            }
            let values = self.grid_values();
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                let x = self.grid[i];
                return Err(Error::NonFinite(format!(
                    "value network output at (W={}, L={}, t={}) after iteration {k}",
                    x[0], x[1], x[2]
                )));
            }
            let relative_change = values
                .iter()
                .zip(&previous)
                .map(|(q, p)| (q - p).abs() / (p.abs() + 1e-8))
                .sum::<f64>()
                / values.len() as f64;
            let mean_value = values.iter().sum::<f64>() / values.len() as f64;
            let residual_sup = self.grid_residual_sup();
            if let Some(prev) = records.last() {
                rising = if pe_loss > prev.pe_loss { rising + 1 } else { 0 };
            }
            let mut record = IterationRecord {
                k,
                pe_loss,
                pe_terminal,
                holdout_entry,
                holdout_exit,
                pi_objective: None,
                relative_change,
                mean_value,
                residual_sup,
                seconds: 0.0,
            };
            if rising >= cfg.divergence_patience {
                return Err(Error::Diverged(format!(
                    "evaluation loss rose {rising} outer iterations in a row (now {pe_loss:.3e} at k = {k})"
                )));
            }
            if relative_change < cfg.stop_tol {
                record.seconds = started.elapsed().as_secs_f64();
                observe(k, &self.value_net, &self.control_net);
                records.push(record);
                stop = StopReason::Converged;
                break;
            }
            let objective_entry = self.holdout_objective()?;
            let objective = self.policy_improvement(cfg.pi_steps)?;
            let objective_exit = self.holdout_objective()?;
            if objective_exit < objective_entry {
                self.warn(format!(
                    "iteration {k}: held-out improvement objective fell from {objective_entry:.3e} to {objective_exit:.3e}"
                ));
            }
            record.pi_objective = Some(objective);
            record.seconds = started.elapsed().as_secs_f64();
            observe(k, &self.value_net, &self.control_net);
            log::info!(
                "seed {} k {k}: loss {pe_loss:.3e} rel {relative_change:.3e} mean {mean_value:.6} sup {residual_sup:.3e} ({:.1}s)",
                self.seed,
                record.seconds
            );
            records.push(record);
            previous = values;
        }
        Ok(Solution {
            value_net: self.value_net,
            control_net: self.control_net,
            trace: IterationTrace {
                records,
                stop,
                warnings: self.warnings,
            },
            seed: self.seed,
        })
    }
}

/// Convenience wrapper for a single seed.
pub fn solve(
    params: &ModelParams,
    utility: &Utility,
    sampler: &SamplerConfig,
    config: &IterationConfig,
    seed: u64,
) -> Result<Solution> {
    Solver::new(*params, *utility, *sampler, config.clone(), seed)?.run()
}

/// Independent runs over `seeds`, in parallel.
pub fn solve_many(
    params: &ModelParams,
    utility: &Utility,
    sampler: &SamplerConfig,
    config: &IterationConfig,
    seeds: &[u64],
) -> Result<Vec<Solution>> {
    use rayon::prelude::*;
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    seeds
        .par_iter()
        .map(|&s| solve(params, utility, sampler, config, s))
        .collect()
}
