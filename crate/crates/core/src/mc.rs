//! Forward Monte Carlo of liquidity and wealth under a given policy,
//! estimating expected terminal utility.
//!
//! Two cost treatments are simulated. `ExpectedApprox` charges the
//! deterministic drift `c(L)·ω(1−ω)·W` and rebalances continuously.
//! `RealizedExact` holds the share count fixed between rebalancing dates
//! spaced `δt` apart and charges `κ·|trade value|` at each date.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{ModelParams, Utility};
use crate::surface::PolicySurface;

pub const STATS_SCHEMA: &str = "# schema: liqhjb-mc v1";
pub const PATHS_SCHEMA: &str = "# schema: liqhjb-mc-paths v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostMode {
    #[default]
    ExpectedApprox,
    RealizedExact,
}

impl CostMode {
    pub fn name(&self) -> &'static str {
        match self {
            CostMode::ExpectedApprox => "expected_approx",
            CostMode::RealizedExact => "realized_exact",
        }
    }
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected_approx" | "expected" => Ok(CostMode::ExpectedApprox),
            "realized_exact" | "realized" => Ok(CostMode::RealizedExact),
            other => Err(Error::Config(format!(
                "unknown cost mode `{other}` (expected expected_approx or realized_exact)"
            ))),
        }
    }
}

/// Treatment of liquidity paths that cross zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LiquidityBoundary {
    /// Truncate at `L = 0` after each step.
    #[default]
    Floor,
    /// Let `L` go negative; the level-dependent part of `θ` vanishes there.
    AllowNegative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    pub n_paths: usize,
    /// Euler steps per rebalancing interval `δt`.
    pub substeps: usize,
    pub seed: u64,
    pub cost_mode: CostMode,
    /// Pair path `2j` with path `2j+1` driven by the negated noise.
    pub antithetic: bool,
    pub w0: f64,
    pub l0: f64,
    pub t0: f64,
    pub liquidity: LiquidityBoundary,
    /// Absorbing wealth level for utilities that need `W > 0`, as a
    /// fraction of `w0`.
    pub wealth_floor: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            substeps: 1,
            seed: 0,
            cost_mode: CostMode::ExpectedApprox,
            antithetic: false,
            w0: 2.5,
            l0: 0.6,
            t0: 0.0,
            liquidity: LiquidityBoundary::Floor,
            wealth_floor: 1e-6,
        }
    }
}

impl PathConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParam { name, reason });
        if self.n_paths == 0 {
            return bad("n_paths", "must be >= 1".into());
        }
        if self.substeps == 0 {
            return bad("substeps", "must be >= 1".into());
        }
        if !self.w0.is_finite() || !self.l0.is_finite() {
            return bad("w0", format!("initial state ({}, {}) must be finite", self.w0, self.l0));
        }
        if !(self.t0 >= 0.0 && self.t0 < params.maturity) {
            return bad("t0", format!("must lie in [0, T), got {}", self.t0));
        }
        if !(self.wealth_floor > 0.0 && self.wealth_floor < 1.0) {
            return bad("wealth_floor", format!("must lie in (0, 1), got {}", self.wealth_floor));
        }
        Ok(())
    }
}

/// One rebalancing in `RealizedExact` mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeRecord {
    pub t: f64,
    /// Shares bought (positive) or sold.
    pub shares: f64,
    pub price: f64,
    /// `κ·S·|ν|`, never negative.
    pub cost: f64,
}

/// Terminal state of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    pub terminal_wealth: f64,
    pub utility: f64,
    pub total_cost: f64,
    pub terminal_l: f64,
    pub absorbed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathStats {
    pub n_paths: usize,
    pub mean_utility: f64,
    /// Sample standard deviation over `√n`; with antithetic pairs the pair
    /// averages are the samples.
    pub std_error: f64,
    /// `(probability, W_T quantile)` at 5%, 25%, 50%, 75% and 95%.
    pub wealth_quantiles: Vec<(f64, f64)>,
    pub mean_cost: f64,
    pub absorbed: usize,
    pub seed: u64,
    pub cost_mode: CostMode,
}

/// Lower-triangular `F` with `F·Fᵀ` equal to the correlation matrix of
/// `(B^γ, B^S, B^L)`. A zero pivot is accepted when the remaining column
/// is consistent with it, so rank-deficient matrices factor.
pub fn cholesky3(rho1: f64, rho2: f64, rho3: f64) -> Result<[[f64; 3]; 3]> {
    let m = crate::market::correlation_matrix(rho1, rho2, rho3);
    let mut f = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut d = m[j][j];
        for k in 0..j {
            d -= f[j][k] * f[j][k];
        }
        if d < -1e-10 {
            return Err(Error::Domain(format!(
                "correlation matrix for ({rho1}, {rho2}, {rho3}) is not positive semidefinite"
            )));
        }
        let pivot = d.max(0.0).sqrt();
        f[j][j] = pivot;
        for i in j + 1..3 {
            let mut s = m[i][j];
            for k in 0..j {
                s -= f[i][k] * f[j][k];
            }
            f[i][j] = if pivot > 1e-12 { s / pivot } else { 0.0 };
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let v: f64 = (0..3).map(|k| f[i][k] * f[j][k]).sum();
            worst = worst.max((v - m[i][j]).abs());
        }
    }
    if worst > 1e-10 {
        return Err(Error::Domain(format!(
            "correlation matrix for ({rho1}, {rho2}, {rho3}) does not factor: residual {worst:e}"
        )));
    }
    Ok(f)
}

/// Sum by recursive halving; the result depends only on the order of `v`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

struct Simulation<'a, P> {
    params: &'a ModelParams,
    utility: &'a Utility,
    policy: &'a P,
    config: &'a PathConfig,
    factor: [[f64; 3]; 3],
    intervals: usize,
    dt: f64,
    floor: Option<f64>,
}

impl<'a, P: Fn(f64, f64, f64) -> f64 + Sync> Simulation<'a, P> {
    fn new(params: &'a ModelParams, utility: &'a Utility, policy: &'a P, config: &'a PathConfig) -> Result<Self> {
        params.validate()?;
        utility.validate()?;
        config.validate(params)?;
        if utility.requires_positive_wealth() && !(config.w0 > 0.0) {
            return Err(Error::Domain(format!(
                "{} utility needs W0 > 0, got {}",
                utility.name(),
                config.w0
            )));
        }
        let horizon = params.maturity - config.t0;
        // Rebalancing intervals are equal; δt is adjusted to divide the
        // horizon when it does not already.
        let intervals = ((horizon / params.delta_t).round() as usize).max(1);
        Ok(Self {
            params,
            utility,
            policy,
            config,
            factor: cholesky3(params.rho1, params.rho2, params.rho3)?,
            intervals,
            dt: horizon / (intervals * config.substeps) as f64,
            floor: utility
                .requires_positive_wealth()
                .then_some(config.wealth_floor * config.w0),
        })
    }

    fn control(&self, w: f64, l: f64, t: f64) -> Result<f64> {
        let omega = (self.policy)(w, l, t);
        if !omega.is_finite() {
            return Err(Error::NonFinite(format!("policy at ({w}, {l}, {t}) is {omega}")));
        }
        Ok(omega.clamp(0.0, 1.0))
    }

    fn theta(&self, l: f64) -> Result<f64> {
        match self.config.liquidity {
            LiquidityBoundary::Floor => self.params.mean_reversion_level(l),
            LiquidityBoundary::AllowNegative => Ok(self.params.mean_reversion_level_extended(l)),
        }
    }

    /// Correlated Brownian increments `(δB^γ, δB^S, δB^L)`.
    fn increments(&self, rng: &mut ChaCha8Rng, flip: f64) -> [f64; 3] {
        let e: [f64; 3] = std::array::from_fn(|_| flip * rng.sample::<f64, _>(StandardNormal));
        let s = self.dt.sqrt();
        let f = &self.factor;
        [
            s * f[0][0] * e[0],
            s * (f[1][0] * e[0] + f[1][1] * e[1]),
            s * (f[2][0] * e[0] + f[2][1] * e[1] + f[2][2] * e[2]),
        ]
    }

    fn path(&self, index: usize, trades: Option<&mut Vec<TradeRecord>>) -> Result<PathOutcome> {
        let (stream, flip) = if self.config.antithetic {
            ((index / 2) as u64, if index % 2 == 1 { -1.0 } else { 1.0 })
        } else {
            (index as u64, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);

        let p = self.params;
        let dt = self.dt;
        let mut trades = trades;
        let mut l = self.config.l0;
        let mut t = self.config.t0;
        let mut total_cost = 0.0;
        let mut absorbed = false;
        // Wealth in ExpectedApprox mode; stock and bond values otherwise.
        let mut w = self.config.w0;
        let mut price = 1.0;
        let omega0 = self.control(w, l, t)?;
        let mut stock = omega0 * w;
        let mut bond = w - stock;

        'run: for j in 0..self.intervals {
            if self.config.cost_mode == CostMode::RealizedExact && j > 0 {
                w = stock + bond;
                let omega = self.control(w, l, t)?;
                // Trade value x solves x = ω(W − κ|x|) − stock. Start from the
                // frictionless sign; one correction is exact because
                // 1 + κω·sign > 0 keeps the sign.
                let frictionless = omega * w - stock;
                let x = frictionless / (1.0 + p.kappa * omega * frictionless.signum());
                let cost = p.kappa * x.abs();
                stock += x;
                bond -= x + cost;
                total_cost += cost;
                if let Some(log) = trades.as_deref_mut() {
                    log.push(TradeRecord {
                        t,
                        shares: x / price,
                        price,
                        cost,
                    });
                }
            }
            for _ in 0..self.config.substeps {
                let db = self.increments(&mut rng, flip);
                let shock = p.beta * l * db[0] + p.sigma_s * db[1];
                match self.config.cost_mode {
                    CostMode::ExpectedApprox => {
                        let omega = self.control(w, l, t)?;
                        let cost_rate = p.cost_coefficient(l) * omega * (1.0 - omega) * w;
                        w += (p.r * w + (p.mu - p.r) * omega * w - cost_rate) * dt + omega * w * shock;
                        total_cost += cost_rate * dt;
                    }
                    CostMode::RealizedExact => {
                        let growth = p.mu * dt + shock;
                        stock += stock * growth;
                        price += price * growth;
                        bond += p.r * bond * dt;
                        w = stock + bond;
                    }
                }
                l += p.alpha * (self.theta(l)? - l) * dt + p.sigma_l * db[2];
                if self.config.liquidity == LiquidityBoundary::Floor {
                    l = l.max(0.0);
                }
                t += dt;
                if let Some(floor) = self.floor {
                    if !(w > floor) {
                        w = floor;
                        absorbed = true;
                        break 'run;
                    }
                }
            }
        }
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("terminal wealth on path {index}")));
        }
        Ok(PathOutcome {
            terminal_wealth: w,
            utility: self.utility.value(w)?,
            total_cost,
            terminal_l: l,
            absorbed,
        })
    }
}

/// Simulates every path; outcomes are in path order and independent of
/// thread scheduling.
pub fn simulate_paths<P>(
    params: &ModelParams,
    utility: &Utility,
    policy: &P,
    config: &PathConfig,
) -> Result<Vec<PathOutcome>>
where
    P: Fn(f64, f64, f64) -> f64 + Sync,
{
    let sim = Simulation::new(params, utility, policy, config)?;
    (0..config.n_paths).into_par_iter().map(|i| sim.path(i, None)).collect()
}

/// One path with its rebalancing trades, in `RealizedExact` mode whatever
/// `config.cost_mode` says.
pub fn simulate_trades<P>(
    params: &ModelParams,
    utility: &Utility,
    policy: &P,
    config: &PathConfig,
    index: usize,
) -> Result<(PathOutcome, Vec<TradeRecord>)>
where
    P: Fn(f64, f64, f64) -> f64 + Sync,
{
    let config = PathConfig {
        cost_mode: CostMode::RealizedExact,
        ..*config
    };
    let sim = Simulation::new(params, utility, policy, &config)?;
    let mut trades = Vec::new();
    let outcome = sim.path(index, Some(&mut trades))?;
    Ok((outcome, trades))
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl PathStats {
    pub fn from_outcomes(outcomes: &[PathOutcome], config: &PathConfig) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 {
            return Err(Error::Domain("no paths to summarize".into()));
        }
        let utilities: Vec<f64> = outcomes.iter().map(|o| o.utility).collect();
        let samples: Vec<f64> = if config.antithetic && n >= 2 {
            let mut s: Vec<f64> = utilities.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect();
            if n % 2 == 1 {
                s.push(utilities[n - 1]);
            }
            s
        } else {
            utilities.clone()
        };
        let m = samples.len() as f64;
        let mean_utility = pairwise_sum(&utilities) / n as f64;
        let sample_mean = pairwise_sum(&samples) / m;
        let deviations: Vec<f64> = samples.iter().map(|u| (u - sample_mean).powi(2)).collect();
        let variance = if samples.len() > 1 {
            pairwise_sum(&deviations) / (m - 1.0)
        } else {
            0.0
        };
        let mut wealth: Vec<f64> = outcomes.iter().map(|o| o.terminal_wealth).collect();
        wealth.sort_by(f64::total_cmp);
        let costs: Vec<f64> = outcomes.iter().map(|o| o.total_cost).collect();
        Ok(Self {
            n_paths: n,
            mean_utility,
            std_error: (variance / m).sqrt(),
            wealth_quantiles: [0.05, 0.25, 0.5, 0.75, 0.95]
                .iter()
                .map(|&q| (q, quantile(&wealth, q)))
                .collect(),
            mean_cost: pairwise_sum(&costs) / n as f64,
            absorbed: outcomes.iter().filter(|o| o.absorbed).count(),
            seed: config.seed,
            cost_mode: config.cost_mode,
        })
    }

    /// Single-row CSV after the schema line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(STATS_SCHEMA);
        out.push('\n');
        out.push_str("n_paths,seed,cost_mode,mean_utility,std_error,mean_cost,absorbed");
        for (q, _) in &self.wealth_quantiles {
            let _ = write!(out, ",W_q{:02}", (q * 100.0).round() as u32);
        }
        out.push('\n');
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            self.n_paths,
            self.seed,
            self.cost_mode.name(),
            self.mean_utility,
            self.std_error,
            self.mean_cost,
            self.absorbed
        );
        for (_, w) in &self.wealth_quantiles {
            let _ = write!(out, ",{w}");
        }
        out.push('\n');
        out
    }
}

/// Per-path dump `path_id,W_T,utility,total_cost`.
pub fn paths_to_csv(outcomes: &[PathOutcome]) -> String {
    let mut out = String::new();
    out.push_str(PATHS_SCHEMA);
    out.push('\n');
    out.push_str("path_id,W_T,utility,total_cost\n");
    for (i, o) in outcomes.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", o.terminal_wealth, o.utility, o.total_cost);
    }
    out
}

pub fn write_paths(path: &Path, outcomes: &[PathOutcome]) -> Result<()> {
    crate::io::write_atomic(path, paths_to_csv(outcomes).as_bytes())
}

pub fn simulate<P>(params: &ModelParams, utility: &Utility, policy: &P, config: &PathConfig) -> Result<PathStats>
where
    P: Fn(f64, f64, f64) -> f64 + Sync,
{
    PathStats::from_outcomes(&simulate_paths(params, utility, policy, config)?, config)
}

/// Simulates under a tabulated policy, interpolated multilinearly and
/// clamped to the nearest face outside the grid. The initial state must lie
/// inside the grid's `(W, L)` range.
pub fn evaluate_policy_surface(
    surface: &PolicySurface,
    params: &ModelParams,
    utility: &Utility,
    config: &PathConfig,
) -> Result<PathStats> {
    surface.validate()?;
    let axes = &surface.axes;
    let inside = |axis: &[f64], x: f64| axis[0] <= x && x <= axis[axis.len() - 1];
    if !inside(&axes.w, config.w0) || !inside(&axes.l, config.l0) {
        return Err(Error::Shape(format!(
            "initial state (W, L) = ({}, {}) lies outside the surface grid W ∈ [{}, {}], L ∈ [{}, {}]",
            config.w0,
            config.l0,
            axes.w[0],
            axes.w[axes.w.len() - 1],
            axes.l[0],
            axes.l[axes.l.len() - 1]
        )));
    }
    let policy = |w: f64, l: f64, t: f64| surface.interpolate([w, l, t]);
    simulate(params, utility, &policy, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::GridAxes;

    #[test]
    fn cholesky_identity_and_defaults() {
        let f = cholesky3(0.0, 0.0, 0.0).unwrap();
        assert_eq!(f, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let m = crate::market::correlation_matrix(0.2, 0.5, 0.3);
        let f = cholesky3(0.2, 0.5, 0.3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| f[i][k] * f[j][k]).sum();
                assert!((v - m[i][j]).abs() < 1e-12);
            }
            for j in i + 1..3 {
                assert_eq!(f[i][j], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rank_deficient_and_indefinite() {
        let f = cholesky3(1.0, 0.4, 0.4).unwrap();
        assert_eq!(f[1][1], 0.0);
        assert!(cholesky3(0.9, -0.9, 0.9).is_err());
    }

    #[test]
    fn all_bond_grows_at_the_riskless_rate() {
        let p = ModelParams::default();
        for mode in [CostMode::ExpectedApprox, CostMode::RealizedExact] {
            let cfg = PathConfig {
                n_paths: 200,
                cost_mode: mode,
                ..Default::default()
            };
            let out = simulate_paths(&p, &Utility::default(), &|_, _, _| 0.0, &cfg).unwrap();
            let euler = cfg.w0 * (1.0 + p.r * p.delta_t).powi(12);
            for o in &out {
                assert!((o.terminal_wealth - euler).abs() < 1e-12);
                assert_eq!(o.total_cost, 0.0);
            }
        }
        // Euler compounding approaches W0·e^{rT} as the step shrinks.
        let exact = 2.5 * p.r.exp();
        let mut previous = f64::INFINITY;
        for substeps in [1, 4, 16, 64] {
            let cfg = PathConfig {
                n_paths: 1,
                substeps,
                ..Default::default()
            };
            let w = simulate_paths(&p, &Utility::default(), &|_, _, _| 0.0, &cfg).unwrap()[0].terminal_wealth;
            let gap = (w - exact).abs();
            // Relative gap of (1 + rΔ)^n against e^{rT} is at most r²TΔ/2.
            assert!(gap < previous && gap <= exact * 0.5 * p.r * p.r / (12.0 * substeps as f64));
            previous = gap;
        }
    }

    #[test]
    fn statistics_are_reproducible() {
        let p = ModelParams::default();
        let cfg = PathConfig {
            n_paths: 500,
            seed: 7,
            ..Default::default()
        };
        let a = simulate(&p, &Utility::default(), &|_, _, _| 0.375, &cfg).unwrap();
        let b = simulate(&p, &Utility::default(), &|_, _, _| 0.375, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        let c = simulate(
            &p,
            &Utility::default(),
            &|_, _, _| 0.375,
            &PathConfig { seed: 8, ..cfg },
        )
        .unwrap();
        assert_ne!(a.mean_utility, c.mean_utility);
    }

    #[test]
    fn antithetic_pairs_mirror_noise() {
        let p = ModelParams {
            sigma_l: 0.0,
            beta: 0.0,
            kappa: 0.0,
            ..Default::default()
        };
        let cfg = PathConfig {
            n_paths: 2,
            antithetic: true,
            ..Default::default()
        };
        let out = simulate_paths(&p, &Utility::Log, &|_, _, _| 0.5, &cfg).unwrap();
        // Log wealth increments are odd in the noise up to the drift and
        // second-order terms, so the pair straddles the drift-only path.
        let drift_only = 2.5 * (1.0 + (p.r + 0.5 * (p.mu - p.r)) * p.delta_t).powi(12);
        let (lo, hi) = if out[0].terminal_wealth < out[1].terminal_wealth {
            (0, 1)
        } else {
            (1, 0)
        };
        assert!(out[lo].terminal_wealth < drift_only && drift_only < out[hi].terminal_wealth);
    }

    #[test]
    fn realized_costs_are_nonnegative_and_logged() {
        let p = ModelParams::default();
        let cfg = PathConfig {
            n_paths: 1,
            seed: 3,
            ..Default::default()
        };
        let (outcome, trades) = simulate_trades(&p, &Utility::default(), &|_, _, _| 0.3, &cfg, 0).unwrap();
        assert_eq!(trades.len(), 11);
        assert!(trades.iter().all(|t| t.cost >= 0.0 && t.price > 0.0));
        let total: f64 = trades.iter().map(|t| t.cost).sum();
        assert!((total - outcome.total_cost).abs() < 1e-15);
        let csv = paths_to_csv(&[outcome]);
        assert!(csv.starts_with(PATHS_SCHEMA));
    }

    #[test]
    fn crra_paths_absorb_at_the_floor() {
        let p = ModelParams {
            sigma_s: 3.0,
            delta_t: 1.0,
            ..Default::default()
        };
        let cfg = PathConfig {
            n_paths: 2000,
            ..Default::default()
        };
        let stats = simulate(&p, &Utility::Log, &|_, _, _| 1.0, &cfg).unwrap();
        assert!(stats.absorbed > 0);
        assert!(stats.wealth_quantiles[0].1 >= 0.99 * 2.5e-6);
    }

    #[test]
    fn surface_policy_must_cover_the_start() {
        let axes = GridAxes::new(vec![1.0, 4.5], vec![0.1, 1.5], vec![0.1, 0.9]).unwrap();
        let surface = PolicySurface::constant(axes, 0.375);
        let p = ModelParams::default();
        let cfg = PathConfig {
            n_paths: 10,
            ..Default::default()
        };
        assert!(evaluate_policy_surface(&surface, &p, &Utility::default(), &cfg).is_ok());
        let outside = PathConfig { w0: 5.0, ..cfg };
        assert!(evaluate_policy_surface(&surface, &p, &Utility::default(), &outside).is_err());
    }

    #[test]
    fn config_is_validated() {
        let p = ModelParams::default();
        let policy = |_: f64, _: f64, _: f64| 0.0;
        for cfg in [
            PathConfig {
                n_paths: 0,
                ..Default::default()
            },
            PathConfig {
                substeps: 0,
                ..Default::default()
            },
            PathConfig {
                t0: 1.0,
                ..Default::default()
            },
        ] {
            assert!(simulate(&p, &Utility::default(), &policy, &cfg).is_err());
        }
        let nan = |_: f64, _: f64, _: f64| f64::NAN;
        assert!(simulate(
            &p,
            &Utility::default(),
            &nan,
            &PathConfig {
                n_paths: 1,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 4950.0);
    }
}
