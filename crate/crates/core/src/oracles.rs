//! Reference solutions the deep solver is checked against: Merton's
//! closed forms for the frictionless market, and a finite-difference
//! Howard solver for the power-utility problem reduced to `(L, t)`.
//!
//! For power utility the value factors as `Q = (W^γ/γ)·P(L, t)` and the
//! generator becomes
//!
//! ```text
//! P_t + [r + (μ−r)ω − c(L)ω(1−ω)]γP + ½γ(γ−1)Σ²(L)ω²P
//!     + [α(θ(L)−L) + (ρ₂σ_S+ρ₃βL)σ_L·ωγ]P_L + ½σ_L²P_LL
//! ```
//!
//! with `P(L, T) = 1`. The optimal fraction does not depend on `W`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hjb::{apply_operator, pointwise_optimal_control, QuadraticInOmega};
use crate::market::{ModelParams, StatePoint, Utility};
use crate::net::InputJet;
use crate::surface::linspace;

pub const FD_SCHEMA: &str = "# schema: liqhjb-fd v1";

/// A frictionless optimal fraction, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertonPolicy {
    pub omega: f64,
    /// The unconstrained optimum before clamping.
    pub raw: f64,
    pub clamped: bool,
}

fn excess_over_variance(params: &ModelParams) -> f64 {
    (params.mu - params.r) / (params.sigma_s * params.sigma_s)
}

/// Frictionless optimal fraction of wealth in the stock. Liquidity and
/// cost parameters are ignored.
pub fn merton_policy(utility: &Utility, params: &ModelParams, w: f64, t: f64) -> Result<MertonPolicy> {
    utility.validate()?;
    if !(w > 0.0) {
        return Err(Error::Domain(format!("Merton policy needs W > 0, got {w}")));
    }
    let tau = params.maturity - t;
    let raw = match *utility {
        Utility::Power { gamma } => excess_over_variance(params) / (1.0 - gamma),
        Utility::Log => excess_over_variance(params),
        Utility::Exponential { eta } => (-params.r * tau).exp() * excess_over_variance(params) / (eta * w),
    };
    let omega = raw.clamp(0.0, 1.0);
    Ok(MertonPolicy {
        omega,
        raw,
        clamped: omega != raw,
    })
}

/// `exp(γ[r + (μ−r)²/(2σ²(1−γ))](T−t))`, the liquidity factor `P` of the
/// frictionless power-utility value.
pub fn merton_factor_power(params: &ModelParams, gamma: f64, t: f64) -> f64 {
    let k = params.mu - params.r;
    let rate = params.r + k * k / (2.0 * params.sigma_s * params.sigma_s * (1.0 - gamma));
    (gamma * rate * (params.maturity - t)).exp()
}

/// `(W^γ/γ)·exp(γ[r + (μ−r)²/(2σ²(1−γ))](T−t))`.
pub fn merton_value_power(params: &ModelParams, gamma: f64, w: f64, t: f64) -> Result<f64> {
    Utility::Power { gamma }.validate()?;
    if !(w > 0.0) {
        return Err(Error::Domain(format!("power utility needs W > 0, got {w}")));
    }
    Ok(w.powf(gamma) / gamma * merton_factor_power(params, gamma, t))
}

/// Closed-form frictionless value with its `(W, t)` derivatives. Valid
/// where the unconstrained optimum lies in `[0, 1]`; elsewhere it is the
/// value of the unconstrained problem.
pub fn merton_jet(utility: &Utility, params: &ModelParams, w: f64, t: f64) -> Result<InputJet> {
    utility.validate()?;
    if !(w > 0.0) && utility.requires_positive_wealth() {
        return Err(Error::Domain(format!(
            "{} utility needs W > 0, got {w}",
            utility.name()
        )));
    }
    let k = params.mu - params.r;
    let s2 = params.sigma_s * params.sigma_s;
    let tau = params.maturity - t;
    let jet = match *utility {
        Utility::Power { gamma } => {
            let rate = params.r + k * k / (2.0 * s2 * (1.0 - gamma));
            let e = (gamma * rate * tau).exp();
            let q = w.powf(gamma) / gamma * e;
            InputJet {
                value: q,
                d_w: w.powf(gamma - 1.0) * e,
                d_ww: (gamma - 1.0) * w.powf(gamma - 2.0) * e,
                d_t: -gamma * rate * q,
                ..Default::default()
            }
        }
        Utility::Log => {
            let rate = params.r + k * k / (2.0 * s2);
            InputJet {
                value: w.ln() + rate * tau,
                d_w: 1.0 / w,
                d_ww: -1.0 / (w * w),
                d_t: -rate,
                ..Default::default()
            }
        }
        Utility::Exponential { eta } => {
            let a = eta * (params.r * tau).exp();
            let b = k * k / (2.0 * s2);
            let e = (-a * w - b * tau).exp();
            InputJet {
                value: 1.0 - e,
                d_w: a * e,
                d_ww: -a * a * e,
                d_t: -(params.r * a * w + b) * e,
                ..Default::default()
            }
        }
    };
    Ok(jet)
}

pub fn merton_value(utility: &Utility, params: &ModelParams, w: f64, t: f64) -> Result<f64> {
    Ok(merton_jet(utility, params, w, t)?.value)
}

/// A Merton solution whose value has been checked against the frictionless
/// generator on a probe grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MertonSolution {
    pub utility: Utility,
    /// The market with liquidity and costs switched off.
    pub params: ModelParams,
    /// Largest relative generator residual over the probe grid.
    pub certified_residual: f64,
}

impl MertonSolution {
    pub const CERTIFICATION_TOL: f64 = 1e-8;

    pub fn new(utility: Utility, params: &ModelParams) -> Result<Self> {
        utility.validate()?;
        let mut frictionless = params.clone();
        frictionless.beta = 0.0;
        frictionless.kappa = 0.0;
        frictionless.sigma_l = 0.0;
        frictionless.validate()?;
        let mut worst: f64 = 0.0;
        let mut probed = 0;
        for w in linspace(0.5, 5.0, 10) {
            for t in linspace(0.0, frictionless.maturity, 6) {
                let policy = merton_policy(&utility, &frictionless, w, t)?;
                if policy.clamped {
                    continue;
                }
                let jet = merton_jet(&utility, &frictionless, w, t)?;
                let point = StatePoint::new(w, frictionless.theta_bar, t);
                let residual = apply_operator(&frictionless, point, &jet, policy.omega)?;
                let c = frictionless.hjb_coefficients(point, policy.omega)?;
                let scale = jet.d_t.abs() + (c.a_w * jet.d_w).abs() + (c.a_ww * jet.d_ww).abs();
                worst = worst.max(residual.abs() / scale.max(f64::MIN_POSITIVE));
                probed += 1;
            }
        }
        if probed == 0 {
            return Err(Error::Domain(format!(
                "no probe point has an interior Merton fraction for {utility:?}"
            )));
        }
        if !(worst < Self::CERTIFICATION_TOL) {
            return Err(Error::Domain(format!(
                "Merton value fails the generator check: relative residual {worst:e}"
            )));
        }
        Ok(Self {
            utility,
            params: frictionless,
            certified_residual: worst,
        })
    }

    pub fn policy(&self, w: f64, t: f64) -> Result<MertonPolicy> {
        merton_policy(&self.utility, &self.params, w, t)
    }

    pub fn value(&self, w: f64, t: f64) -> Result<f64> {
        merton_value(&self.utility, &self.params, w, t)
    }
}

/// `P` and its derivatives at one `(L, t)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PJet {
    pub p: f64,
    pub p_t: f64,
    pub p_l: f64,
    pub p_ll: f64,
}

/// Reduced generator as `Aω² + Bω + C` at liquidity level `l`.
pub fn reduced_quadratic(params: &ModelParams, gamma: f64, l: f64, jet: &PJet) -> Result<QuadraticInOmega> {
    let theta = params.mean_reversion_level(l)?;
    let cost = params.cost_coefficient(l);
    let gp = gamma * jet.p;
    Ok(QuadraticInOmega {
        a: gp * (cost + 0.5 * (gamma - 1.0) * params.total_variance(l)),
        b: gp * (params.mu - params.r - cost) + params.cross_coefficient(l) * gamma * jet.p_l,
        c: jet.p_t
            + params.r * gp
            + params.alpha * (theta - l) * jet.p_l
            + 0.5 * params.sigma_l * params.sigma_l * jet.p_ll,
    })
}

/// The reduced generator applied to `P` at control `omega`.
pub fn reduced_operator(params: &ModelParams, gamma: f64, l: f64, jet: &PJet, omega: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Domain(format!("control must lie in [0, 1], got {omega}")));
    }
    if ![jet.p, jet.p_t, jet.p_l, jet.p_ll].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("reduced jet at L = {l}: {jet:?}")));
    }
    Ok(reduced_quadratic(params, gamma, l, jet)?.eval(omega))
}

/// Uniform `(L, t)` grid for [`solve_reduced_fd`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdGridSpec {
    pub l_min: f64,
    pub l_max: f64,
    pub n_l: usize,
    /// Number of implicit time steps.
    pub n_t: usize,
    /// Cap on policy iterations per time step.
    pub max_howard: usize,
}

impl FdGridSpec {
    /// Pads `[lo, hi]` by a quarter of its width on each side, without going
    /// below `L = 0`.
    pub fn padded(lo: f64, hi: f64, n_l: usize, n_t: usize) -> Self {
        let pad = 0.25 * (hi - lo);
        Self {
            l_min: (lo - pad).max(0.0),
            l_max: hi + pad,
            n_l,
            n_t,
            max_howard: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_l < 50 || self.n_t < 50 {
            return Err(Error::Domain(format!(
                "FD grid needs n_L, n_t >= 50, got {} and {}",
                self.n_l, self.n_t
            )));
        }
        if !(self.l_min >= 0.0 && self.l_max > self.l_min && self.l_max.is_finite()) {
            return Err(Error::Domain(format!(
                "FD liquidity range [{}, {}] is invalid",
                self.l_min, self.l_max
            )));
        }
        if self.max_howard == 0 {
            return Err(Error::Domain("max_howard must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for FdGridSpec {
    /// The comparison range `L ∈ [0.1, 1.5]`, padded.
    fn default() -> Self {
        Self::padded(0.1, 1.5, 201, 200)
    }
}

/// Finite-difference solution of the reduced problem. `p` and `omega` are
/// stored time-major: entry `it·n_L + il`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    pub l: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub omega: Vec<f64>,
    /// Policy iterations used at each time step, latest time first.
    pub howard_iterations: Vec<usize>,
    /// Largest relative move of `P` against the improvement direction
    /// between successive policy iterations. Zero up to rounding for a
    /// monotone scheme.
    pub howard_regression: f64,
}

fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let i = axis.partition_point(|&a| a <= x) - 1;
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
}

impl Grid1D {
    pub fn n_l(&self) -> usize {
        self.l.len()
    }

    fn interpolate(&self, values: &[f64], l: f64, t: f64) -> f64 {
        let n = self.n_l();
        let (il, fl) = bracket(&self.l, l);
        let (it, ft) = bracket(&self.t, t);
        let at = |i: usize, j: usize| values[(it + j).min(self.t.len() - 1) * n + (il + i).min(n - 1)];
        let lo = at(0, 0) * (1.0 - fl) + at(1, 0) * fl;
        let hi = at(0, 1) * (1.0 - fl) + at(1, 1) * fl;
        lo * (1.0 - ft) + hi * ft
    }

    /// Bilinear interpolation, clamped to the grid.
    pub fn p_at(&self, l: f64, t: f64) -> f64 {
        self.interpolate(&self.p, l, t)
    }

    pub fn omega_at(&self, l: f64, t: f64) -> f64 {
        self.interpolate(&self.omega, l, t)
    }

    /// CSV `L,t,P,omega` preceded by the schema line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(FD_SCHEMA);
        out.push('\n');
        out.push_str("L,t,P,omega\n");
        let n = self.n_l();
        for (it, t) in self.t.iter().enumerate() {
            for (il, l) in self.l.iter().enumerate() {
                let k = it * n + il;
                let _ = writeln!(out, "{l},{t},{},{}", self.p[k], self.omega[k]);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// ω-independent pieces of the discrete reduced generator at one node.
struct NodeCoefficients {
    /// `γ·(cost + ½(γ−1)Σ²)`: ω² coefficient of the reaction term.
    react_2: f64,
    /// `γ·(μ − r − cost)`.
    react_1: f64,
    react_0: f64,
    drift_0: f64,
    /// Drift per unit ω.
    drift_1: f64,
}

impl NodeCoefficients {
    fn new(params: &ModelParams, gamma: f64, l: f64) -> Result<Self> {
        let theta = params.mean_reversion_level(l)?;
        let cost = params.cost_coefficient(l);
        Ok(Self {
            react_2: gamma * (cost + 0.5 * (gamma - 1.0) * params.total_variance(l)),
            react_1: gamma * (params.mu - params.r - cost),
            react_0: gamma * params.r,
            drift_0: params.alpha * (theta - l),
            drift_1: params.cross_coefficient(l) * gamma,
        })
    }

    fn reaction(&self, omega: f64) -> f64 {
        (self.react_2 * omega + self.react_1) * omega + self.react_0
    }

    fn drift(&self, omega: f64) -> f64 {
        self.drift_0 + self.drift_1 * omega
    }
}

struct Discretization {
    nodes: Vec<NodeCoefficients>,
    h: f64,
    diffusion: f64,
    /// +1 when the value is maximized, −1 when minimized (`γ < 0`).
    sign: f64,
}

impl Discretization {
    /// First difference the drift at node `i` uses: forward when the drift
    /// is positive, backward otherwise, and always inward at the ends.
    fn upwind_forward(&self, i: usize, drift: f64) -> bool {
        let n = self.nodes.len();
        i == 0 || (i + 1 < n && drift > 0.0)
    }

    /// Spatial part of the generator at node `i` for `P`.
    fn hamiltonian(&self, p: &[f64], i: usize, omega: f64) -> f64 {
        let node = &self.nodes[i];
        let drift = node.drift(omega);
        let dp = if self.upwind_forward(i, drift) {
            (p[i + 1] - p[i]) / self.h
        } else {
            (p[i] - p[i - 1]) / self.h
        };
        let mut h = node.reaction(omega) * p[i] + drift * dp;
        if i > 0 && i + 1 < p.len() {
            h += self.diffusion * (p[i - 1] - 2.0 * p[i] + p[i + 1]) / (self.h * self.h);
        }
        h
    }

    /// Maximizer of `sign·H_i(ω)` over `[0, 1]`. The discrete generator is
    /// quadratic in ω on each side of the drift's sign change, so the
    /// optimum is a piece's vertex, the switch point or an endpoint.
    /// `current` is kept unless a candidate beats it by more than rounding,
    /// which stops ties from cycling.
    fn greedy(&self, p: &[f64], i: usize, current: Option<f64>) -> f64 {
        let node = &self.nodes[i];
        let n = p.len();
        let mut candidates = [0.0, 1.0, 0.0, 0.0, 0.0];
        let mut len = 2;
        if node.drift_1 != 0.0 {
            let switch = -node.drift_0 / node.drift_1;
            if (0.0..=1.0).contains(&switch) {
                candidates[len] = switch;
                len += 1;
            }
        }
        let diffs = [
            (i + 1 < n).then(|| (p[i + 1] - p[i]) / self.h),
            (i > 0).then(|| (p[i] - p[i - 1]) / self.h),
        ];
        for dp in diffs.into_iter().flatten() {
            let q = QuadraticInOmega {
                a: self.sign * node.react_2 * p[i],
                b: self.sign * (node.react_1 * p[i] + node.drift_1 * dp),
                c: 0.0,
            };
            candidates[len] = pointwise_optimal_control(&q);
            len += 1;
        }
        let mut best = candidates[0];
        let mut best_h = self.sign * self.hamiltonian(p, i, best);
        for &omega in &candidates[1..len] {
            let h = self.sign * self.hamiltonian(p, i, omega);
            if h > best_h {
                best = omega;
                best_h = h;
            }
        }
        if let Some(current) = current {
            let h = self.sign * self.hamiltonian(p, i, current);
            if best_h - h <= 1e-13 * (h.abs() + p[i].abs()) {
                return current;
            }
        }
        best
    }

    /// Solves `(I − Δt·A(ω))P = rhs` for the fixed policy `omegas`.
    fn implicit_step(&self, omegas: &[f64], rhs: &[f64], dt: f64, time: f64, out: &mut [f64]) -> Result<()> {
        let n = self.nodes.len();
        let (h, h2) = (self.h, self.h * self.h);
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 0..n {
            let node = &self.nodes[i];
            let drift = node.drift(omegas[i]);
            // Row of A; the system matrix is I − Δt·A.
            let (mut a_lo, mut a_di, mut a_up) = (0.0, node.reaction(omegas[i]), 0.0);
            if self.upwind_forward(i, drift) {
                a_di -= drift / h;
                a_up += drift / h;
            } else {
                a_di += drift / h;
                a_lo -= drift / h;
            }
            if i > 0 && i + 1 < n {
                a_lo += self.diffusion / h2;
                a_di -= 2.0 * self.diffusion / h2;
                a_up += self.diffusion / h2;
            }
            lower[i] = -dt * a_lo;
            diag[i] = 1.0 - dt * a_di;
            upper[i] = -dt * a_up;
        }
        // Thomas algorithm.
        let mut c_prime = vec![0.0; n];
        let mut d_prime = vec![0.0; n];
        for i in 0..n {
            let denom = diag[i] - if i > 0 { lower[i] * c_prime[i - 1] } else { 0.0 };
            if !(denom.abs() > 1e-300) || !denom.is_finite() {
                return Err(Error::LinearSolve(format!(
                    "zero pivot at node {i} (L index), t = {time}, omega = {}",
                    omegas[i]
                )));
            }
            c_prime[i] = upper[i] / denom;
            let carried = if i > 0 { lower[i] * d_prime[i - 1] } else { 0.0 };
            d_prime[i] = (rhs[i] - carried) / denom;
        }
        out[n - 1] = d_prime[n - 1];
        for i in (0..n - 1).rev() {
            out[i] = d_prime[i] - c_prime[i] * out[i + 1];
        }
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::LinearSolve(format!("non-finite P at node {i}, t = {time}")));
        }
        Ok(())
    }
}

/// Backward implicit Euler on the reduced power-utility problem with
/// Howard policy iteration at each step. `P_LL = 0` at both ends of the
/// `L` range.
pub fn solve_reduced_fd(params: &ModelParams, gamma: f64, spec: &FdGridSpec) -> Result<Grid1D> {
    params.validate()?;
    Utility::Power { gamma }.validate()?;
    spec.validate()?;
    let l = linspace(spec.l_min, spec.l_max, spec.n_l);
    let t = linspace(0.0, params.maturity, spec.n_t + 1);
    let n = spec.n_l;
    let dt = params.maturity / spec.n_t as f64;
    let disc = Discretization {
        nodes: l
            .iter()
            .map(|&x| NodeCoefficients::new(params, gamma, x))
            .collect::<Result<_>>()?,
        h: l[1] - l[0],
        diffusion: 0.5 * params.sigma_l * params.sigma_l,
        sign: gamma.signum(),
    };

    let mut p = vec![0.0; (spec.n_t + 1) * n];
    let mut omega = vec![0.0; (spec.n_t + 1) * n];
    let terminal = spec.n_t * n;
    p[terminal..].fill(1.0);
    for i in 0..n {
        omega[terminal + i] = disc.greedy(&p[terminal..], i, None);
    }

    let mut howard_iterations = Vec::with_capacity(spec.n_t);
    let mut howard_regression: f64 = 0.0;
    let mut current = vec![0.0; n];
    let mut previous = vec![0.0; n];
    for step in (0..spec.n_t).rev() {
        let (head, tail) = p.split_at_mut((step + 1) * n);
        let rhs = &tail[..n];
        let mut policy = omega[(step + 1) * n..(step + 2) * n].to_vec();
        let mut iterations = 0;
        loop {
            iterations += 1;
            disc.implicit_step(&policy, rhs, dt, t[step], &mut current)?;
            if iterations > 1 {
                for i in 0..n {
                    let regress = disc.sign * (previous[i] - current[i]) / current[i].abs().max(1e-300);
                    howard_regression = howard_regression.max(regress);
                }
            }
            let mut moved: f64 = 0.0;
            for i in 0..n {
                let next = disc.greedy(&current, i, Some(policy[i]));
                moved = moved.max((next - policy[i]).abs());
                policy[i] = next;
            }
            if moved <= 1e-12 {
                break;
            }
            if iterations >= spec.max_howard {
                return Err(Error::LinearSolve(format!(
                    "policy iteration at t = {} still moving by {moved:e} after {iterations} solves",
                    t[step]
                )));
            }
            previous.copy_from_slice(&current);
        }
        head[step * n..].copy_from_slice(&current);
        omega[step * n..(step + 1) * n].copy_from_slice(&policy);
        howard_iterations.push(iterations);
    }
    Ok(Grid1D {
        l,
        t,
        p,
        omega,
        howard_iterations,
        howard_regression,
    })
}
