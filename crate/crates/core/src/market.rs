//! Market, liquidity and cost model.
//!
//! The stock follows `dS = μS dt + βLS dB^γ + σ_S S dB^S` and the illiquidity
//! level follows the mean-reverting `dL = α(θ(L) − L) dt + σ_L dB^L`, where the
//! reversion level `θ(L) = θ̄ + κλL^ζ` couples the proportional fee rate κ into
//! liquidity. Rebalancing every `δt` years costs, in expectation,
//! `c(L)·ω(1−ω)·W` per unit time.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A point `(W, L, t)` of the state-time domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePoint {
    pub w: f64,
    pub l: f64,
    pub t: f64,
}

impl StatePoint {
    pub const fn new(w: f64, l: f64, t: f64) -> Self {
        Self { w, l, t }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w, self.l, self.t]
    }

    pub fn from_array(x: [f64; 3]) -> Self {
        Self::new(x[0], x[1], x[2])
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.l.is_finite() && self.t.is_finite()
    }
}

/// Every market, liquidity and cost coefficient. Rates are annualized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Risk-free rate.
    pub r: f64,
    /// Stock drift.
    pub mu: f64,
    pub sigma_s: f64,
    /// Sensitivity of the stock to the illiquidity level.
    pub beta: f64,
    /// Correlation of `B^γ` and `B^S`.
    pub rho1: f64,
    /// Correlation of `B^L` and `B^S`.
    pub rho2: f64,
    /// Correlation of `B^γ` and `B^L`.
    pub rho3: f64,
    /// Mean-reversion speed of liquidity.
    pub alpha: f64,
    /// Base illiquidity level, excluding the fee feedback.
    pub theta_bar: f64,
    pub sigma_l: f64,
    /// Cost-sensitivity coefficient of the reversion level.
    pub lambda: f64,
    /// Proportional fee rate.
    pub kappa: f64,
    /// Concavity exponent of `g(L) = L^ζ`.
    pub zeta: f64,
    /// Rebalancing interval in years.
    pub delta_t: f64,
    /// Investment horizon `T` in years.
    pub maturity: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            r: 0.02,
            mu: 0.05,
            sigma_s: 0.4,
            beta: 0.3,
            rho1: 0.2,
            rho2: 0.5,
            rho3: 0.3,
            alpha: 2.0,
            theta_bar: 0.6,
            sigma_l: 0.2,
            lambda: 5.0,
            kappa: 0.004,
            zeta: 0.5,
            delta_t: 1.0 / 12.0,
            maturity: 1.0,
        }
    }
}

/// Coefficients of the controlled generator at one point:
/// `a_t ∂_t + a_w ∂_W + a_ww ∂²_W + a_l ∂_L + a_ll ∂²_L + a_wl ∂_W∂_L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbCoefficients {
    pub a_t: f64,
    pub a_w: f64,
    pub a_ww: f64,
    pub a_l: f64,
    pub a_ll: f64,
    pub a_wl: f64,
}

impl ModelParams {
    /// Defaults with liquidity coupling, liquidity noise and fees switched
    /// off, which reduces the problem to Merton's.
    pub fn frictionless() -> Self {
        Self {
            beta: 0.0,
            kappa: 0.0,
            sigma_l: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("r", self.r),
            ("mu", self.mu),
            ("sigma_S", self.sigma_s),
            ("beta", self.beta),
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("rho3", self.rho3),
            ("alpha", self.alpha),
            ("theta_bar", self.theta_bar),
            ("sigma_L", self.sigma_l),
            ("lambda", self.lambda),
            ("kappa", self.kappa),
            ("zeta", self.zeta),
            ("delta_t", self.delta_t),
            ("T", self.maturity),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::InvalidParam {
                    name,
                    reason: format!("{v} is not finite"),
                });
            }
        }
        let check = |ok: bool, name: &'static str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParam {
                    name,
                    reason: reason.to_string(),
                })
            }
        };
        check(self.sigma_s > 0.0, "sigma_S", "must be > 0")?;
        check(self.sigma_l >= 0.0, "sigma_L", "must be >= 0")?;
        check(self.alpha >= 0.0, "alpha", "must be >= 0")?;
        check(self.beta >= 0.0, "beta", "must be >= 0")?;
        check((0.0..1.0).contains(&self.kappa), "kappa", "must lie in [0, 1)")?;
        check(self.delta_t > 0.0, "delta_t", "must be > 0")?;
        check(self.maturity > 0.0, "T", "must be > 0")?;
        check(self.zeta > 0.0 && self.zeta < 1.0, "zeta", "must lie in (0, 1)")?;
        for (name, rho) in [("rho1", self.rho1), ("rho2", self.rho2), ("rho3", self.rho3)] {
            check((-1.0..=1.0).contains(&rho), name, "must lie in [-1, 1]")?;
        }
        if !correlation_is_psd(self.rho1, self.rho2, self.rho3) {
            return Err(Error::InvalidParam {
                name: "rho1",
                reason: format!(
                    "correlation matrix for ({}, {}, {}) is not positive semidefinite",
                    self.rho1, self.rho2, self.rho3
                ),
            });
        }
        Ok(())
    }

    /// Correlation matrix of `(B^γ, B^S, B^L)`.
    pub fn correlation_matrix(&self) -> [[f64; 3]; 3] {
        correlation_matrix(self.rho1, self.rho2, self.rho3)
    }

    /// `θ(L) = θ̄ + κλL^ζ`.
    pub fn mean_reversion_level(&self, l: f64) -> Result<f64> {
        if !(l >= 0.0) {
            return Err(Error::Domain(format!("liquidity level must be >= 0, got {l}")));
        }
        Ok(self.theta_bar + self.kappa * self.lambda * l.powf(self.zeta))
    }

    /// Like [`Self::mean_reversion_level`] but extends `g(L) = 0` to `L < 0`,
    /// for simulations that let the OU process go negative.
    pub fn mean_reversion_level_extended(&self, l: f64) -> f64 {
        if l > 0.0 {
            self.theta_bar + self.kappa * self.lambda * l.powf(self.zeta)
        } else {
            self.theta_bar
        }
    }

    /// `Σ²(L) = β²L² + σ_S² + 2ρ₁σ_SβL`, the instantaneous variance of the
    /// stock return at illiquidity level `L`.
    pub fn total_variance(&self, l: f64) -> f64 {
        let bl = self.beta * l;
        bl * bl + self.sigma_s * self.sigma_s + 2.0 * self.rho1 * self.sigma_s * bl
    }

    /// Standard deviation of `(βL δB^γ + σ_S δB^S)/√δt`.
    pub fn shock_std(&self, l: f64) -> f64 {
        let a = self.beta * l + self.sigma_s * self.rho1;
        let b2 = (1.0 - self.rho1 * self.rho1) * self.sigma_s * self.sigma_s;
        (a * a + b2).sqrt()
    }

    /// `E|βL δB^γ + σ_S δB^S|` over one rebalancing interval.
    pub fn expected_abs_shock(&self, l: f64) -> f64 {
        (2.0 / PI).sqrt() * self.shock_std(l) * self.delta_t.sqrt()
    }

    /// `c(L) = √(2/(π δt))·κ·shock_std(L)`; the expected cost drift of the
    /// wealth process is `c(L)·ω(1−ω)·W`.
    pub fn cost_coefficient(&self, l: f64) -> f64 {
        (2.0 / (PI * self.delta_t)).sqrt() * self.kappa * self.shock_std(l)
    }

    /// Coefficient of the `∂_W∂_L` term per unit `ωW`: `(ρ₂σ_S + ρ₃βL)σ_L`.
    pub fn cross_coefficient(&self, l: f64) -> f64 {
        (self.rho2 * self.sigma_s + self.rho3 * self.beta * l) * self.sigma_l
    }

    pub fn hjb_coefficients(&self, point: StatePoint, omega: f64) -> Result<HjbCoefficients> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::Domain(format!("control must lie in [0, 1], got {omega}")));
        }
        if !(point.w >= 0.0) {
            return Err(Error::Domain(format!("wealth must be >= 0, got {}", point.w)));
        }
        let StatePoint { w, l, .. } = point;
        let theta = self.mean_reversion_level(l)?;
        let c = self.cost_coefficient(l);
        Ok(HjbCoefficients {
            a_t: 1.0,
            a_w: self.r * w + (self.mu - self.r) * omega * w - c * omega * (1.0 - omega) * w,
            a_ww: 0.5 * self.total_variance(l) * omega * omega * w * w,
            a_l: self.alpha * (theta - l),
            a_ll: 0.5 * self.sigma_l * self.sigma_l,
            a_wl: self.cross_coefficient(l) * omega * w,
        })
    }
}

pub(crate) fn correlation_matrix(rho1: f64, rho2: f64, rho3: f64) -> [[f64; 3]; 3] {
    [[1.0, rho1, rho3], [rho1, 1.0, rho2], [rho3, rho2, 1.0]]
}

/// Sylvester-style test on all principal minors, with a small tolerance so
/// that exactly singular (rank-deficient) matrices are accepted.
pub(crate) fn correlation_is_psd(rho1: f64, rho2: f64, rho3: f64) -> bool {
    const TOL: f64 = 1e-12;
    let minors2 = [1.0 - rho1 * rho1, 1.0 - rho2 * rho2, 1.0 - rho3 * rho3];
    let det = 1.0 + 2.0 * rho1 * rho2 * rho3 - rho1 * rho1 - rho2 * rho2 - rho3 * rho3;
    minors2.iter().all(|&m| m >= -TOL) && det >= -TOL
}

/// Terminal utility of the investor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    /// `W^γ/γ`, `γ < 1`, `γ ≠ 0`.
    Power { gamma: f64 },
    /// `ln W`.
    Log,
    /// `1 − e^{−ηW}`, `η > 0`.
    Exponential { eta: f64 },
}

impl Default for Utility {
    fn default() -> Self {
        Utility::Power { gamma: 0.5 }
    }
}

impl Utility {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Utility::Power { gamma } => {
                if !(gamma.is_finite() && gamma < 1.0 && gamma != 0.0) {
                    return Err(Error::InvalidParam {
                        name: "gamma",
                        reason: format!("must be finite, < 1 and non-zero, got {gamma}"),
                    });
                }
            }
            Utility::Log => {}
            Utility::Exponential { eta } => {
                if !(eta.is_finite() && eta > 0.0) {
                    return Err(Error::InvalidParam {
                        name: "eta",
                        reason: format!("must be > 0, got {eta}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Power and log utilities are only defined for positive wealth.
    pub fn requires_positive_wealth(&self) -> bool {
        !matches!(self, Utility::Exponential { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Utility::Power { .. } => "power",
            Utility::Log => "log",
            Utility::Exponential { .. } => "exp",
        }
    }

    fn check_domain(&self, w: f64) -> Result<()> {
        if !w.is_finite() {
            return Err(Error::Domain(format!("wealth must be finite, got {w}")));
        }
        if self.requires_positive_wealth() && w <= 0.0 {
            return Err(Error::Domain(format!(
                "{} utility needs positive wealth, got {w}",
                self.name()
            )));
        }
        Ok(())
    }

    pub fn value(&self, w: f64) -> Result<f64> {
        self.check_domain(w)?;
        Ok(match *self {
            Utility::Power { gamma } => w.powf(gamma) / gamma,
            Utility::Log => w.ln(),
            Utility::Exponential { eta } => 1.0 - (-eta * w).exp(),
        })
    }

    /// `U′(W)`.
    pub fn marginal(&self, w: f64) -> Result<f64> {
        self.check_domain(w)?;
        Ok(match *self {
            Utility::Power { gamma } => w.powf(gamma - 1.0),
            Utility::Log => 1.0 / w,
            Utility::Exponential { eta } => eta * (-eta * w).exp(),
        })
    }

    /// `U″(W)`.
    pub fn curvature(&self, w: f64) -> Result<f64> {
        self.check_domain(w)?;
        Ok(match *self {
            Utility::Power { gamma } => (gamma - 1.0) * w.powf(gamma - 2.0),
            Utility::Log => -1.0 / (w * w),
            Utility::Exponential { eta } => -eta * eta * (-eta * w).exp(),
        })
    }

    /// Inverse of `U′`: the wealth at which marginal utility equals `y > 0`.
    pub fn inverse_marginal(&self, y: f64) -> Result<f64> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::Domain(format!("marginal utility must be > 0, got {y}")));
        }
        Ok(match *self {
            Utility::Power { gamma } => y.powf(1.0 / (gamma - 1.0)),
            Utility::Log => 1.0 / y,
            Utility::Exponential { eta } => -(y / eta).ln() / eta,
        })
    }

    /// Arrow–Pratt relative risk aversion `−W·U″/U′`.
    pub fn relative_risk_aversion(&self, w: f64) -> Result<f64> {
        self.check_domain(w)?;
        Ok(match *self {
            Utility::Power { gamma } => 1.0 - gamma,
            Utility::Log => 1.0,
            Utility::Exponential { eta } => eta * w,
        })
    }

    /// Arrow–Pratt absolute risk aversion `−U″/U′`.
    pub fn absolute_risk_aversion(&self, w: f64) -> Result<f64> {
        self.check_domain(w)?;
        Ok(match *self {
            Utility::Power { gamma } => (1.0 - gamma) / w,
            Utility::Log => 1.0 / w,
            Utility::Exponential { eta } => eta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn reversion_level_table_values() {
        let p = ModelParams::default();
        assert_eq!(p.mean_reversion_level(0.0).unwrap(), 0.6);
        let p0 = ModelParams { kappa: 0.0, ..p };
        assert_eq!(p0.mean_reversion_level(0.6).unwrap(), 0.6);
        // 0.6 + 0.004·5·√0.6
        let expected = 0.6 + 0.02 * 0.6f64.sqrt();
        assert!(close(p.mean_reversion_level(0.6).unwrap(), expected, 1e-15));
        assert!(close(p.mean_reversion_level(0.6).unwrap(), 0.615492, 5e-7));
    }

    #[test]
    fn reversion_level_rejects_negative_liquidity() {
        let p = ModelParams::default();
        assert!(matches!(p.mean_reversion_level(-0.1), Err(Error::Domain(_))));
        assert!(p.mean_reversion_level(f64::NAN).is_err());
        assert_eq!(p.mean_reversion_level_extended(-0.1), p.theta_bar);
    }

    #[test]
    fn shock_std_values() {
        let p = ModelParams::default();
        let uncorrelated = ModelParams {
            beta: 0.0,
            rho1: 0.0,
            ..p
        };
        assert!(close(uncorrelated.shock_std(0.9), 0.4, 1e-15));
        // √(0.26² + 0.96·0.16)
        assert!(close(p.shock_std(0.6), (0.26f64.powi(2) + 0.96 * 0.16).sqrt(), 1e-15));
        assert!(close(p.shock_std(0.6), 0.470319, 5e-7));
        // at L = 0: √(0.08² + 0.1536) = √0.16
        assert!(close(p.shock_std(0.0), 0.4, 1e-15));
    }

    #[test]
    fn shock_std_squared_equals_total_variance() {
        let p = ModelParams::default();
        for l in [0.0, 0.3, 0.6, 1.7] {
            assert!(close(p.shock_std(l).powi(2), p.total_variance(l), 1e-14));
        }
    }

    #[test]
    fn expected_abs_shock_values() {
        let p = ModelParams::default();
        let degenerate = ModelParams {
            sigma_s: 1e-300,
            beta: 0.0,
            ..p
        };
        assert!(degenerate.expected_abs_shock(0.6) < 1e-290);
        assert!(close(p.expected_abs_shock(0.6), 0.1083283, 5e-7));
        // perfectly correlated, βL = σ_S: |2σ_S Z|
        let perfect = ModelParams {
            rho1: 1.0,
            rho2: 0.3,
            rho3: 0.3,
            beta: 0.4 / 0.6,
            ..p
        };
        let expected = (2.0 / PI).sqrt() * 2.0 * 0.4 * (1.0f64 / 12.0).sqrt();
        assert!(close(perfect.expected_abs_shock(0.6), expected, 1e-15));
    }

    #[test]
    fn cost_coefficient_values() {
        let p = ModelParams::default();
        assert_eq!(ModelParams { kappa: 0.0, ..p }.cost_coefficient(0.6), 0.0);
        // √(24/π)·0.004·0.470319
        let alt = (24.0 / PI).sqrt() * 0.004 * (0.26f64.powi(2) + 0.1536).sqrt();
        assert!(close(p.cost_coefficient(0.6), alt, 1e-16));
        assert!(close(p.cost_coefficient(0.6), 0.00519976, 5e-9));
        assert!(p.cost_coefficient(1.2) > p.cost_coefficient(0.6));
    }

    #[test]
    fn cost_coefficient_scaling() {
        let p = ModelParams::default();
        let c = p.cost_coefficient(0.8);
        let double_kappa = ModelParams {
            kappa: 2.0 * p.kappa,
            ..p
        };
        assert!(close(double_kappa.cost_coefficient(0.8), 2.0 * c, 1e-17));
        let quarter_dt = ModelParams {
            delta_t: p.delta_t / 4.0,
            ..p
        };
        assert!(close(quarter_dt.cost_coefficient(0.8), 2.0 * c, 1e-17));
    }

    #[test]
    fn utility_values() {
        assert_eq!(Utility::Power { gamma: 0.5 }.value(1.0).unwrap(), 2.0);
        assert_eq!(Utility::Log.value(1.0).unwrap(), 0.0);
        assert_eq!(Utility::Exponential { eta: 0.5 }.value(0.0).unwrap(), 0.0);
        assert!(Utility::Power { gamma: 0.5 }.value(0.0).is_err());
        assert!(Utility::Log.value(-1.0).is_err());
        assert!(Utility::Exponential { eta: 0.5 }.value(-3.0).is_ok());
    }

    #[test]
    fn utility_risk_aversion() {
        let p = Utility::Power { gamma: 0.5 };
        assert!(close(p.relative_risk_aversion(3.0).unwrap(), 0.5, 1e-15));
        assert_eq!(Utility::Log.relative_risk_aversion(2.0).unwrap(), 1.0);
        let e = Utility::Exponential { eta: 0.5 };
        assert!(close(e.relative_risk_aversion(2.5).unwrap(), 1.25, 1e-15));
        assert!(close(e.absolute_risk_aversion(2.5).unwrap(), 0.5, 1e-15));
        for u in [p, Utility::Log, e] {
            for w in [0.3, 1.0, 4.0] {
                let rra = -w * u.curvature(w).unwrap() / u.marginal(w).unwrap();
                assert!(close(rra, u.relative_risk_aversion(w).unwrap(), 1e-12));
                assert!(u.marginal(w).unwrap() > 0.0);
                assert!(u.curvature(w).unwrap() < 0.0);
                let y = u.marginal(w).unwrap();
                assert!(close(u.inverse_marginal(y).unwrap(), w, 1e-12));
            }
        }
    }

    #[test]
    fn utility_validation() {
        assert!(Utility::Power { gamma: 0.0 }.validate().is_err());
        assert!(Utility::Power { gamma: 1.0 }.validate().is_err());
        assert!(Utility::Power { gamma: -2.0 }.validate().is_ok());
        assert!(Utility::Exponential { eta: 0.0 }.validate().is_err());
    }

    #[test]
    fn hjb_coefficients_all_bond() {
        let p = ModelParams::default();
        let pt = StatePoint::new(2.5, 0.6, 0.5);
        let c = p.hjb_coefficients(pt, 0.0).unwrap();
        assert_eq!(c.a_w, p.r * 2.5);
        assert_eq!(c.a_ww, 0.0);
        assert_eq!(c.a_wl, 0.0);
        assert_eq!(c.a_t, 1.0);
    }

    #[test]
    fn hjb_coefficients_worked_example() {
        let p = ModelParams::default();
        let c = p.hjb_coefficients(StatePoint::new(2.5, 0.6, 0.5), 0.3).unwrap();
        let expected = 0.5 * (0.09 * 0.36 + 0.16 + 2.0 * 0.2 * 0.4 * 0.3 * 0.6) * 0.09 * 6.25;
        assert!(close(c.a_ww, expected, 1e-15));
        assert!(close(c.a_ww, 0.0622125, 5e-7));
        assert!(close(c.a_ll, 0.02, 1e-15));
        let theta = p.mean_reversion_level(0.6).unwrap();
        assert!(close(c.a_l, 2.0 * (theta - 0.6), 1e-15));
        assert!(close(c.a_wl, (0.5 * 0.4 + 0.3 * 0.3 * 0.6) * 0.2 * 0.3 * 2.5, 1e-15));
    }

    #[test]
    fn hjb_coefficients_collapse_to_merton() {
        let p = ModelParams::frictionless();
        let c = p.hjb_coefficients(StatePoint::new(1.7, 0.4, 0.2), 0.375).unwrap();
        assert!(close(c.a_w, (0.02 + 0.03 * 0.375) * 1.7, 1e-15));
        assert!(close(c.a_ww, 0.5 * 0.16 * 0.375f64.powi(2) * 1.7f64.powi(2), 1e-15));
        assert_eq!(c.a_ll, 0.0);
        assert_eq!(c.a_wl, 0.0);
    }

    #[test]
    fn hjb_coefficients_reject_bad_control() {
        let p = ModelParams::default();
        let pt = StatePoint::new(1.0, 0.5, 0.0);
        assert!(p.hjb_coefficients(pt, -0.01).is_err());
        assert!(p.hjb_coefficients(pt, 1.01).is_err());
        assert!(p.hjb_coefficients(pt, f64::NAN).is_err());
    }

    #[test]
    fn endpoint_controls_ignore_fees() {
        let p = ModelParams::default();
        let free = ModelParams { kappa: 0.0, ..p };
        let pt = StatePoint::new(3.1, 0.9, 0.4);
        for omega in [0.0, 1.0] {
            let a = p.hjb_coefficients(pt, omega).unwrap().a_w;
            let b = free.hjb_coefficients(pt, omega).unwrap().a_w;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn validation_catches_bad_params() {
        assert!(ModelParams::default().validate().is_ok());
        assert!(ModelParams::frictionless().validate().is_ok());
        let bad = ModelParams {
            kappa: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelParams {
            zeta: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelParams {
            rho1: 0.9,
            rho2: 0.9,
            rho3: -0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelParams {
            sigma_s: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_correlation_determinant() {
        let p = ModelParams::default();
        let m = p.correlation_matrix();
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        assert!(close(det, 0.68, 1e-15));
    }
}
