//! Run configuration files.
//!
//! TOML syntax. Market and utility keys sit at top level under their usual
//! symbol names; sampler and solver settings go in `[sampler]` and
//! `[solver]` tables:
//!
//! ```toml
//! beta = 0.3
//! kappa = 0.004
//! utility = "power"
//! gamma = 0.5
//!
//! [sampler]
//! n_interior = 4096
//!
//! [solver]
//! stop_tol = 1e-5
//! ```
//!
//! Missing keys take their defaults. Unknown keys are errors.

use std::path::Path;

use toml::{Table, Value};

use crate::collocation::SamplerConfig;
use crate::error::{Error, Result};
use crate::iteration::IterationConfig;
use crate::market::{ModelParams, Utility};

/// Everything a solve needs besides the seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub params: ModelParams,
    pub utility: Utility,
    pub sampler: SamplerConfig,
    pub solver: IterationConfig,
}

fn key_error(section: &str, key: &str, reason: impl std::fmt::Display) -> Error {
    let name = if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    };
    Error::Config(format!("key `{name}`: {reason}"))
}

fn float(section: &str, key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(key_error(
            section,
            key,
            format!("expected a number, got {}", other.type_str()),
        )),
    }
}

fn count(section: &str, key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(key_error(
            section,
            key,
            format!("expected a non-negative integer, got {other}"),
        )),
    }
}

fn flag(section: &str, key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| key_error(section, key, format!("expected true or false, got {v}")))
}

fn pair(section: &str, key: &str, v: &Value) -> Result<[f64; 2]> {
    match v.as_array().map(|a| a.as_slice()) {
        Some([a, b]) => Ok([float(section, key, a)?, float(section, key, b)?]),
        _ => Err(key_error(section, key, format!("expected [lo, hi], got {v}"))),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut cfg = RunConfig::default();
        let mut utility_kind: Option<String> = None;
        let mut gamma = None;
        let mut eta = None;
        for (key, v) in &table {
            let p = &mut cfg.params;
            let slot = match key.as_str() {
                "r" => &mut p.r,
                "mu" => &mut p.mu,
                "sigma_S" => &mut p.sigma_s,
                "beta" => &mut p.beta,
                "rho1" => &mut p.rho1,
                "rho2" => &mut p.rho2,
                "rho3" => &mut p.rho3,
                "alpha" => &mut p.alpha,
                "theta_bar" => &mut p.theta_bar,
                "sigma_L" => &mut p.sigma_l,
                "lambda" => &mut p.lambda,
                "kappa" => &mut p.kappa,
                "zeta" => &mut p.zeta,
                "delta_t" => &mut p.delta_t,
                "T" => &mut p.maturity,
                "utility" => {
                    let s = v
                        .as_str()
                        .ok_or_else(|| key_error("", key, "expected \"power\", \"log\" or \"exp\""))?;
                    utility_kind = Some(s.to_string());
                    continue;
                }
                "gamma" => {
                    gamma = Some(float("", key, v)?);
                    continue;
                }
                "eta" => {
                    eta = Some(float("", key, v)?);
                    continue;
                }
                "sampler" => {
                    cfg.sampler = sampler_section(v)?;
                    continue;
                }
                "solver" => {
                    cfg.solver = solver_section(v)?;
                    continue;
                }
                _ => return Err(key_error("", key, "unknown key")),
            };
            *slot = float("", key, v)?;
        }
        cfg.utility = parse_utility(utility_kind.as_deref().unwrap_or("power"), gamma, eta)?;
        cfg.sampler.training_box.maturity = cfg.params.maturity;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.utility.validate()?;
        self.sampler.validate()?;
        self.sampler.training_box.validate_for(&self.utility)?;
        self.solver.validate()
    }

    /// The fully resolved configuration with keys sorted, so equal
    /// configurations print identically whatever their source order.
    pub fn to_canonical_toml(&self) -> String {
        let p = &self.params;
        let mut top = Table::new();
        for (k, v) in [
            ("r", p.r),
            ("mu", p.mu),
            ("sigma_S", p.sigma_s),
            ("beta", p.beta),
            ("rho1", p.rho1),
            ("rho2", p.rho2),
            ("rho3", p.rho3),
            ("alpha", p.alpha),
            ("theta_bar", p.theta_bar),
            ("sigma_L", p.sigma_l),
            ("lambda", p.lambda),
            ("kappa", p.kappa),
            ("zeta", p.zeta),
            ("delta_t", p.delta_t),
            ("T", p.maturity),
        ] {
            top.insert(k.into(), Value::Float(v));
        }
        top.insert("utility".into(), Value::String(utility_name(&self.utility).into()));
        match self.utility {
            Utility::Power { gamma } => {
                top.insert("gamma".into(), Value::Float(gamma));
            }
            Utility::Exponential { eta } => {
                top.insert("eta".into(), Value::Float(eta));
            }
            Utility::Log => {}
        }

        let s = &self.sampler;
        let b = &s.training_box;
        let mut sampler = Table::new();
        for (k, v) in [
            ("w_min", b.w_min),
            ("w_max", b.w_max),
            ("l_min", b.l_min),
            ("l_max", b.l_max),
        ] {
            sampler.insert(k.into(), Value::Float(v));
        }
        for (k, v) in [
            ("n_interior", s.n_interior),
            ("n_terminal", s.n_terminal),
            ("refresh_every", s.refresh_every),
            ("pool_size", s.pool_size),
            ("keep_k", s.keep_k),
            ("max_refreshes", s.max_refreshes),
        ] {
            sampler.insert(k.into(), Value::Integer(v as i64));
        }
        top.insert("sampler".into(), Value::Table(sampler));

        let c = &self.solver;
        let mut solver = Table::new();
        for (k, v) in [
            ("max_outer", Some(c.max_outer)),
            ("pe_steps", Some(c.pe_steps)),
            ("first_pe_steps", c.first_pe_steps),
            ("pi_steps", Some(c.pi_steps)),
            ("hidden", Some(c.hidden)),
            ("n_holdout", Some(c.n_holdout)),
            ("divergence_patience", Some(c.divergence_patience)),
            ("lm_iterations", Some(c.lm_iterations)),
            ("first_lm_iterations", c.first_lm_iterations),
            ("pi_lm_iterations", Some(c.pi_lm_iterations)),
            ("validation_n_w", Some(c.validation.n_w)),
            ("validation_n_l", Some(c.validation.n_l)),
            ("validation_n_t", Some(c.validation.n_t)),
        ] {
            if let Some(v) = v {
                solver.insert(k.into(), Value::Integer(v as i64));
            }
        }
        for (k, v) in [
            ("stop_tol", c.stop_tol),
            ("w_term", c.w_term),
            ("learning_rate", c.learning_rate),
            ("refit_ridge", c.refit_ridge),
            ("validation_t_margin", c.validation.t_margin),
        ] {
            solver.insert(k.into(), Value::Float(v));
        }
        solver.insert("refit".into(), Value::Boolean(c.refit));
        for (k, v) in [("validation_w", c.validation.w), ("validation_l", c.validation.l)] {
            solver.insert(k.into(), Value::Array(v.iter().map(|x| Value::Float(*x)).collect()));
        }
        top.insert("solver".into(), Value::Table(solver));
        // Tables without preserved order serialize with sorted keys.
        toml::to_string(&top).expect("a table of plain values always serializes")
    }
}

/// Config spelling of a utility kind.
pub fn utility_name(u: &Utility) -> &'static str {
    match u {
        Utility::Power { .. } => "power",
        Utility::Log => "log",
        Utility::Exponential { .. } => "exp",
    }
}

/// Builds a utility from its kind and the parameter that kind takes.
/// Supplying the other kind's parameter is an error.
pub fn parse_utility(kind: &str, gamma: Option<f64>, eta: Option<f64>) -> Result<Utility> {
    let u = match kind {
        "power" => {
            if eta.is_some() {
                return Err(key_error("", "eta", "only applies to utility = \"exp\""));
            }
            Utility::Power {
                gamma: gamma.unwrap_or(0.5),
            }
        }
        "log" => {
            if gamma.is_some() || eta.is_some() {
                let key = if gamma.is_some() { "gamma" } else { "eta" };
                return Err(key_error("", key, "log utility takes no parameter"));
            }
            Utility::Log
        }
        "exp" | "exponential" => {
            if gamma.is_some() {
                return Err(key_error("", "gamma", "only applies to utility = \"power\""));
            }
            Utility::Exponential {
                eta: eta.unwrap_or(0.5),
            }
        }
        other => {
            return Err(key_error(
                "",
                "utility",
                format!("unknown kind `{other}` (power, log or exp)"),
            ))
        }
    };
    u.validate()?;
    Ok(u)
}

fn section<'a>(name: &str, v: &'a Value) -> Result<&'a Table> {
    v.as_table()
        .ok_or_else(|| Error::Config(format!("`{name}` must be a [{name}] table")))
}

fn sampler_section(v: &Value) -> Result<SamplerConfig> {
    const S: &str = "sampler";
    let mut s = SamplerConfig::default();
    for (key, v) in section(S, v)? {
        let b = &mut s.training_box;
        match key.as_str() {
            "w_min" => b.w_min = float(S, key, v)?,
            "w_max" => b.w_max = float(S, key, v)?,
            "l_min" => b.l_min = float(S, key, v)?,
            "l_max" => b.l_max = float(S, key, v)?,
            "n_interior" => s.n_interior = count(S, key, v)?,
            "n_terminal" => s.n_terminal = count(S, key, v)?,
            "refresh_every" => s.refresh_every = count(S, key, v)?,
            "pool_size" => s.pool_size = count(S, key, v)?,
            "keep_k" => s.keep_k = count(S, key, v)?,
            "max_refreshes" => s.max_refreshes = count(S, key, v)?,
            _ => return Err(key_error(S, key, "unknown key")),
        }
    }
    Ok(s)
}

fn solver_section(v: &Value) -> Result<IterationConfig> {
    const S: &str = "solver";
    let mut c = IterationConfig::default();
    for (key, v) in section(S, v)? {
        let g = &mut c.validation;
        match key.as_str() {
            "max_outer" => c.max_outer = count(S, key, v)?,
            "pe_steps" => c.pe_steps = count(S, key, v)?,
            "first_pe_steps" => c.first_pe_steps = Some(count(S, key, v)?),
            "pi_steps" => c.pi_steps = count(S, key, v)?,
            "stop_tol" => c.stop_tol = float(S, key, v)?,
            "w_term" => c.w_term = float(S, key, v)?,
            "learning_rate" => c.learning_rate = float(S, key, v)?,
            "hidden" => c.hidden = count(S, key, v)?,
            "n_holdout" => c.n_holdout = count(S, key, v)?,
            "divergence_patience" => c.divergence_patience = count(S, key, v)?,
            "refit" => c.refit = flag(S, key, v)?,
            "refit_ridge" => c.refit_ridge = float(S, key, v)?,
            "lm_iterations" => c.lm_iterations = count(S, key, v)?,
            "first_lm_iterations" => c.first_lm_iterations = Some(count(S, key, v)?),
            "pi_lm_iterations" => c.pi_lm_iterations = count(S, key, v)?,
            "validation_n_w" => g.n_w = count(S, key, v)?,
            "validation_n_l" => g.n_l = count(S, key, v)?,
            "validation_n_t" => g.n_t = count(S, key, v)?,
            "validation_w" => g.w = pair(S, key, v)?,
            "validation_l" => g.l = pair(S, key, v)?,
            "validation_t_margin" => g.t_margin = float(S, key, v)?,
            _ => return Err(key_error(S, key, "unknown key")),
        }
    }
    Ok(c)
}
