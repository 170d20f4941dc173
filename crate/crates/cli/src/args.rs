//! Flags shared by several subcommands and their resolution into a
//! [`RunConfig`].

use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use liqhjb::config::{parse_utility, utility_name};
use liqhjb::{RunConfig, TrainingBox, Utility};

use crate::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", env = "LIQHJB_OUT", default_value = "liqhjb-out")]
    pub out: PathBuf,
    /// Utility kind, overriding the configuration.
    #[arg(long, value_parser = ["power", "log", "exp"])]
    pub utility: Option<String>,
    /// Power-utility exponent.
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    /// Exponential-utility absolute risk aversion.
    #[arg(long)]
    pub eta: Option<f64>,
}

impl CommonArgs {
    pub fn load_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if self.utility.is_some() || self.gamma.is_some() || self.eta.is_some() {
            let kind = self.utility.as_deref().unwrap_or(utility_name(&cfg.utility));
            let (gamma, eta) = match (kind, cfg.utility) {
                ("power", Utility::Power { gamma }) => (self.gamma.or(Some(gamma)), self.eta),
                ("exp", Utility::Exponential { eta }) => (self.gamma, self.eta.or(Some(eta))),
                _ => (self.gamma, self.eta),
            };
            cfg.utility = parse_utility(kind, gamma, eta)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    /// Train seeds 1..=N.
    #[arg(long, value_name = "N", conflicts_with = "seed_list")]
    pub seeds: Option<u64>,
    /// Train exactly these seeds.
    #[arg(long, value_name = "a,b,c", value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
}

impl SeedArgs {
    /// Seed 1 when neither flag is given.
    pub fn resolve(&self) -> CliResult<Vec<u64>> {
        let seeds: Vec<u64> = match (&self.seeds, &self.seed_list) {
            (Some(0), _) => return Err(CliError::Usage("--seeds must be >= 1".into())),
            (Some(n), _) => (1..=*n).collect(),
            (None, Some(list)) => list.clone(),
            (None, None) => vec![1],
        };
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(CliError::Usage("--seed-list repeats a seed".into()));
        }
        if seeds.is_empty() {
            return Err(CliError::Usage("seed list is empty".into()));
        }
        Ok(seeds)
    }
}

/// A fixed `(W, L, t)` point; the standard slice is `W=2.5, L=0.6, t=0.5`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slice {
    pub w: f64,
    pub l: f64,
    pub t: f64,
}

impl Default for Slice {
    fn default() -> Self {
        Self { w: 2.5, l: 0.6, t: 0.5 }
    }
}

impl FromStr for Slice {
    type Err = String;

    /// Comma-separated `NAME=VALUE` pairs; omitted names keep their default.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut slice = Slice::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected NAME=VALUE, got `{part}`"))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| format!("`{}` is not a number", value.trim()))?;
            if !v.is_finite() {
                return Err(format!("`{part}` is not finite"));
            }
            match name.trim() {
                "W" | "w" => slice.w = v,
                "L" | "l" => slice.l = v,
                "t" => slice.t = v,
                other => return Err(format!("unknown slice variable `{other}` (expected W, L or t)")),
            }
        }
        Ok(slice)
    }
}

impl Slice {
    pub fn point(&self) -> [f64; 3] {
        [self.w, self.l, self.t]
    }

    pub fn check_inside(&self, bx: &TrainingBox) -> CliResult<()> {
        if bx.contains(self.point()) {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "slice (W={}, L={}, t={}) lies outside the training box W ∈ [{}, {}], L ∈ [{}, {}], t ∈ [0, {}]",
                self.w, self.l, self.t, bx.w_min, bx.w_max, bx.l_min, bx.l_max, bx.maturity
            )))
        }
    }
}

#[derive(Debug, Args)]
pub struct SliceArg {
    /// Evaluation slice, e.g. `W=2.5,L=0.6,t=0.5`.
    #[arg(long, value_name = "W=..,L=..,t=..", default_value = "W=2.5,L=0.6,t=0.5")]
    pub slice: Slice,
}
