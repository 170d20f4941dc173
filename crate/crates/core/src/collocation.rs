//! Collocation points over a bounded training box.
//!
//! Sampling is counter-based: each stream of points is a ChaCha generator
//! keyed by `(seed, stream)`, so batches are reproducible no matter how they
//! are split up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::market::Utility;
use crate::net::InputScaling;

/// Truncation of `ℝ₊ × ℝ₊ × [0, T]` used for training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingBox {
    pub w_min: f64,
    pub w_max: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub maturity: f64,
}

impl Default for TrainingBox {
    fn default() -> Self {
        Self {
            w_min: 0.5,
            w_max: 8.0,
            l_min: 0.01,
            l_max: 2.0,
            maturity: 1.0,
        }
    }
}

impl TrainingBox {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.w_min, self.w_max, self.l_min, self.l_max, self.maturity]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || !(self.w_min > 0.0 && self.w_max > self.w_min)
            || !(self.l_min >= 0.0 && self.l_max > self.l_min)
            || !(self.maturity > 0.0)
        {
            return Err(Error::Domain(format!("degenerate training box {self:?}")));
        }
        Ok(())
    }

    pub fn validate_for(&self, utility: &Utility) -> Result<()> {
        self.validate()?;
        if utility.requires_positive_wealth() && self.w_min <= 0.0 {
            return Err(Error::Domain(format!("{} utility needs w_min > 0", utility.name())));
        }
        Ok(())
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        (self.w_min..=self.w_max).contains(&x[0])
            && (self.l_min..=self.l_max).contains(&x[1])
            && (0.0..=self.maturity).contains(&x[2])
    }

    /// Input normalization for networks trained on this box.
    pub fn input_scaling(&self) -> InputScaling {
        InputScaling {
            lower: [self.w_min, self.l_min, 0.0],
            upper: [self.w_max, self.l_max, self.maturity],
        }
    }

    /// The box shrunk by `margin` (a fraction of each side) on every face,
    /// time included.
    pub fn interior(&self, margin: f64) -> TrainingBox {
        let dw = (self.w_max - self.w_min) * margin;
        let dl = (self.l_max - self.l_min) * margin;
        TrainingBox {
            w_min: self.w_min + dw,
            w_max: self.w_max - dw,
            l_min: self.l_min + dl,
            l_max: self.l_max - dl,
            maturity: self.maturity,
        }
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng, t_fixed: Option<f64>) -> [f64; 3] {
        let w = rng.random_range(self.w_min..self.w_max);
        let l = rng.random_range(self.l_min..self.l_max);
        let t = match t_fixed {
            Some(t) => t,
            None => rng.random_range(0.0..self.maturity),
        };
        [w, l, t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Uniform,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    pub interior: Vec<[f64; 3]>,
    /// Points on the terminal slice `t = T`.
    pub terminal: Vec<[f64; 3]>,
    pub seed: u64,
    pub provenance: Provenance,
}

const INTERIOR_STREAM: u64 = 0;
const TERMINAL_STREAM: u64 = 1;
const POOL_STREAM: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// i.i.d. uniform interior points on `box × [0, T]` and terminal points on
/// `box × {T}`.
pub fn sample_uniform(bx: &TrainingBox, n_interior: usize, n_terminal: usize, seed: u64) -> Result<CollocationBatch> {
    bx.validate()?;
    if n_interior == 0 || n_terminal == 0 {
        return Err(Error::Domain("batch sizes must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, INTERIOR_STREAM);
    let interior = (0..n_interior).map(|_| bx.sample_point(&mut rng, None)).collect();
    let mut rng = stream_rng(seed, TERMINAL_STREAM);
    let terminal = (0..n_terminal)
        .map(|_| bx.sample_point(&mut rng, Some(bx.maturity)))
        .collect();
    Ok(CollocationBatch {
        interior,
        terminal,
        seed,
        provenance: Provenance::Uniform,
    })
}

/// Draws `pool_size` uniform candidates and keeps the `keep_k` with the
/// largest `|residual|`. Ties keep the lower candidate index.
pub fn adaptive_resample<F>(
    bx: &TrainingBox,
    residual: F,
    pool_size: usize,
    keep_k: usize,
    seed: u64,
) -> Result<Vec<[f64; 3]>>
where
    F: Fn(&[f64; 3]) -> f64,
{
    bx.validate()?;
    if keep_k == 0 || pool_size < keep_k {
        return Err(Error::Domain(format!(
            "need pool_size >= keep_k >= 1, got pool {pool_size}, keep {keep_k}"
        )));
    }
    let mut rng = stream_rng(seed, POOL_STREAM);
    let pool: Vec<[f64; 3]> = (0..pool_size).map(|_| bx.sample_point(&mut rng, None)).collect();
    let mut scored = Vec::with_capacity(pool_size);
    for (i, p) in pool.iter().enumerate() {
        let r = residual(p);
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "residual at candidate {i} (W={}, L={}, t={}) is {r}",
                p[0], p[1], p[2]
            )));
        }
        scored.push((r.abs(), i));
    }
    // Stable sort keeps index order among equal residuals.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored[..keep_k].iter().map(|&(_, i)| pool[i]).collect())
}

/// Sampler settings from the `[sampler]` config section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub training_box: TrainingBox,
    pub n_interior: usize,
    pub n_terminal: usize,
    /// Optimizer steps between adaptive refreshes; 0 disables refinement.
    pub refresh_every: usize,
    pub pool_size: usize,
    pub keep_k: usize,
    /// Number of refreshes after which the adaptive set is frozen.
    pub max_refreshes: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            training_box: TrainingBox::default(),
            n_interior: 4096,
            n_terminal: 1024,
            refresh_every: 500,
            pool_size: 20_000,
            keep_k: 1024,
            max_refreshes: 4,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.training_box.validate()?;
        if self.n_interior == 0 || self.n_terminal == 0 {
            return Err(Error::Config("sampler batch sizes must be >= 1".into()));
        }
        if self.refresh_every > 0 && (self.keep_k == 0 || self.pool_size < self.keep_k) {
            return Err(Error::Config(
                "sampler needs pool_size >= keep_k >= 1 when refinement is on".into(),
            ));
        }
        Ok(())
    }
}
