//! Portfolio choice under proportional and liquidity-driven transaction
//! costs, solved by deep policy iteration on the HJB equation.
//!
//! The building blocks, bottom up:
//!
//! - [`market`]: model parameters, the generator coefficients and utilities.
//! - [`net`]: two-layer tanh networks with closed-form input jets and
//!   reverse-mode gradients through them.
//! - [`collocation`]: uniform and residual-adaptive collocation sampling.
//! - [`hjb`]: the generator applied to networks, the evaluation loss and the
//!   improvement objective.
//! - [`lm`]: Levenberg–Marquardt refinement of least-squares phases.
//! - [`iteration`]: the alternating evaluation/improvement driver.
//! - [`surface`]: tabulated policy and value surfaces and seed bands.
//! - [`oracles`]: closed-form and finite-difference reference solutions.
//! - [`mc`]: Monte Carlo simulation of wealth under a given policy.
//! - [`config`]: run configuration files.

pub mod collocation;
pub mod config;
pub mod error;
pub mod hjb;
pub mod io;
pub mod iteration;
pub mod kernel;
pub mod lm;
pub mod market;
pub mod mc;
pub mod net;
pub mod oracles;
pub mod surface;

pub use collocation::{CollocationBatch, SamplerConfig, TrainingBox};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use iteration::{solve, solve_many, IterationConfig, IterationTrace, Solution, Solver, StopReason, ValidationGrid};
pub use market::{ModelParams, StatePoint, Utility};
pub use net::{Head, InputJet, TwoLayerNet};
pub use surface::{GridAxes, PolicySurface, ValueSurface};
