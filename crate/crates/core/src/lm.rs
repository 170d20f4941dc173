//! Levenberg–Marquardt steps for losses that are sums of squares over the
//! parameters of a [`TwoLayerNet`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::net::TwoLayerNet;

/// A loss whose Gauss–Newton model is `‖r(θ)‖²` for residuals `r`
/// depending on network parameters `θ`.
pub trait ResidualSystem {
    fn residuals(&self, net: &TwoLayerNet) -> Result<Vec<f64>>;

    /// The loss that decides whether a step is accepted. Defaults to
    /// `‖r‖²`; a system may substitute any loss that differs from it by a
    /// constant where the model is exact.
    fn loss(&self, net: &TwoLayerNet) -> Result<f64> {
        Ok(sum_sq(&self.residuals(net)?))
    }

    /// Adjusts a trial iterate before its loss is measured, e.g. by solving
    /// exactly for parameters the loss is quadratic in.
    fn project(&self, _net: &mut TwoLayerNet) -> Result<()> {
        Ok(())
    }

    /// Residuals and the transposed Jacobian: column `i` holds `∂rᵢ/∂θ` in
    /// the flat order of [`crate::net::Params::blocks`].
    fn jacobian_t(&self, net: &TwoLayerNet) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    /// Jacobian evaluations per call.
    pub iterations: usize,
    /// Damping at the first call, relative to the diagonal of `JᵀJ`.
    pub initial_damping: f64,
    /// A call stops early once no step is accepted at this damping.
    pub max_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            initial_damping: 1e-3,
            max_damping: 1e8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmReport {
    pub initial: f64,
    pub last: f64,
    pub accepted: usize,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Runs up to `cfg.iterations` damped Gauss–Newton steps on `net`, each
/// accepted only if it lowers [`ResidualSystem::loss`]. `damping` carries
/// the damping factor between calls. The network is left at the best
/// iterate seen.
pub fn levenberg_marquardt<S: ResidualSystem>(
    net: &mut TwoLayerNet,
    system: &S,
    cfg: &LmConfig,
    damping: &mut f64,
) -> Result<LmReport> {
    // Growth factor for consecutive rejections.
    let mut nu = 2.0;
    let n = net.params.len();
    let mut report = LmReport {
        initial: f64::NAN,
        last: f64::NAN,
        accepted: 0,
    };
    'outer: for _ in 0..cfg.iterations {
        let (r, jt) = system.jacobian_t(net)?;
        if jt.nrows() != n || jt.ncols() != r.len() {
            return Err(Error::Shape(format!(
                "Jacobian is {}x{} for {n} parameters and {} residuals",
                jt.nrows(),
                jt.ncols(),
                r.len()
            )));
        }
        let loss = system.loss(net)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("least-squares loss {loss}")));
        }
        if report.initial.is_nan() {
            report.initial = loss;
        }
        report.last = loss;
        let gradient = &jt * DVector::from_vec(r);
        let normal = &jt * jt.transpose();
        drop(jt);
        // Isotropic damping scaled by the mean curvature; per-parameter
        // scaling converged markedly slower on the evaluation loss.
        let mean_diag = normal.trace() / n as f64;
        loop {
            if *damping > cfg.max_damping {
                *damping = cfg.max_damping;
                break 'outer;
            }
            let mut a = normal.clone();
            for d in 0..n {
                a[(d, d)] += *damping * mean_diag;
            }
            let Some(chol) = a.cholesky() else {
                *damping *= nu;
                nu *= 2.0;
                continue;
            };
            let step = chol.solve(&gradient);
            let mut trial = net.clone();
            trial.params.add_flat(-1.0, step.as_slice())?;
            system.project(&mut trial)?;
            let trial_loss = system.loss(&trial)?;
            // Decrease of the Gauss–Newton model along -step. The projection
            // can only add to the actual decrease, so ρ may exceed one.
            let predicted = gradient.dot(&step) + *damping * mean_diag * step.norm_squared();
            let rho = (loss - trial_loss) / predicted;
            if trial_loss < loss && rho > 0.0 {
                *net = trial;
                report.last = trial_loss;
                report.accepted += 1;
                *damping *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                *damping = damping.max(1e-15);
                nu = 2.0;
                break;
            }
            *damping *= nu;
            nu *= 2.0;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Head, InputScaling};

    /// Fit the network output to a target function at fixed points.
    struct Fit {
        points: Vec<[f64; 3]>,
        targets: Vec<f64>,
    }

    impl ResidualSystem for Fit {
        fn residuals(&self, net: &TwoLayerNet) -> Result<Vec<f64>> {
            Ok(self
                .points
                .iter()
                .zip(&self.targets)
                .map(|(x, y)| net.forward_unchecked(*x) - y)
                .collect())
        }

        fn jacobian_t(&self, net: &TwoLayerNet) -> Result<(Vec<f64>, DMatrix<f64>)> {
            let n = net.params.len();
            let mut jt = DMatrix::zeros(n, self.points.len());
            let mut r = Vec::new();
            for (i, (x, y)) in self.points.iter().zip(&self.targets).enumerate() {
                let mut g = crate::net::Params::zeros(net.hidden());
                r.push(net.forward_value_grad(*x, 1.0, &mut g) - y);
                let flat: Vec<f64> = g.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect();
                jt.column_mut(i).copy_from_slice(&flat);
            }
            Ok((r, jt))
        }
    }

    #[test]
    fn fits_smooth_target_far_below_initial_loss() {
        let scaling = InputScaling::new([0.5, 0.0, 0.0], [4.0, 1.0, 1.0]).unwrap();
        let mut net = TwoLayerNet::init(12, Head::Linear, scaling, 3).unwrap();
        let points: Vec<[f64; 3]> = (0..200)
            .map(|i| {
                let s = i as f64 / 199.0;
                [0.5 + 3.5 * s, (7.0 * s).fract(), (13.0 * s).fract()]
            })
            .collect();
        let targets = points
            .iter()
            .map(|x| x[0].sqrt() * (0.1 * (1.0 - x[2])).exp())
            .collect();
        let fit = Fit { points, targets };
        let mut damping = 1e-3;
        let report = levenberg_marquardt(&mut net, &fit, &LmConfig::default(), &mut damping).unwrap();
        assert!(report.accepted > 0);
        assert!(report.last < 1e-4 * report.initial, "{report:?}");
        let direct = sum_sq(&fit.residuals(&net).unwrap());
        assert!((direct - report.last).abs() <= 1e-12 * report.last.max(1e-300));
    }

    #[test]
    fn never_increases_loss() {
        let scaling = InputScaling::default();
        let mut net = TwoLayerNet::init(4, Head::Sigmoid, scaling, 9).unwrap();
        let points = vec![[0.1, 0.2, 0.3], [0.5, 0.5, 0.5], [0.9, 0.1, 0.7]];
        let fit = Fit {
            points,
            targets: vec![0.2, 0.9, 0.4],
        };
        let before = sum_sq(&fit.residuals(&net).unwrap());
        let mut damping = 1e-3;
        let cfg = LmConfig {
            iterations: 5,
            ..Default::default()
        };
        let report = levenberg_marquardt(&mut net, &fit, &cfg, &mut damping).unwrap();
        assert!(report.last <= before);
        assert_eq!(report.initial, before);
    }
}
