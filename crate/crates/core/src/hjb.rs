//! The controlled generator `𝓛^ω` applied to network jets, the
//! policy-evaluation loss and the policy-improvement objective.
//!
//! At a fixed point and jet, `𝓛^ω Q = Aω² + Bω + C` with
//!
//! ```text
//! A = ½Σ²(L)W²·Q_WW + c(L)W·Q_W
//! B = (μ−r)W·Q_W − c(L)W·Q_W + (ρ₂σ_S + ρ₃βL)σ_L·W·Q_WL
//! C = Q_t + rW·Q_W + α(θ(L) − L)·Q_L + ½σ_L²·Q_LL
//! ```

use crate::error::{Error, Result};
use crate::kernel::PackedNet;
use crate::market::{HjbCoefficients, ModelParams, StatePoint, Utility};
use crate::net::{Head, InputJet, ParamGrad, TwoLayerNet};

/// Operator residual at one collocation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub point: StatePoint,
    pub jet: InputJet,
    pub omega: f64,
    pub residual: f64,
}

/// `ω ↦ Aω² + Bω + C`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuadraticInOmega {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadraticInOmega {
    #[inline]
    pub fn eval(&self, omega: f64) -> f64 {
        (self.a * omega + self.b) * omega + self.c
    }

    #[inline]
    pub fn slope(&self, omega: f64) -> f64 {
        2.0 * self.a * omega + self.b
    }
}

/// The ω-independent pieces of the generator at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCoefficients {
    r_w: f64,
    excess_w: f64,
    cost_w: f64,
    half_var_w2: f64,
    a_l: f64,
    a_ll: f64,
    cross_w: f64,
}

impl PointCoefficients {
    pub fn new(params: &ModelParams, point: StatePoint) -> Result<Self> {
        if !point.is_finite() {
            return Err(Error::NonFinite(format!("collocation point {point:?}")));
        }
        if !(point.w >= 0.0) {
            return Err(Error::Domain(format!("wealth must be >= 0, got {}", point.w)));
        }
        let StatePoint { w, l, .. } = point;
        let theta = params.mean_reversion_level(l)?;
        Ok(Self {
            r_w: params.r * w,
            excess_w: (params.mu - params.r) * w,
            cost_w: params.cost_coefficient(l) * w,
            half_var_w2: 0.5 * params.total_variance(l) * w * w,
            a_l: params.alpha * (theta - l),
            a_ll: 0.5 * params.sigma_l * params.sigma_l,
            cross_w: params.cross_coefficient(l) * w,
        })
    }

    #[inline]
    pub fn at(&self, omega: f64) -> HjbCoefficients {
        HjbCoefficients {
            a_t: 1.0,
            a_w: self.r_w + self.excess_w * omega - self.cost_w * omega * (1.0 - omega),
            a_ww: self.half_var_w2 * omega * omega,
            a_l: self.a_l,
            a_ll: self.a_ll,
            a_wl: self.cross_w * omega,
        }
    }

    #[inline]
    pub fn quadratic(&self, jet: &InputJet) -> QuadraticInOmega {
        QuadraticInOmega {
            a: self.half_var_w2 * jet.d_ww + self.cost_w * jet.d_w,
            b: (self.excess_w - self.cost_w) * jet.d_w + self.cross_w * jet.d_wl,
            c: jet.d_t + self.r_w * jet.d_w + self.a_l * jet.d_l + self.a_ll * jet.d_ll,
        }
    }
}

#[inline]
fn contract(c: &HjbCoefficients, jet: &InputJet) -> f64 {
    c.a_t * jet.d_t + c.a_w * jet.d_w + c.a_ww * jet.d_ww + c.a_l * jet.d_l + c.a_ll * jet.d_ll + c.a_wl * jet.d_wl
}

/// `𝓛^ω Q` at `point` for the derivatives in `jet`.
pub fn apply_operator(params: &ModelParams, point: StatePoint, jet: &InputJet, omega: f64) -> Result<f64> {
    if !jet.is_finite() {
        return Err(Error::NonFinite(format!("jet at {point:?}: {jet:?}")));
    }
    let c = params.hjb_coefficients(point, omega)?;
    Ok(contract(&c, jet))
}

pub fn decompose_quadratic(params: &ModelParams, point: StatePoint, jet: &InputJet) -> Result<QuadraticInOmega> {
    Ok(PointCoefficients::new(params, point)?.quadratic(jet))
}

/// Exact maximizer of `Aω² + Bω` over `[0, 1]`; ties go to the smaller ω.
pub fn pointwise_optimal_control(q: &QuadraticInOmega) -> f64 {
    let QuadraticInOmega { a, b, .. } = *q;
    if a < 0.0 {
        (-b / (2.0 * a)).clamp(0.0, 1.0)
    } else if a + b > 0.0 {
        // Convex or linear: the maximum sits at an endpoint; f(0) = 0.
        1.0
    } else {
        0.0
    }
}

/// Collocation points with their ω-independent coefficients and terminal
/// targets precomputed.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub interior: Vec<[f64; 3]>,
    pub coefficients: Vec<PointCoefficients>,
    pub terminal: Vec<[f64; 3]>,
    pub targets: Vec<f64>,
}

impl PreparedBatch {
    pub fn new(
        params: &ModelParams,
        utility: &Utility,
        interior: Vec<[f64; 3]>,
        terminal: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if interior.is_empty() || terminal.is_empty() {
            return Err(Error::Domain("batch must contain interior and terminal points".into()));
        }
        let coefficients = interior
            .iter()
            .map(|x| PointCoefficients::new(params, StatePoint::from_array(*x)))
            .collect::<Result<Vec<_>>>()?;
        let targets = terminal
            .iter()
            .map(|x| utility.value(x[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            interior,
            coefficients,
            terminal,
            targets,
        })
    }

    pub fn from_batch(
        params: &ModelParams,
        utility: &Utility,
        batch: &crate::collocation::CollocationBatch,
    ) -> Result<Self> {
        Self::new(params, utility, batch.interior.clone(), batch.terminal.clone())
    }

    /// Appends interior points (adaptive refinement).
    pub fn extend_interior(&mut self, params: &ModelParams, points: &[[f64; 3]]) -> Result<()> {
        for x in points {
            self.coefficients
                .push(PointCoefficients::new(params, StatePoint::from_array(*x))?);
            self.interior.push(*x);
        }
        Ok(())
    }

    pub fn truncate_interior(&mut self, len: usize) {
        self.interior.truncate(len);
        self.coefficients.truncate(len);
    }
}

/// Loss value split into its two terms, plus per-point diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeLoss {
    pub total: f64,
    pub interior: f64,
    /// Mean squared terminal mismatch, before weighting.
    pub terminal: f64,
    pub residuals: Vec<f64>,
    pub terminal_mismatch: Vec<f64>,
}

fn non_finite_at(x: &[f64; 3], what: &str, v: f64) -> Error {
    Error::NonFinite(format!("{what} at (W={}, L={}, t={}) is {v}", x[0], x[1], x[2]))
}

/// Control-network outputs over the interior points.
pub fn controls(control_net: &TwoLayerNet, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|x| {
            let w = control_net.forward_unchecked(*x);
            if w.is_finite() {
                Ok(w.clamp(0.0, 1.0))
            } else {
                Err(non_finite_at(x, "control output", w))
            }
        })
        .collect()
}

/// Mean squared residual of `𝓛^{ω_ψ}Q_φ` over the interior points plus
/// `w_term` times the mean squared terminal mismatch `Q_φ(W, L, T) − U(W)`.
pub fn pde_loss(
    params: &ModelParams,
    utility: &Utility,
    value_net: &TwoLayerNet,
    control_net: &TwoLayerNet,
    batch: &crate::collocation::CollocationBatch,
    w_term: f64,
) -> Result<PdeLoss> {
    let prepared = PreparedBatch::from_batch(params, utility, batch)?;
    let omegas = controls(control_net, &prepared.interior)?;
    evaluate_loss(value_net, &prepared, &omegas, w_term)
}

pub fn evaluate_loss(value_net: &TwoLayerNet, batch: &PreparedBatch, omegas: &[f64], w_term: f64) -> Result<PdeLoss> {
    let net = PackedNet::new(value_net);
    let mut tape = net.new_tape();
    let mut residuals = Vec::with_capacity(batch.interior.len());
    for ((x, pc), &omega) in batch.interior.iter().zip(&batch.coefficients).zip(omegas) {
        let (jet, _) = net.jet(*x, &mut tape);
        let r = contract(&pc.at(omega), &jet);
        if !r.is_finite() {
            return Err(non_finite_at(x, "PDE residual", r));
        }
        residuals.push(r);
    }
    let mut terminal_mismatch = Vec::with_capacity(batch.terminal.len());
    for (x, target) in batch.terminal.iter().zip(&batch.targets) {
        let m = net.value(*x, &mut tape) - target;
        if !m.is_finite() {
            return Err(non_finite_at(x, "terminal mismatch", m));
        }
        terminal_mismatch.push(m);
    }
    let interior = mean_square(&residuals);
    let terminal = mean_square(&terminal_mismatch);
    Ok(PdeLoss {
        total: interior + w_term * terminal,
        interior,
        terminal,
        residuals,
        terminal_mismatch,
    })
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Loss and its gradient with respect to the value-network parameters, with
/// the controls held fixed at `omegas`.
pub fn pde_loss_and_grad(
    value_net: &TwoLayerNet,
    batch: &PreparedBatch,
    omegas: &[f64],
    w_term: f64,
    grad: &mut ParamGrad,
) -> Result<(f64, f64)> {
    if omegas.len() != batch.interior.len() {
        return Err(Error::Shape(format!(
            "{} controls for {} interior points",
            omegas.len(),
            batch.interior.len()
        )));
    }
    grad.fill(0.0);
    let net = PackedNet::new(value_net);
    let mut tape = net.new_tape();
    let mut packed = net.new_grad();
    let n_int = batch.interior.len() as f64;
    let mut interior = 0.0;
    for ((x, pc), &omega) in batch.interior.iter().zip(&batch.coefficients).zip(omegas) {
        let (jet, affine) = net.jet(*x, &mut tape);
        let c = pc.at(omega);
        let r = contract(&c, &jet);
        if !r.is_finite() {
            return Err(non_finite_at(x, "PDE residual", r));
        }
        interior += r * r;
        let k = 2.0 * r / n_int;
        let adjoint = InputJet {
            value: 0.0,
            d_w: k * c.a_w,
            d_l: k * c.a_l,
            d_t: k * c.a_t,
            d_ww: k * c.a_ww,
            d_ll: k * c.a_ll,
            d_wl: k * c.a_wl,
        };
        net.backward_jet(*x, &tape, &affine, &adjoint, &mut packed);
    }
    let n_term = batch.terminal.len() as f64;
    let mut terminal = 0.0;
    for (x, target) in batch.terminal.iter().zip(&batch.targets) {
        // The adjoint needs the value, so the point is evaluated twice.
        let m = net.value(*x, &mut tape) - target;
        if !m.is_finite() {
            return Err(non_finite_at(x, "terminal mismatch", m));
        }
        terminal += m * m;
        net.value_grad(*x, w_term * 2.0 * m / n_term, &mut tape, &mut packed);
    }
    packed.accumulate_into(grad);
    let interior = interior / n_int;
    let terminal = terminal / n_term;
    Ok((interior + w_term * terminal, terminal))
}

/// Replaces the output layer of a linear-head value network by the exact
/// minimizer of the evaluation loss over that layer, the hidden layer held
/// fixed; the loss is quadratic there because the generator is linear in
/// `Q`. `ridge` scales a Tikhonov term relative to the mean diagonal of the
/// normal matrix. The new layer is kept only if it lowers the loss; returns
/// the loss before and after.
pub fn refit_output_layer(
    value_net: &mut TwoLayerNet,
    batch: &PreparedBatch,
    omegas: &[f64],
    w_term: f64,
    ridge: f64,
) -> Result<(f64, f64)> {
    use nalgebra::{DMatrix, DVector};
    if value_net.head != Head::Linear {
        return Err(Error::Domain("output-layer refit needs a linear head".into()));
    }
    if omegas.len() != batch.interior.len() {
        return Err(Error::Shape(format!(
            "{} controls for {} interior points",
            omegas.len(),
            batch.interior.len()
        )));
    }
    let before = evaluate_loss(value_net, batch, omegas, w_term)?.total;
    let net = PackedNet::new(value_net);
    let h = net.hidden();
    let n_int = batch.interior.len();
    let n_rows = n_int + batch.terminal.len();
    // Row-major design matrix, transposed on the way into nalgebra.
    let mut design = vec![0.0; n_rows * (h + 1)];
    let mut rhs = DVector::zeros(n_rows);
    let w_int = (1.0 / n_int as f64).sqrt();
    for (i, ((x, pc), &omega)) in batch.interior.iter().zip(&batch.coefficients).zip(omegas).enumerate() {
        let row = &mut design[i * (h + 1)..(i + 1) * (h + 1)];
        net.operator_row(*x, &pc.at(omega), &mut row[..h]);
        row.iter_mut().for_each(|v| *v *= w_int);
    }
    let w_t = (w_term / batch.terminal.len() as f64).sqrt();
    for (k, (x, target)) in batch.terminal.iter().zip(&batch.targets).enumerate() {
        let i = n_int + k;
        let row = &mut design[i * (h + 1)..(i + 1) * (h + 1)];
        net.activation_row(*x, &mut row[..h]);
        row[h] = 1.0;
        row.iter_mut().for_each(|v| *v *= w_t);
        rhs[i] = w_t * target;
    }
    let m = DMatrix::from_row_slice(n_rows, h + 1, &design);
    drop(design);
    let normal = m.tr_mul(&m);
    let mtb = m.tr_mul(&rhs);
    let mean_diag = normal.diagonal().mean();
    if !(mean_diag.is_finite() && mean_diag > 0.0) {
        return Err(Error::NonFinite(format!("normal matrix diagonal mean {mean_diag}")));
    }
    let mut lambda = ridge.max(1e-300) * mean_diag;
    let solution = loop {
        let mut reg = normal.clone();
        for d in 0..=h {
            reg[(d, d)] += lambda;
        }
        if let Some(chol) = reg.cholesky() {
            break chol.solve(&mtb);
        }
        lambda *= 10.0;
        if lambda > mean_diag {
            return Err(Error::LinearSolve(
                "output-layer normal matrix is not positive definite".into(),
            ));
        }
    };
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "output-layer refit produced non-finite weights".into(),
        ));
    }
    let saved = (value_net.params.w2.clone(), value_net.params.b2);
    value_net.params.w2.copy_from_slice(&solution.as_slice()[..h]);
    value_net.params.b2 = solution[h];
    let after = evaluate_loss(value_net, batch, omegas, w_term)?.total;
    if after < before {
        Ok((before, after))
    } else {
        (value_net.params.w2, value_net.params.b2) = saved;
        Ok((before, before))
    }
}

/// The evaluation loss as a sum of squares, for
/// [`crate::lm::levenberg_marquardt`]: interior residuals weighted by
/// `1/√n_int`, terminal mismatches by `√(w_term/n_term)`.
pub struct EvaluationResiduals<'a> {
    batch: &'a PreparedBatch,
    omegas: &'a [f64],
    w_int: f64,
    w_t: f64,
    w_term: f64,
    ridge: f64,
}

impl<'a> EvaluationResiduals<'a> {
    /// `ridge` is passed to [`refit_output_layer`], which re-solves the
    /// output layer after every trial step.
    pub fn new(batch: &'a PreparedBatch, omegas: &'a [f64], w_term: f64, ridge: f64) -> Result<Self> {
        if omegas.len() != batch.interior.len() {
            return Err(Error::Shape(format!(
                "{} controls for {} interior points",
                omegas.len(),
                batch.interior.len()
            )));
        }
        Ok(Self {
            batch,
            omegas,
            w_int: (1.0 / batch.interior.len() as f64).sqrt(),
            w_t: (w_term / batch.terminal.len() as f64).sqrt(),
            w_term,
            ridge,
        })
    }

    fn rows(&self) -> usize {
        self.batch.interior.len() + self.batch.terminal.len()
    }
}

impl crate::lm::ResidualSystem for EvaluationResiduals<'_> {
    fn project(&self, value_net: &mut TwoLayerNet) -> Result<()> {
        refit_output_layer(value_net, self.batch, self.omegas, self.w_term, self.ridge).map(|_| ())
    }

    fn residuals(&self, value_net: &TwoLayerNet) -> Result<Vec<f64>> {
        let net = PackedNet::new(value_net);
        let mut tape = net.new_tape();
        let mut out = Vec::with_capacity(self.rows());
        let b = self.batch;
        for ((x, pc), &omega) in b.interior.iter().zip(&b.coefficients).zip(self.omegas) {
            let (jet, _) = net.jet(*x, &mut tape);
            out.push(self.w_int * contract(&pc.at(omega), &jet));
        }
        for (x, target) in b.terminal.iter().zip(&b.targets) {
            out.push(self.w_t * (net.value(*x, &mut tape) - target));
        }
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            let x = if i < b.interior.len() {
                b.interior[i]
            } else {
                b.terminal[i - b.interior.len()]
            };
            return Err(non_finite_at(&x, "evaluation residual", out[i]));
        }
        Ok(out)
    }

    fn jacobian_t(&self, value_net: &TwoLayerNet) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>)> {
        let net = PackedNet::new(value_net);
        let n = value_net.params.len();
        let h = net.hidden();
        let mut tape = net.new_tape();
        let mut packed = net.new_grad();
        let mut jt = nalgebra::DMatrix::zeros(n, self.rows());
        let mut out = Vec::with_capacity(self.rows());
        let b = self.batch;
        let columns = jt.as_mut_slice().chunks_exact_mut(n);
        let mut columns = columns.into_iter();
        for ((x, pc), &omega) in b.interior.iter().zip(&b.coefficients).zip(self.omegas) {
            let (jet, affine) = net.jet(*x, &mut tape);
            let c = pc.at(omega);
            let r = self.w_int * contract(&c, &jet);
            if !r.is_finite() {
                return Err(non_finite_at(x, "PDE residual", r));
            }
            out.push(r);
            let k = self.w_int;
            let adjoint = InputJet {
                value: 0.0,
                d_w: k * c.a_w,
                d_l: k * c.a_l,
                d_t: k * c.a_t,
                d_ww: k * c.a_ww,
                d_ll: k * c.a_ll,
                d_wl: k * c.a_wl,
            };
            packed.clear();
            net.backward_jet(*x, &tape, &affine, &adjoint, &mut packed);
            packed.write_flat(h, columns.next().expect("one column per row"));
        }
        for (x, target) in b.terminal.iter().zip(&b.targets) {
            packed.clear();
            let m = self.w_t * (net.value_grad(*x, self.w_t, &mut tape, &mut packed) - target);
            if !m.is_finite() {
                return Err(non_finite_at(x, "terminal mismatch", m));
            }
            out.push(m);
            packed.write_flat(h, columns.next().expect("one column per row"));
        }
        Ok((out, jt))
    }
}

/// Mean of `𝓛^{ω_ψ}Q_φ` over the interior points (signed).
pub fn improvement_objective(
    params: &ModelParams,
    value_net: &TwoLayerNet,
    control_net: &TwoLayerNet,
    batch: &crate::collocation::CollocationBatch,
) -> Result<f64> {
    let quads = quadratics(params, value_net, &batch.interior)?;
    let omegas = controls(control_net, &batch.interior)?;
    Ok(quads.iter().zip(&omegas).map(|(q, &w)| q.eval(w)).sum::<f64>() / quads.len().max(1) as f64)
}

/// Quadratic-in-ω decomposition of the value network's generator at each
/// point.
pub fn quadratics(params: &ModelParams, value_net: &TwoLayerNet, points: &[[f64; 3]]) -> Result<Vec<QuadraticInOmega>> {
    let net = PackedNet::new(value_net);
    let mut tape = net.new_tape();
    points
        .iter()
        .map(|x| {
            let (jet, _) = net.jet(*x, &mut tape);
            if !jet.is_finite() {
                return Err(non_finite_at(x, "value jet", f64::NAN));
            }
            Ok(PointCoefficients::new(params, StatePoint::from_array(*x))?.quadratic(&jet))
        })
        .collect()
}

/// Greatest gap between the control network and the exact pointwise
/// maximizer of the value network's generator over `points`.
pub fn greedy_gap(
    params: &ModelParams,
    value_net: &TwoLayerNet,
    control_net: &TwoLayerNet,
    points: &[[f64; 3]],
) -> Result<f64> {
    let quads = quadratics(params, value_net, points)?;
    let omegas = controls(control_net, points)?;
    Ok(quads
        .iter()
        .zip(&omegas)
        .map(|(q, w)| (pointwise_optimal_control(q) - w).abs())
        .fold(0.0, f64::max))
}

/// The improvement phase as a weighted least-squares problem. Where the
/// generator is concave in ω, `A ω² + B ω = A (ω − ω*)² + const` with
/// `ω* = −B/(2A)`, so the residual `√(−A/n) (ω − ω*)` reproduces the
/// objective exactly. Elsewhere the residual pulls toward the better
/// endpoint with a small weight; steps are accepted on the true objective
/// either way.
pub struct ImprovementResiduals<'a> {
    points: &'a [[f64; 3]],
    quads: &'a [QuadraticInOmega],
    weights: Vec<f64>,
    targets: Vec<f64>,
}

impl<'a> ImprovementResiduals<'a> {
    pub fn new(points: &'a [[f64; 3]], quads: &'a [QuadraticInOmega]) -> Result<Self> {
        if points.len() != quads.len() || points.is_empty() {
            return Err(Error::Shape(format!(
                "{} points for {} quadratics",
                points.len(),
                quads.len()
            )));
        }
        let n = points.len() as f64;
        let scale = quads.iter().map(|q| q.a.abs()).sum::<f64>() / n;
        let floor = 1e-3 * scale;
        let (weights, targets) = quads
            .iter()
            .map(|q| {
                if q.a < -floor {
                    ((-q.a / n).sqrt(), -q.b / (2.0 * q.a))
                } else {
                    ((floor.max(f64::MIN_POSITIVE) / n).sqrt(), pointwise_optimal_control(q))
                }
            })
            .unzip();
        Ok(Self {
            points,
            quads,
            weights,
            targets,
        })
    }
}

impl crate::lm::ResidualSystem for ImprovementResiduals<'_> {
    fn residuals(&self, control_net: &TwoLayerNet) -> Result<Vec<f64>> {
        let net = PackedNet::new(control_net);
        let mut tape = net.new_tape();
        self.points
            .iter()
            .zip(self.weights.iter().zip(&self.targets))
            .map(|(x, (k, target))| {
                let omega = net.value(*x, &mut tape);
                if !omega.is_finite() {
                    return Err(non_finite_at(x, "control output", omega));
                }
                Ok(k * (omega - target))
            })
            .collect()
    }

    /// Minus the improvement objective.
    fn loss(&self, control_net: &TwoLayerNet) -> Result<f64> {
        let net = PackedNet::new(control_net);
        let mut tape = net.new_tape();
        let mut total = 0.0;
        for (x, q) in self.points.iter().zip(self.quads) {
            let omega = net.value(*x, &mut tape);
            if !omega.is_finite() {
                return Err(non_finite_at(x, "control output", omega));
            }
            total += q.eval(omega);
        }
        Ok(-total / self.points.len() as f64)
    }

    fn jacobian_t(&self, control_net: &TwoLayerNet) -> Result<(Vec<f64>, nalgebra::DMatrix<f64>)> {
        let net = PackedNet::new(control_net);
        let n = control_net.params.len();
        let h = net.hidden();
        let mut tape = net.new_tape();
        let mut packed = net.new_grad();
        let mut jt = nalgebra::DMatrix::zeros(n, self.points.len());
        let mut out = Vec::with_capacity(self.points.len());
        for ((x, (k, target)), column) in self
            .points
            .iter()
            .zip(self.weights.iter().zip(&self.targets))
            .zip(jt.as_mut_slice().chunks_exact_mut(n))
        {
            packed.clear();
            let omega = net.value_grad(*x, *k, &mut tape, &mut packed);
            if !omega.is_finite() {
                return Err(non_finite_at(x, "control output", omega));
            }
            out.push(k * (omega - target));
            packed.write_flat(h, column);
        }
        Ok((out, jt))
    }
}

/// Improvement objective and its gradient with respect to the control
/// parameters, for precomputed quadratics of a frozen value network.
pub fn improvement_objective_and_grad(
    control_net: &TwoLayerNet,
    points: &[[f64; 3]],
    quads: &[QuadraticInOmega],
    grad: &mut ParamGrad,
) -> Result<f64> {
    if points.len() != quads.len() {
        return Err(Error::Shape(format!(
            "{} points for {} quadratics",
            points.len(),
            quads.len()
        )));
    }
    grad.fill(0.0);
    let net = PackedNet::new(control_net);
    let mut tape = net.new_tape();
    let mut packed = net.new_grad();
    let n = points.len() as f64;
    let mut total = 0.0;
    for (x, q) in points.iter().zip(quads) {
        // ω enters the adjoint, so evaluate before accumulating.
        let omega = net.value(*x, &mut tape);
        if !omega.is_finite() {
            return Err(non_finite_at(x, "control output", omega));
        }
        total += q.eval(omega);
        net.value_grad(*x, q.slope(omega) / n, &mut tape, &mut packed);
    }
    packed.accumulate_into(grad);
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jet_of(e: [f64; 7]) -> InputJet {
        InputJet::from_entries(e)
    }

    #[test]
    fn constant_value_has_zero_residual() {
        let p = ModelParams::default();
        let jet = InputJet {
            value: 3.7,
            ..Default::default()
        };
        for omega in [0.0, 0.4, 1.0] {
            let r = apply_operator(&p, StatePoint::new(2.0, 0.6, 0.3), &jet, omega).unwrap();
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn linear_wealth_all_bond() {
        let p = ModelParams::default();
        let jet = InputJet {
            value: 2.0,
            d_w: 1.0,
            ..Default::default()
        };
        let r = apply_operator(&p, StatePoint::new(2.0, 0.6, 0.3), &jet, 0.0).unwrap();
        assert!((r - 0.02 * 2.0).abs() < 1e-16);
    }

    #[test]
    fn non_finite_jet_is_an_error() {
        let p = ModelParams::default();
        let jet = InputJet {
            d_ww: f64::NAN,
            ..Default::default()
        };
        assert!(apply_operator(&p, StatePoint::new(2.0, 0.6, 0.3), &jet, 0.5).is_err());
    }

    #[test]
    fn quadratic_concave_without_fees() {
        let p = ModelParams {
            kappa: 0.0,
            ..Default::default()
        };
        let jet = jet_of([1.0, 0.5, 0.1, 0.0, -0.2, 0.0, 0.05]);
        let q = decompose_quadratic(&p, StatePoint::new(1.5, 0.4, 0.2), &jet).unwrap();
        assert!(q.a < 0.0);
        let zero = decompose_quadratic(&p, StatePoint::new(1.5, 0.4, 0.2), &InputJet::default()).unwrap();
        assert_eq!(zero, QuadraticInOmega::default());
    }

    #[test]
    fn quadratic_reconstructs_operator() {
        let p = ModelParams::default();
        let pt = StatePoint::new(2.2, 0.9, 0.4);
        let jet = jet_of([2.9, 0.6, -0.05, -0.013, -0.14, 0.02, 0.011]);
        let q = decompose_quadratic(&p, pt, &jet).unwrap();
        for omega in [0.0, 0.3, 0.5, 0.77, 1.0] {
            let direct = apply_operator(&p, pt, &jet, omega).unwrap();
            assert!((q.eval(omega) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn optimal_control_cases() {
        let q = |a, b| QuadraticInOmega { a, b, c: 0.0 };
        assert_eq!(pointwise_optimal_control(&q(-1.0, 0.75)), 0.375);
        assert_eq!(pointwise_optimal_control(&q(-1.0, 4.0)), 1.0);
        assert_eq!(pointwise_optimal_control(&q(-1.0, -4.0)), 0.0);
        assert_eq!(pointwise_optimal_control(&q(1.0, -0.5)), 1.0);
        assert_eq!(pointwise_optimal_control(&q(1.0, -1.5)), 0.0);
        // tie between the endpoints: f(0) = f(1) = 0
        assert_eq!(pointwise_optimal_control(&q(1.0, -1.0)), 0.0);
        assert_eq!(pointwise_optimal_control(&q(0.0, 0.2)), 1.0);
        assert_eq!(pointwise_optimal_control(&q(0.0, 0.0)), 0.0);
    }

    #[test]
    fn terminal_term_for_zero_value_net() {
        use crate::collocation::{CollocationBatch, Provenance};
        use crate::net::{Head, InputScaling};
        let p = ModelParams::default();
        let u = Utility::Power { gamma: 0.5 };
        let value = TwoLayerNet::zeros(4, Head::Linear, InputScaling::default());
        let control = TwoLayerNet::zeros(4, Head::Sigmoid, InputScaling::default());
        let batch = CollocationBatch {
            interior: vec![[1.0, 0.5, 0.5]],
            terminal: vec![[1.0, 0.5, 1.0]; 3],
            seed: 0,
            provenance: Provenance::Uniform,
        };
        let one = pde_loss(&p, &u, &value, &control, &batch, 1.0).unwrap();
        assert_eq!(one.interior, 0.0);
        assert_eq!(one.terminal, 4.0);
        assert_eq!(one.total, 4.0);
        let two = pde_loss(&p, &u, &value, &control, &batch, 2.0).unwrap();
        assert_eq!(two.total - two.interior, 2.0 * (one.total - one.interior));
    }
}
