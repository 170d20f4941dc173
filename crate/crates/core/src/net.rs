//! Two-layer `tanh` perceptron on `(W, L, t)` with closed-form input
//! derivatives and hand-derived reverse mode through them.
//!
//! The PDE loss depends on `Q`, its first derivatives and the second
//! derivatives in `(W, L)`, so training needs parameter gradients of those
//! derivatives. For `u(x) = Σᵢ aᵢ tanh(zᵢ) + b₂` with `zᵢ = Σⱼ vᵢⱼ xⱼ + …`
//! and `h = tanh z`, `s = 1 − h²`, `q = −2hs`, `r = dq/dz = −2s² + 4h²s`:
//!
//! ```text
//! u_j  = Σᵢ aᵢ sᵢ vᵢⱼ
//! u_jk = Σᵢ aᵢ qᵢ vᵢⱼ vᵢₖ
//! ```
//!
//! Inputs are mapped affinely onto `[−1, 1]³`; `vᵢⱼ` are the weights in
//! physical units, so every derivative this module reports is with respect
//! to the physical inputs.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const INPUT_DIM: usize = 3;
pub const DEFAULT_HIDDEN: usize = 128;

const CHECKPOINT_MAGIC: &str = "liqhjb-net-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Affine output, used for the value network.
    Linear,
    /// Logistic output in `(0, 1)`, used for the control network.
    Sigmoid,
}

impl Head {
    fn as_str(&self) -> &'static str {
        match self {
            Head::Linear => "linear",
            Head::Sigmoid => "sigmoid",
        }
    }

    /// Output jet given the affine jet.
    pub(crate) fn jet(self, u: &InputJet) -> InputJet {
        match self {
            Self::Linear => *u,
            Self::Sigmoid => {
                let y = sigmoid(u.value);
                let s1 = y * (1.0 - y);
                let s2 = s1 * (1.0 - 2.0 * y);
                InputJet {
                    value: y,
                    d_w: s1 * u.d_w,
                    d_l: s1 * u.d_l,
                    d_t: s1 * u.d_t,
                    d_ww: s1 * u.d_ww + s2 * u.d_w * u.d_w,
                    d_ll: s1 * u.d_ll + s2 * u.d_l * u.d_l,
                    d_wl: s1 * u.d_wl + s2 * u.d_w * u.d_l,
                }
            }
        }
    }

    /// Maps an adjoint on the output jet to an adjoint on the affine jet.
    pub(crate) fn adjoint(self, u: &InputJet, g: &InputJet) -> InputJet {
        match self {
            Self::Linear => *g,
            Self::Sigmoid => {
                let y = sigmoid(u.value);
                let s1 = y * (1.0 - y);
                let s2 = s1 * (1.0 - 2.0 * y);
                let s3 = s2 * (1.0 - 2.0 * y) - 2.0 * s1 * s1;
                InputJet {
                    value: g.value * s1
                        + s2 * (g.d_w * u.d_w + g.d_l * u.d_l + g.d_t * u.d_t)
                        + s2 * (g.d_ww * u.d_ww + g.d_ll * u.d_ll + g.d_wl * u.d_wl)
                        + s3 * (g.d_ww * u.d_w * u.d_w + g.d_ll * u.d_l * u.d_l + g.d_wl * u.d_w * u.d_l),
                    d_w: g.d_w * s1 + 2.0 * g.d_ww * s2 * u.d_w + g.d_wl * s2 * u.d_l,
                    d_l: g.d_l * s1 + 2.0 * g.d_ll * s2 * u.d_l + g.d_wl * s2 * u.d_w,
                    d_t: g.d_t * s1,
                    d_ww: g.d_ww * s1,
                    d_ll: g.d_ll * s1,
                    d_wl: g.d_wl * s1,
                }
            }
        }
    }
}

/// Affine map from the box `[lower, upper]` onto `[−1, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaling {
    pub lower: [f64; INPUT_DIM],
    pub upper: [f64; INPUT_DIM],
}

impl Default for InputScaling {
    fn default() -> Self {
        Self {
            lower: [-1.0; INPUT_DIM],
            upper: [1.0; INPUT_DIM],
        }
    }
}

impl InputScaling {
    pub fn new(lower: [f64; INPUT_DIM], upper: [f64; INPUT_DIM]) -> Result<Self> {
        for j in 0..INPUT_DIM {
            if !(lower[j].is_finite() && upper[j].is_finite() && upper[j] > lower[j]) {
                return Err(Error::Domain(format!(
                    "input scaling bounds for axis {j} are degenerate: [{}, {}]",
                    lower[j], upper[j]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    #[inline]
    pub fn inv_half_width(&self) -> [f64; INPUT_DIM] {
        std::array::from_fn(|j| 2.0 / (self.upper[j] - self.lower[j]))
    }

    #[inline]
    pub fn normalize(&self, x: [f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        std::array::from_fn(|j| {
            let c = 0.5 * (self.upper[j] + self.lower[j]);
            (x[j] - c) * 2.0 / (self.upper[j] - self.lower[j])
        })
    }
}

/// Network output and its input derivatives at one point. Mixed second
/// derivatives are symmetric, so `d_wl` serves both orders. Second
/// derivatives involving `t` never enter the operator and are not formed.
///
/// The same shape is used for adjoints (∂loss/∂entry) in the backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InputJet {
    pub value: f64,
    pub d_w: f64,
    pub d_l: f64,
    pub d_t: f64,
    pub d_ww: f64,
    pub d_ll: f64,
    pub d_wl: f64,
}

impl InputJet {
    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|v| v.is_finite())
    }

    pub fn entries(&self) -> [f64; 7] {
        [
            self.value, self.d_w, self.d_l, self.d_t, self.d_ww, self.d_ll, self.d_wl,
        ]
    }

    pub fn from_entries(e: [f64; 7]) -> Self {
        Self {
            value: e[0],
            d_w: e[1],
            d_l: e[2],
            d_t: e[3],
            d_ww: e[4],
            d_ll: e[5],
            d_wl: e[6],
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::from_entries(self.entries().map(|v| v * k))
    }

    fn has_derivative_terms(&self) -> bool {
        self.d_w != 0.0
            || self.d_l != 0.0
            || self.d_t != 0.0
            || self.d_ww != 0.0
            || self.d_ll != 0.0
            || self.d_wl != 0.0
    }
}

impl std::ops::Add for InputJet {
    type Output = InputJet;
    fn add(self, rhs: InputJet) -> InputJet {
        let a = self.entries();
        let b = rhs.entries();
        InputJet::from_entries(std::array::from_fn(|k| a[k] + b[k]))
    }
}

/// Trainable parameters. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Hidden × 3, row-major.
    pub w1: Vec<[f64; INPUT_DIM]>,
    pub b1: Vec<f64>,
    /// 1 × hidden.
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Gradient of a scalar loss with respect to [`Params`].
pub type ParamGrad = Params;

impl Params {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: vec![[0.0; INPUT_DIM]; hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn len(&self) -> usize {
        self.hidden() * (INPUT_DIM + 2) + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.b1.len();
        if self.w1.len() != n || self.w2.len() != n {
            return Err(Error::Shape(format!(
                "inconsistent parameter blocks: w1 {} rows, b1 {}, w2 {}",
                self.w1.len(),
                n,
                self.w2.len()
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.w1.len() == other.w1.len() && self.b1.len() == other.b1.len() && self.w2.len() == other.w2.len()
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w1", self.w1.as_flattened()),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", std::slice::from_ref(&self.b2)),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("w1", self.w1.as_flattened_mut()),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", std::slice::from_mut(&mut self.b2)),
        ]
    }

    pub fn fill(&mut self, v: f64) {
        for (_, block) in self.blocks_mut() {
            block.fill(v);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, block) in self.blocks_mut() {
            block.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Adds `k · delta` to the parameters, `delta` in the flat order of
    /// [`Self::blocks`].
    pub fn add_flat(&mut self, k: f64, delta: &[f64]) -> Result<()> {
        if delta.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} entries for {} parameters",
                delta.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for (_, block) in self.blocks_mut() {
            for (p, d) in block.iter_mut().zip(&delta[offset..]) {
                *p += k * d;
            }
            offset += block.len();
        }
        Ok(())
    }

    /// First non-finite entry as `(block, index)`.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.blocks()
            .into_iter()
            .find_map(|(name, block)| block.iter().position(|v| !v.is_finite()).map(|i| (name, i)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    pub params: Params,
    pub head: Head,
    pub scaling: InputScaling,
}

/// `exp(x)` for `x ∈ [−40, 0]`, branch-free so the hidden-unit loops stay
/// cheap: Cody–Waite reduction by `ln 2` and a degree-12 Taylor polynomial.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5·2⁵² rounds to an integer held in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let kf = x * std::f64::consts::LOG2_E + SHIFTER;
    let k_bits = kf.to_bits().wrapping_sub(SHIFTER.to_bits());
    let k = kf - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    const C: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
    ];
    let mut p = C[12];
    for c in C[..12].iter().rev() {
        p = p * r + c;
    }
    // k ∈ [−58, 0], so 2^k is a normal number.
    let scale = f64::from_bits(k_bits.wrapping_add(1023) << 52);
    p * scale
}

/// `tanh` with absolute error below 1e-15, several times faster than the
/// libm call.
#[inline(always)]
pub(crate) fn tanh(z: f64) -> f64 {
    // Written as a select so NaN propagates; tanh(20) rounds to 1.
    let a = z.abs();
    let a = if a > 20.0 { 20.0 } else { a };
    let e = exp_nonpositive(-2.0 * a);
    ((1.0 - e) / (1.0 + e)).copysign(z)
}

#[inline]
pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl TwoLayerNet {
    /// All-zero network.
    pub fn zeros(hidden: usize, head: Head, scaling: InputScaling) -> Self {
        Self {
            params: Params::zeros(hidden),
            head,
            scaling,
        }
    }

    /// Weights uniform on `±1/√fan_in`, hidden biases uniform on `±1`,
    /// output bias zero. Reproducible from `seed`.
    ///
    /// Random hidden biases matter: with zero biases every hidden unit is an
    /// odd function about the box centre, and fits of one-signed curvature
    /// such as `√W` stall.
    pub fn init(hidden: usize, head: Head, scaling: InputScaling, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Domain("hidden size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(hidden, head, scaling);
        let bound1 = 1.0 / (INPUT_DIM as f64).sqrt();
        for row in net.params.w1.iter_mut() {
            for w in row.iter_mut() {
                *w = rng.random_range(-bound1..bound1);
            }
        }
        for b in net.params.b1.iter_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let bound2 = 1.0 / (hidden as f64).sqrt();
        for w in net.params.w2.iter_mut() {
            *w = rng.random_range(-bound2..bound2);
        }
        Ok(net)
    }

    /// Zeroes the output layer so the network starts from a constant
    /// (`0.5` for a sigmoid head).
    pub fn with_zero_output_layer(mut self) -> Self {
        self.params.w2.fill(0.0);
        self.params.b2 = 0.0;
        self
    }

    pub fn hidden(&self) -> usize {
        self.params.hidden()
    }

    /// Pre-head affine output `Σ aᵢ tanh(zᵢ) + b₂`.
    #[inline]
    fn affine_value(&self, x: [f64; INPUT_DIM]) -> f64 {
        let xs = self.scaling.normalize(x);
        let p = &self.params;
        let mut u = p.b2;
        for ((w, b), a) in p.w1.iter().zip(&p.b1).zip(&p.w2) {
            let z = w[0] * xs[0] + w[1] * xs[1] + w[2] * xs[2] + b;
            u += a * tanh(z);
        }
        u
    }

    /// Network output at `x = (W, L, t)`.
    pub fn forward(&self, x: [f64; INPUT_DIM]) -> Result<f64> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("network input {x:?}")));
        }
        Ok(self.forward_unchecked(x))
    }

    #[inline]
    pub fn forward_unchecked(&self, x: [f64; INPUT_DIM]) -> f64 {
        let u = self.affine_value(x);
        match self.head {
            Head::Linear => u,
            Head::Sigmoid => sigmoid(u),
        }
    }

    /// Jet of the pre-head affine output; stores `tanh(zᵢ)` in `tape`.
    fn affine_jet(&self, x: [f64; INPUT_DIM], tape: &mut [f64]) -> InputJet {
        let xs = self.scaling.normalize(x);
        let ih = self.scaling.inv_half_width();
        let p = &self.params;
        let mut j = InputJet {
            value: p.b2,
            ..Default::default()
        };
        for i in 0..p.b1.len() {
            let w = p.w1[i];
            let a = p.w2[i];
            let z = w[0] * xs[0] + w[1] * xs[1] + w[2] * xs[2] + p.b1[i];
            let h = tanh(z);
            tape[i] = h;
            let s = 1.0 - h * h;
            let q = -2.0 * h * s;
            let (v0, v1, v2) = (w[0] * ih[0], w[1] * ih[1], w[2] * ih[2]);
            let a_s = a * s;
            let a_q = a * q;
            j.value += a * h;
            j.d_w += a_s * v0;
            j.d_l += a_s * v1;
            j.d_t += a_s * v2;
            j.d_ww += a_q * v0 * v0;
            j.d_ll += a_q * v1 * v1;
            j.d_wl += a_q * v0 * v1;
        }
        j
    }

    /// Output value and input derivatives at `x`.
    pub fn forward_jet(&self, x: [f64; INPUT_DIM]) -> InputJet {
        let mut tape = vec![0.0; self.hidden()];
        self.forward_jet_taped(x, &mut tape)
    }

    /// [`Self::forward_jet`] that keeps the hidden activations in `tape` for
    /// a subsequent [`Self::backward_jet_taped`] at the same point.
    pub fn forward_jet_taped(&self, x: [f64; INPUT_DIM], tape: &mut [f64]) -> InputJet {
        let u = self.affine_jet(x, tape);
        self.head.jet(&u)
    }

    /// Accumulates into `grad` the parameter gradient of
    /// `Σ_e adjoint_e · jet_e(x)`; `tape` must come from
    /// [`Self::forward_jet_taped`] at the same `x`.
    pub fn backward_jet_taped(&self, x: [f64; INPUT_DIM], tape: &[f64], adjoint: &InputJet, grad: &mut ParamGrad) {
        let g = match self.head {
            Head::Linear => *adjoint,
            Head::Sigmoid => {
                let u = self.affine_jet_from_tape(tape);
                self.head.adjoint(&u, adjoint)
            }
        };
        let xs = self.scaling.normalize(x);
        let ih = self.scaling.inv_half_width();
        let p = &self.params;
        let derivs = g.has_derivative_terms();
        for i in 0..p.b1.len() {
            let w = p.w1[i];
            let a = p.w2[i];
            let h = tape[i];
            let s = 1.0 - h * h;
            if !derivs {
                grad.w2[i] += g.value * h;
                let dz = a * g.value * s;
                grad.b1[i] += dz;
                for j in 0..INPUT_DIM {
                    grad.w1[i][j] += dz * xs[j];
                }
                continue;
            }
            let q = -2.0 * h * s;
            let r = -2.0 * s * s + 4.0 * h * h * s;
            let (v0, v1, v2) = (w[0] * ih[0], w[1] * ih[1], w[2] * ih[2]);
            let p1 = g.d_w * v0 + g.d_l * v1 + g.d_t * v2;
            let p2 = g.d_ww * v0 * v0 + g.d_ll * v1 * v1 + g.d_wl * v0 * v1;
            grad.w2[i] += g.value * h + s * p1 + q * p2;
            let dz = a * (g.value * s + q * p1 + r * p2);
            grad.b1[i] += dz;
            let dv0 = a * (s * g.d_w + q * (2.0 * g.d_ww * v0 + g.d_wl * v1));
            let dv1 = a * (s * g.d_l + q * (2.0 * g.d_ll * v1 + g.d_wl * v0));
            let dv2 = a * s * g.d_t;
            let gw = &mut grad.w1[i];
            gw[0] += dv0 * ih[0] + dz * xs[0];
            gw[1] += dv1 * ih[1] + dz * xs[1];
            gw[2] += dv2 * ih[2] + dz * xs[2];
        }
        grad.b2 += g.value;
    }

    fn affine_jet_from_tape(&self, tape: &[f64]) -> InputJet {
        let ih = self.scaling.inv_half_width();
        let p = &self.params;
        let mut j = InputJet {
            value: p.b2,
            ..Default::default()
        };
        for i in 0..p.b1.len() {
            let w = p.w1[i];
            let a = p.w2[i];
            let h = tape[i];
            let s = 1.0 - h * h;
            let q = -2.0 * h * s;
            let (v0, v1, v2) = (w[0] * ih[0], w[1] * ih[1], w[2] * ih[2]);
            j.value += a * h;
            j.d_w += a * s * v0;
            j.d_l += a * s * v1;
            j.d_t += a * s * v2;
            j.d_ww += a * q * v0 * v0;
            j.d_ll += a * q * v1 * v1;
            j.d_wl += a * q * v0 * v1;
        }
        j
    }

    /// Output at `x` and accumulation of `adjoint · ∂output/∂params` into
    /// `grad`. Cheaper than the jet path when only the value matters.
    pub fn forward_value_grad(&self, x: [f64; INPUT_DIM], adjoint: f64, grad: &mut ParamGrad) -> f64 {
        let xs = self.scaling.normalize(x);
        let p = &self.params;
        let n = p.b1.len();
        let mut u = p.b2;
        // Stack buffer for the common sizes; heap fallback otherwise.
        let mut stack = [0.0f64; 256];
        let mut heap = Vec::new();
        let tape: &mut [f64] = if n <= stack.len() {
            &mut stack[..n]
        } else {
            heap.resize(n, 0.0);
            &mut heap
        };
        for i in 0..n {
            let w = p.w1[i];
            let z = w[0] * xs[0] + w[1] * xs[1] + w[2] * xs[2] + p.b1[i];
            let h = tanh(z);
            tape[i] = h;
            u += p.w2[i] * h;
        }
        let (y, gu) = match self.head {
            Head::Linear => (u, adjoint),
            Head::Sigmoid => {
                let y = sigmoid(u);
                (y, adjoint * y * (1.0 - y))
            }
        };
        for i in 0..n {
            let h = tape[i];
            grad.w2[i] += gu * h;
            let dz = gu * p.w2[i] * (1.0 - h * h);
            grad.b1[i] += dz;
            for j in 0..INPUT_DIM {
                grad.w1[i][j] += dz * xs[j];
            }
        }
        grad.b2 += gu;
        y
    }

    /// Parameter gradient of `Σₚ Σ_e adjointₚ,e · jet_e(xₚ)`, accumulated
    /// over points in order.
    pub fn loss_backward(&self, points: &[[f64; INPUT_DIM]], adjoints: &[InputJet]) -> Result<ParamGrad> {
        if points.len() != adjoints.len() {
            return Err(Error::Shape(format!(
                "{} points but {} adjoints",
                points.len(),
                adjoints.len()
            )));
        }
        self.params.check_shape()?;
        let mut grad = Params::zeros(self.hidden());
        let mut tape = vec![0.0; self.hidden()];
        for (x, adj) in points.iter().zip(adjoints) {
            self.forward_jet_taped(*x, &mut tape);
            self.backward_jet_taped(*x, &tape, adj, &mut grad);
        }
        Ok(grad)
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        self.params.check_shape()?;
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "version {CHECKPOINT_VERSION}")?;
        writeln!(out, "head {}", self.head.as_str())?;
        writeln!(out, "hidden {}", self.hidden())?;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(out, "input_lower {}", join(&self.scaling.lower))?;
        writeln!(out, "input_upper {}", join(&self.scaling.upper))?;
        for (name, block) in self.params.blocks() {
            writeln!(out, "{name} {}", join(block))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<(String, String)> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("checkpoint ends before `{what}`")))??;
            let (key, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            if key != what {
                return Err(Error::Format(format!("expected `{what}`, found `{key}`")));
            }
            Ok((key.to_string(), rest.to_string()))
        };
        let (magic, _) = next(CHECKPOINT_MAGIC)?;
        debug_assert_eq!(magic, CHECKPOINT_MAGIC);
        let (_, version) = next("version")?;
        if version.trim() != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (_, head) = next("head")?;
        let head = match head.trim() {
            "linear" => Head::Linear,
            "sigmoid" => Head::Sigmoid,
            other => return Err(Error::Format(format!("unknown head `{other}`"))),
        };
        let (_, hidden) = next("hidden")?;
        let hidden: usize = hidden
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("hidden size: {e}")))?;
        let floats = |s: &str, n: usize, what: &str| -> Result<Vec<f64>> {
            let v = s
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("{what}: {e}")))?;
            if v.len() != n {
                return Err(Error::Format(format!("{what}: expected {n} values, found {}", v.len())));
            }
            Ok(v)
        };
        let lower = floats(&next("input_lower")?.1, INPUT_DIM, "input_lower")?;
        let upper = floats(&next("input_upper")?.1, INPUT_DIM, "input_upper")?;
        let scaling = InputScaling::new([lower[0], lower[1], lower[2]], [upper[0], upper[1], upper[2]])?;
        let w1 = floats(&next("w1")?.1, hidden * INPUT_DIM, "w1")?;
        let b1 = floats(&next("b1")?.1, hidden, "b1")?;
        let w2 = floats(&next("w2")?.1, hidden, "w2")?;
        let b2 = floats(&next("b2")?.1, 1, "b2")?;
        let params = Params {
            w1: w1.chunks_exact(INPUT_DIM).map(|c| [c[0], c[1], c[2]]).collect(),
            b1,
            w2,
            b2: b2[0],
        };
        if let Some((block, i)) = params.first_non_finite() {
            return Err(Error::Format(format!("non-finite parameter {block}[{i}]")));
        }
        Ok(Self { params, head, scaling })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(hidden: usize) -> Self {
        Self {
            m: Params::zeros(hidden),
            v: Params::zeros(hidden),
            step: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }
}

/// One bias-corrected Adam descent step on `net` along `grad`.
pub fn adam_step(net: &mut TwoLayerNet, grad: &ParamGrad, state: &mut AdamState) -> Result<()> {
    if !grad.same_shape(&net.params) || !state.m.same_shape(&net.params) || !state.v.same_shape(&net.params) {
        return Err(Error::Shape(
            "gradient or optimizer state does not match the network".into(),
        ));
    }
    if let Some((block, i)) = grad.first_non_finite() {
        let value = grad.blocks().into_iter().find(|(n, _)| *n == block).map(|(_, b)| b[i]);
        return Err(Error::NonFinite(format!(
            "gradient block `{block}` entry {i} is {}",
            value.unwrap_or(f64::NAN)
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.eps);
    let params = net.params.blocks_mut();
    let ms = state.m.blocks_mut();
    let vs = state.v.blocks_mut();
    let gs = grad.blocks();
    for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
        for k in 0..p.1.len() {
            let gk = g.1[k];
            m.1[k] = b1 * m.1[k] + (1.0 - b1) * gk;
            v.1[k] = b2 * v.1[k] + (1.0 - b2) * gk * gk;
            let m_hat = m.1[k] / bc1;
            let v_hat = v.1[k] / bc2;
            p.1[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
