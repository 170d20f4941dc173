//! Lane-packed copies of a [`TwoLayerNet`] for the batch loops.
//!
//! Hidden units are grouped in blocks of [`LANES`], each block stored as a
//! structure of arrays so the per-unit arithmetic vectorizes. Sums over
//! units keep one partial sum per lane and fold the lanes in a fixed order,
//! so results do not depend on the instruction set. Padding units have
//! all-zero weights and contribute exact zeros.

use crate::market::HjbCoefficients;
use crate::net::{tanh, Head, InputJet, InputScaling, ParamGrad, TwoLayerNet, INPUT_DIM};

pub const LANES: usize = 8;
type Lane = [f64; LANES];

const ZERO: Lane = [0.0; LANES];

#[inline(always)]
fn fold(v: &Lane) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s
}

/// Hidden activations of one point, as produced by the forward kernels.
pub type Tape = Vec<Lane>;

#[derive(Debug, Clone, Copy, Default)]
struct Block {
    /// First-layer weights acting on normalized inputs.
    w: [Lane; INPUT_DIM],
    /// The same weights per physical unit of input.
    v: [Lane; INPUT_DIM],
    b: Lane,
    a: Lane,
}

#[derive(Debug, Clone, Copy, Default)]
struct GradBlock {
    w: [Lane; INPUT_DIM],
    b: Lane,
    a: Lane,
}

#[derive(Debug, Clone)]
pub struct PackedNet {
    hidden: usize,
    head: Head,
    scaling: InputScaling,
    ih: [f64; INPUT_DIM],
    blocks: Vec<Block>,
    b2: f64,
}

/// Gradient accumulator in the packed layout.
#[derive(Debug, Clone)]
pub struct PackedGrad {
    blocks: Vec<GradBlock>,
    b2: f64,
}

impl PackedGrad {
    pub fn zeros(chunks: usize) -> Self {
        Self {
            blocks: vec![GradBlock::default(); chunks],
            b2: 0.0,
        }
    }

    pub fn clear(&mut self) {
        self.blocks.fill(GradBlock::default());
        self.b2 = 0.0;
    }

    /// Adds the packed gradient into `grad`.
    pub fn accumulate_into(&self, grad: &mut ParamGrad) {
        for i in 0..grad.hidden() {
            let g = &self.blocks[i / LANES];
            let l = i % LANES;
            for k in 0..INPUT_DIM {
                grad.w1[i][k] += g.w[k][l];
            }
            grad.b1[i] += g.b[l];
            grad.w2[i] += g.a[l];
        }
        grad.b2 += self.b2;
    }

    /// Writes the gradient into `out` in the flat order of
    /// [`crate::net::Params::blocks`]: `w1` row-major, `b1`, `w2`, `b2`.
    pub fn write_flat(&self, hidden: usize, out: &mut [f64]) {
        let (w1, rest) = out.split_at_mut(hidden * INPUT_DIM);
        let (b1, rest) = rest.split_at_mut(hidden);
        let (w2, b2) = rest.split_at_mut(hidden);
        for i in 0..hidden {
            let g = &self.blocks[i / LANES];
            let l = i % LANES;
            for k in 0..INPUT_DIM {
                w1[i * INPUT_DIM + k] = g.w[k][l];
            }
            b1[i] = g.b[l];
            w2[i] = g.a[l];
        }
        b2[0] = self.b2;
    }
}

impl PackedNet {
    pub fn new(net: &TwoLayerNet) -> Self {
        let p = &net.params;
        let hidden = p.hidden();
        let ih = net.scaling.inv_half_width();
        let mut blocks = vec![Block::default(); hidden.div_ceil(LANES)];
        for i in 0..hidden {
            let blk = &mut blocks[i / LANES];
            let l = i % LANES;
            for k in 0..INPUT_DIM {
                blk.w[k][l] = p.w1[i][k];
                blk.v[k][l] = p.w1[i][k] * ih[k];
            }
            blk.b[l] = p.b1[i];
            blk.a[l] = p.w2[i];
        }
        Self {
            hidden,
            head: net.head,
            scaling: net.scaling,
            ih,
            blocks,
            b2: p.b2,
        }
    }

    pub fn chunks(&self) -> usize {
        self.blocks.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn new_tape(&self) -> Tape {
        vec![ZERO; self.chunks()]
    }

    pub fn new_grad(&self) -> PackedGrad {
        PackedGrad::zeros(self.chunks())
    }

    #[inline(always)]
    fn activations(blk: &Block, xs: &[f64; INPUT_DIM]) -> Lane {
        let mut h = ZERO;
        for l in 0..LANES {
            h[l] = tanh(blk.w[0][l] * xs[0] + blk.w[1][l] * xs[1] + blk.w[2][l] * xs[2] + blk.b[l]);
        }
        h
    }

    /// Pre-head affine output; fills `tape` with the hidden activations.
    fn affine_value(&self, x: [f64; INPUT_DIM], tape: &mut [Lane]) -> f64 {
        let xs = self.scaling.normalize(x);
        let mut acc = ZERO;
        for (blk, slot) in self.blocks.iter().zip(tape.iter_mut()) {
            let h = Self::activations(blk, &xs);
            for l in 0..LANES {
                acc[l] += blk.a[l] * h[l];
            }
            *slot = h;
        }
        fold(&acc) + self.b2
    }

    fn affine_jet(&self, x: [f64; INPUT_DIM], tape: &mut [Lane]) -> InputJet {
        let xs = self.scaling.normalize(x);
        let (mut j0, mut j1, mut j2, mut j3, mut j4, mut j5, mut j6) = (ZERO, ZERO, ZERO, ZERO, ZERO, ZERO, ZERO);
        for (blk, slot) in self.blocks.iter().zip(tape.iter_mut()) {
            let h = Self::activations(blk, &xs);
            let (a, [v0, v1, v2]) = (&blk.a, &blk.v);
            for l in 0..LANES {
                let s = 1.0 - h[l] * h[l];
                let q = -2.0 * h[l] * s;
                let a_s = a[l] * s;
                let a_q = a[l] * q;
                j0[l] += a[l] * h[l];
                j1[l] += a_s * v0[l];
                j2[l] += a_s * v1[l];
                j3[l] += a_s * v2[l];
                j4[l] += a_q * v0[l] * v0[l];
                j5[l] += a_q * v1[l] * v1[l];
                j6[l] += a_q * v0[l] * v1[l];
            }
            *slot = h;
        }
        InputJet {
            value: fold(&j0) + self.b2,
            d_w: fold(&j1),
            d_l: fold(&j2),
            d_t: fold(&j3),
            d_ww: fold(&j4),
            d_ll: fold(&j5),
            d_wl: fold(&j6),
        }
    }

    pub fn value(&self, x: [f64; INPUT_DIM], tape: &mut [Lane]) -> f64 {
        let u = self.affine_value(x, tape);
        match self.head {
            Head::Linear => u,
            Head::Sigmoid => crate::net::sigmoid(u),
        }
    }

    /// Output jet and pre-head affine jet at `x`; `tape` keeps what
    /// [`Self::backward_jet`] needs.
    pub fn jet(&self, x: [f64; INPUT_DIM], tape: &mut [Lane]) -> (InputJet, InputJet) {
        let u = self.affine_jet(x, tape);
        (self.head.jet(&u), u)
    }

    /// Accumulates the parameter gradient of `Σ_e adjoint_e · jet_e(x)`.
    /// `affine` and `tape` come from [`Self::jet`] at the same `x`.
    pub fn backward_jet(
        &self,
        x: [f64; INPUT_DIM],
        tape: &[Lane],
        affine: &InputJet,
        adjoint: &InputJet,
        grad: &mut PackedGrad,
    ) {
        let g = self.head.adjoint(affine, adjoint);
        let xs = self.scaling.normalize(x);
        let ih = self.ih;
        for ((blk, h), gb) in self.blocks.iter().zip(tape).zip(grad.blocks.iter_mut()) {
            let (a, [v0, v1, v2]) = (&blk.a, &blk.v);
            for l in 0..LANES {
                let s = 1.0 - h[l] * h[l];
                let q = -2.0 * h[l] * s;
                let r = -2.0 * s * s + 4.0 * h[l] * h[l] * s;
                let p1 = g.d_w * v0[l] + g.d_l * v1[l] + g.d_t * v2[l];
                let p2 = g.d_ww * v0[l] * v0[l] + g.d_ll * v1[l] * v1[l] + g.d_wl * v0[l] * v1[l];
                gb.a[l] += g.value * h[l] + s * p1 + q * p2;
                let dz = a[l] * (g.value * s + q * p1 + r * p2);
                gb.b[l] += dz;
                let dv0 = a[l] * (s * g.d_w + q * (2.0 * g.d_ww * v0[l] + g.d_wl * v1[l]));
                let dv1 = a[l] * (s * g.d_l + q * (2.0 * g.d_ll * v1[l] + g.d_wl * v0[l]));
                let dv2 = a[l] * s * g.d_t;
                gb.w[0][l] += dv0 * ih[0] + dz * xs[0];
                gb.w[1][l] += dv1 * ih[1] + dz * xs[1];
                gb.w[2][l] += dv2 * ih[2] + dz * xs[2];
            }
        }
        grad.b2 += g.value;
    }

    /// Hidden activations `tanh(zⱼ(x))`, one per unit, into `row`.
    pub fn activation_row(&self, x: [f64; INPUT_DIM], row: &mut [f64]) {
        let xs = self.scaling.normalize(x);
        for (c, blk) in self.blocks.iter().enumerate() {
            let h = Self::activations(blk, &xs);
            let end = ((c + 1) * LANES).min(self.hidden);
            row[c * LANES..end].copy_from_slice(&h[..end - c * LANES]);
        }
    }

    /// The operator with coefficients `coef` applied to each hidden
    /// activation, one entry per unit, into `row`. With a linear head the
    /// operator applied to the network is `row · w₂`.
    pub fn operator_row(&self, x: [f64; INPUT_DIM], coef: &HjbCoefficients, row: &mut [f64]) {
        let xs = self.scaling.normalize(x);
        for (c, blk) in self.blocks.iter().enumerate() {
            let h = Self::activations(blk, &xs);
            let [v0, v1, v2] = &blk.v;
            let mut out = ZERO;
            for l in 0..LANES {
                let s = 1.0 - h[l] * h[l];
                let q = -2.0 * h[l] * s;
                out[l] = s * (coef.a_w * v0[l] + coef.a_l * v1[l] + coef.a_t * v2[l])
                    + q * (coef.a_ww * v0[l] * v0[l] + coef.a_ll * v1[l] * v1[l] + coef.a_wl * v0[l] * v1[l]);
            }
            let end = ((c + 1) * LANES).min(self.hidden);
            row[c * LANES..end].copy_from_slice(&out[..end - c * LANES]);
        }
    }

    /// Output at `x`, accumulating `adjoint · ∂output/∂params` into `grad`.
    pub fn value_grad(&self, x: [f64; INPUT_DIM], adjoint: f64, tape: &mut [Lane], grad: &mut PackedGrad) -> f64 {
        let u = self.affine_value(x, tape);
        let (y, gu) = match self.head {
            Head::Linear => (u, adjoint),
            Head::Sigmoid => {
                let y = crate::net::sigmoid(u);
                (y, adjoint * y * (1.0 - y))
            }
        };
        let xs = self.scaling.normalize(x);
        for ((blk, h), gb) in self.blocks.iter().zip(tape.iter()).zip(grad.blocks.iter_mut()) {
            for l in 0..LANES {
                gb.a[l] += gu * h[l];
                let dz = gu * blk.a[l] * (1.0 - h[l] * h[l]);
                gb.b[l] += dz;
                gb.w[0][l] += dz * xs[0];
                gb.w[1][l] += dz * xs[1];
                gb.w[2][l] += dz * xs[2];
            }
        }
        grad.b2 += gu;
        y
    }
}
