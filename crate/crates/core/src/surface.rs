//! Tabulated policy and value surfaces on rectilinear `(W, L, t)` grids.

use std::fmt::Write as _;
use std::path::Path;

use crate::collocation::TrainingBox;
use crate::error::{Error, Result};
use crate::net::TwoLayerNet;

pub const SURFACE_SCHEMA: &str = "# schema: liqhjb-surface v1";
pub const BAND_SCHEMA: &str = "# schema: liqhjb-band v1";

/// Strictly increasing axes; values are stored with `W` varying slowest and
/// `t` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxes {
    pub w: Vec<f64>,
    pub l: Vec<f64>,
    pub t: Vec<f64>,
}

/// `n` evenly spaced values from `a` to `b`; the midpoint when `n == 1`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

impl GridAxes {
    pub fn new(w: Vec<f64>, l: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        for (name, axis) in [("W", &w), ("L", &l), ("t", &t)] {
            if axis.is_empty() || axis.windows(2).any(|p| !(p[1] > p[0])) || axis.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "{name} axis must be non-empty and strictly increasing"
                )));
            }
        }
        Ok(Self { w, l, t })
    }

    /// Uniform grid over the box shrunk by `margin` on every face, with
    /// time running over `[margin·T, (1 − margin)·T]`.
    pub fn interior(bx: &TrainingBox, n_w: usize, n_l: usize, n_t: usize, margin: f64) -> Result<Self> {
        let inner = bx.interior(margin);
        let t0 = margin * bx.maturity;
        Self::new(
            linspace(inner.w_min, inner.w_max, n_w),
            linspace(inner.l_min, inner.l_max, n_l),
            linspace(t0, bx.maturity - t0, n_t),
        )
    }

    pub fn len(&self) -> usize {
        self.w.len() * self.l.len() * self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, iw: usize, il: usize, it: usize) -> usize {
        (iw * self.l.len() + il) * self.t.len() + it
    }

    /// Grid points in storage order.
    pub fn points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for &w in &self.w {
            for &l in &self.l {
                for &t in &self.t {
                    out.push([w, l, t]);
                }
            }
        }
        out
    }

    pub fn t_min(&self) -> f64 {
        self.t[0]
    }
}

/// Provenance recorded alongside every exported surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SurfaceMeta {
    pub params_hash: u64,
    pub seed: u64,
    pub iteration: usize,
}

/// `ω(W, L, t)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySurface {
    pub axes: GridAxes,
    pub values: Vec<f64>,
    pub meta: SurfaceMeta,
}

/// `Q(W, L, t)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub axes: GridAxes,
    pub values: Vec<f64>,
    pub meta: SurfaceMeta,
}

/// Locates `x` on `axis`: lower node index and interpolation weight, with
/// queries outside the axis clamped to the nearest end.
fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let hi = axis.partition_point(|&a| a <= x);
    let lo = hi - 1;
    (lo, (x - axis[lo]) / (axis[hi] - axis[lo]))
}

fn trilinear(axes: &GridAxes, values: &[f64], x: [f64; 3]) -> f64 {
    let (iw, fw) = bracket(&axes.w, x[0]);
    let (il, fl) = bracket(&axes.l, x[1]);
    let (it, ft) = bracket(&axes.t, x[2]);
    let step = |axis: &[f64], i: usize| usize::from(axis.len() > 1 && i + 1 < axis.len());
    let (dw, dl, dt) = (step(&axes.w, iw), step(&axes.l, il), step(&axes.t, it));
    let mut acc = 0.0;
    for (a, wa) in [(0, 1.0 - fw), (dw, fw)] {
        for (b, wb) in [(0, 1.0 - fl), (dl, fl)] {
            for (c, wc) in [(0, 1.0 - ft), (dt, ft)] {
                let weight = wa * wb * wc;
                if weight != 0.0 {
                    acc += weight * values[axes.index(iw + a, il + b, it + c)];
                }
            }
        }
    }
    acc
}

impl PolicySurface {
    pub fn from_net(net: &TwoLayerNet, axes: GridAxes, meta: SurfaceMeta) -> Self {
        let values = axes
            .points()
            .iter()
            .map(|x| net.forward_unchecked(*x).clamp(0.0, 1.0))
            .collect();
        Self { axes, values, meta }
    }

    pub fn constant(axes: GridAxes, omega: f64) -> Self {
        let values = vec![omega; axes.len()];
        Self {
            axes,
            values,
            meta: SurfaceMeta::default(),
        }
    }

    /// Multilinear interpolation, clamped to the nearest face outside the
    /// grid.
    pub fn interpolate(&self, x: [f64; 3]) -> f64 {
        trilinear(&self.axes, &self.values, x)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.axes.len() {
            return Err(Error::Shape(format!(
                "{} policy values for a grid of {}",
                self.values.len(),
                self.axes.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("policy value {v} outside [0, 1]")));
        }
        Ok(())
    }
}

impl ValueSurface {
    pub fn from_net(net: &TwoLayerNet, axes: GridAxes, meta: SurfaceMeta) -> Self {
        let values = axes.points().iter().map(|x| net.forward_unchecked(*x)).collect();
        Self { axes, values, meta }
    }

    pub fn interpolate(&self, x: [f64; 3]) -> f64 {
        trilinear(&self.axes, &self.values, x)
    }
}

/// CSV with header `W,L,t,omega,Q,seed,iteration`, preceded by the schema
/// line.
pub fn surfaces_to_csv(policy: &PolicySurface, value: &ValueSurface) -> Result<String> {
    if policy.axes != value.axes {
        return Err(Error::Shape("policy and value surfaces use different grids".into()));
    }
    policy.validate()?;
    let mut out = String::new();
    out.push_str(SURFACE_SCHEMA);
    out.push('\n');
    out.push_str("W,L,t,omega,Q,seed,iteration\n");
    for (k, x) in policy.axes.points().iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            x[0], x[1], x[2], policy.values[k], value.values[k], policy.meta.seed, policy.meta.iteration
        );
    }
    Ok(out)
}

pub fn write_surfaces(path: &Path, policy: &PolicySurface, value: &ValueSurface) -> Result<()> {
    crate::io::write_atomic(path, surfaces_to_csv(policy, value)?.as_bytes())
}

fn unique_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Parses the surface CSV back into policy and value surfaces.
pub fn surfaces_from_csv(text: &str) -> Result<(PolicySurface, ValueSurface)> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == SURFACE_SCHEMA => {}
        other => {
            return Err(Error::Format(format!(
                "expected `{SURFACE_SCHEMA}`, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    match lines.next() {
        Some(l) if l.trim() == "W,L,t,omega,Q,seed,iteration" => {}
        other => return Err(Error::Format(format!("unexpected surface header {other:?}"))),
    }
    let mut rows = Vec::new();
    let mut meta = SurfaceMeta::default();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!("row {}: expected 7 fields", n + 3)));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("row {}: {e}", n + 3)))
        };
        rows.push([num(0)?, num(1)?, num(2)?, num(3)?, num(4)?]);
        meta.seed = fields[5]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("seed: {e}")))?;
        meta.iteration = fields[6]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("iteration: {e}")))?;
    }
    let axes = GridAxes::new(
        unique_sorted(rows.iter().map(|r| r[0]).collect()),
        unique_sorted(rows.iter().map(|r| r[1]).collect()),
        unique_sorted(rows.iter().map(|r| r[2]).collect()),
    )?;
    if rows.len() != axes.len() {
        return Err(Error::Format(format!(
            "{} rows do not form a full {}x{}x{} grid",
            rows.len(),
            axes.w.len(),
            axes.l.len(),
            axes.t.len()
        )));
    }
    let mut omega = vec![f64::NAN; axes.len()];
    let mut q = vec![f64::NAN; axes.len()];
    for r in &rows {
        let find = |axis: &[f64], x: f64| axis.iter().position(|&a| a == x).expect("axis built from rows");
        let k = axes.index(find(&axes.w, r[0]), find(&axes.l, r[1]), find(&axes.t, r[2]));
        omega[k] = r[3];
        q[k] = r[4];
    }
    if omega.iter().any(|v| v.is_nan()) {
        return Err(Error::Format("duplicate grid rows in surface file".into()));
    }
    let policy = PolicySurface {
        axes: axes.clone(),
        values: omega,
        meta,
    };
    policy.validate()?;
    Ok((policy, ValueSurface { axes, values: q, meta }))
}

pub fn read_surfaces(path: &Path) -> Result<(PolicySurface, ValueSurface)> {
    surfaces_from_csv(&std::fs::read_to_string(path)?)
}

/// Pointwise mean/min/max over an ensemble of surfaces on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Band {
    pub fn from_members(members: &[&[f64]]) -> Result<Self> {
        let n = members
            .first()
            .map(|m| m.len())
            .ok_or_else(|| Error::Domain("empty ensemble".into()))?;
        if members.iter().any(|m| m.len() != n) {
            return Err(Error::Shape("ensemble members differ in length".into()));
        }
        let k = members.len() as f64;
        let mut band = Band {
            mean: vec![0.0; n],
            min: vec![f64::INFINITY; n],
            max: vec![f64::NEG_INFINITY; n],
        };
        for m in members {
            for i in 0..n {
                band.mean[i] += m[i] / k;
                band.min[i] = band.min[i].min(m[i]);
                band.max[i] = band.max[i].max(m[i]);
            }
        }
        // Rounding in the running mean may push it a hair outside [min, max].
        for i in 0..n {
            band.mean[i] = band.mean[i].clamp(band.min[i], band.max[i]);
        }
        Ok(band)
    }

    pub fn max_width(&self) -> f64 {
        self.min.iter().zip(&self.max).map(|(a, b)| b - a).fold(0.0, f64::max)
    }
}

/// Band CSV: `W,L,t,omega_mean,omega_min,omega_max,Q_mean,Q_min,Q_max`.
pub fn bands_to_csv(axes: &GridAxes, omega: &Band, value: &Band) -> String {
    let mut out = String::new();
    out.push_str(BAND_SCHEMA);
    out.push('\n');
    out.push_str("W,L,t,omega_mean,omega_min,omega_max,Q_mean,Q_min,Q_max\n");
    for (k, x) in axes.points().iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            x[0], x[1], x[2], omega.mean[k], omega.min[k], omega.max[k], value.mean[k], value.min[k], value.max[k]
        );
    }
    out
}
