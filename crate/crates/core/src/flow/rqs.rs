//! Monotone rational-quadratic splines on `[-R, R]` with identity tails.
//!
//! A spline with `B` bins is described by `3B - 1` unconstrained numbers:
//! `B` width logits, `B` height logits and `B - 1` interior derivative
//! pre-activations. Widths and heights are softmax-normalized with a floor,
//! derivatives are `MIN_DERIVATIVE + softplus(raw + c0)` where `c0` makes a
//! zero pre-activation give slope 1. The boundary derivatives are fixed at 1
//! so the spline joins the linear tails smoothly. All-zero parameters give
//! the identity map.

use crate::diff::{Axis, Tape, Tensor, Var};
use crate::error::Result;

pub const MIN_WIDTH: f64 = 1e-3;
pub const MIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Pre-activation shift so that a zero raw derivative maps to 1.
pub fn derivative_shift() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Number of raw parameters of a `bins`-bin spline.
pub fn param_count(bins: usize) -> usize {
    3 * bins - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

fn knots(logits: &[f64], min: f64, range: f64) -> Vec<f64> {
    let b = logits.len();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let mut out = Vec::with_capacity(b + 1);
    let mut acc = 0.0;
    out.push(-range);
    for v in &e[..b - 1] {
        acc += 2.0 * range * (min + (1.0 - b as f64 * min) * v / total);
        out.push(-range + acc);
    }
    out.push(range);
    out
}

impl RqSpline {
    pub fn from_raw(raw: &[f64], bins: usize, range: f64) -> Self {
        assert_eq!(raw.len(), param_count(bins), "raw spline parameter count");
        let xs = knots(&raw[..bins], MIN_WIDTH, range);
        let ys = knots(&raw[bins..2 * bins], MIN_HEIGHT, range);
        let c0 = derivative_shift();
        let mut ds = Vec::with_capacity(bins + 1);
        ds.push(1.0);
        ds.extend(raw[2 * bins..].iter().map(|r| MIN_DERIVATIVE + softplus(r + c0)));
        ds.push(1.0);
        Self { xs, ys, ds }
    }

    pub fn identity(bins: usize, range: f64) -> Self {
        Self::from_raw(&vec![0.0; param_count(bins)], bins, range)
    }

    pub fn knots_x(&self) -> &[f64] {
        &self.xs
    }

    pub fn knots_y(&self) -> &[f64] {
        &self.ys
    }

    pub fn knot_derivatives(&self) -> &[f64] {
        &self.ds
    }

    fn range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    fn bin(knots: &[f64], v: f64) -> usize {
        let b = knots.len() - 1;
        knots[1..b].partition_point(|&k| k <= v)
    }

    /// Spline value and log-derivative at `u`.
    pub fn forward(&self, u: f64) -> (f64, f64) {
        let (lo, hi) = self.range();
        if !(lo..=hi).contains(&u) {
            return (u, 0.0);
        }
        let k = Self::bin(&self.xs, u);
        let (w, h) = (self.xs[k + 1] - self.xs[k], self.ys[k + 1] - self.ys[k]);
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let s = h / w;
        let xi = (u - self.xs[k]) / w;
        let xo = xi * (1.0 - xi);
        let den = s + (d1 + d0 - 2.0 * s) * xo;
        let y = self.ys[k] + h * (s * xi * xi + d0 * xo) / den;
        let dnum = d1 * xi * xi + 2.0 * s * xo + d0 * (1.0 - xi) * (1.0 - xi);
        let logdet = 2.0 * s.ln() + dnum.ln() - 2.0 * den.ln();
        (y, logdet)
    }

    /// Exact inverse by the closed-form root of the per-bin quadratic.
    pub fn inverse(&self, y: f64) -> f64 {
        let (lo, hi) = (self.ys[0], *self.ys.last().unwrap());
        if !(lo..=hi).contains(&y) {
            return y;
        }
        let k = Self::bin(&self.ys, y);
        let (w, h) = (self.xs[k + 1] - self.xs[k], self.ys[k + 1] - self.ys[k]);
        let (d0, d1) = (self.ds[k], self.ds[k + 1]);
        let s = h / w;
        let t = y - self.ys[k];
        let m = d1 + d0 - 2.0 * s;
        let a = h * (s - d0) + t * m;
        let b = h * d0 - t * m;
        let c = -s * t;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c) / (-b - disc.sqrt());
        self.xs[k] + xi.clamp(0.0, 1.0) * w
    }
}

/// `B x (B+1)` matrix whose product with per-bin sizes gives cumulative
/// knot offsets starting at 0.
fn cumulative(bins: usize) -> Tensor {
    let mut t = Tensor::zeros(bins, bins + 1);
    for i in 0..bins {
        for j in i + 1..=bins {
            t.set(i, j, 1.0);
        }
    }
    t
}

fn tape_knots(tape: &mut Tape, logits: Var, min: f64, range: f64, bins: usize) -> Result<Var> {
    let vals = tape.value(logits);
    let maxes = Tensor::column(
        (0..vals.rows())
            .map(|r| vals.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    );
    let maxes = tape.constant(maxes);
    let shifted = tape.sub(logits, maxes)?;
    let e = tape.exp(shifted);
    let total = tape.sum_axis(e, Axis::Cols);
    let p = tape.div(e, total)?;
    let sizes = tape.scale(p, 2.0 * range * (1.0 - bins as f64 * min));
    let sizes = tape.offset(sizes, 2.0 * range * min);
    let cum = tape.constant(cumulative(bins));
    let k = tape.matmul(sizes, cum)?;
    Ok(tape.offset(k, -range))
}

/// Row-wise spline transform of `u` (`n x 1`) with per-row raw parameters
/// (`n x (3B - 1)`), recorded on the tape. Returns `(value, log-derivative)`,
/// both `n x 1`.
pub fn tape_forward(tape: &mut Tape, raw: Var, u: Var, bins: usize, range: f64) -> Result<(Var, Var)> {
    let rows = tape.shape(u).0;
    let wl = tape.columns(raw, 0, bins)?;
    let hl = tape.columns(raw, bins, 2 * bins)?;
    let dl = tape.columns(raw, 2 * bins, 3 * bins - 1)?;
    let cx = tape_knots(tape, wl, MIN_WIDTH, range, bins)?;
    let cy = tape_knots(tape, hl, MIN_HEIGHT, range, bins)?;
    let dl = tape.offset(dl, derivative_shift());
    let dl = tape.softplus(dl);
    let dint = tape.offset(dl, MIN_DERIVATIVE);
    let ones = tape.constant(Tensor::ones(rows, 1));
    let ds = tape.concat(&[ones, dint, ones], Axis::Cols)?;

    // Bin membership is piecewise constant in the parameters, so it enters
    // as constant one-hot masks.
    let uv = tape.value(u).data().to_vec();
    let cxv = tape.value(cx).clone();
    let mut lo_mask = Tensor::zeros(rows, bins + 1);
    let mut hi_mask = Tensor::zeros(rows, bins + 1);
    let mut inside = vec![0.0; rows];
    let mut u_sub = vec![0.0; rows];
    for r in 0..rows {
        let knots = cxv.row(r);
        let v = uv[r];
        let k = RqSpline::bin(knots, v);
        lo_mask.set(r, k, 1.0);
        hi_mask.set(r, k + 1, 1.0);
        if v >= knots[0] && v <= knots[bins] {
            inside[r] = 1.0;
        } else {
            // Evaluate the unused spline branch at a harmless interior point.
            u_sub[r] = 0.5 * (knots[k] + knots[k + 1]);
        }
    }
    let lo_mask = tape.constant(lo_mask);
    let hi_mask = tape.constant(hi_mask);
    let inside_t = tape.constant(Tensor::column(inside.clone()));
    let outside_t = tape.constant(Tensor::column(inside.iter().map(|v| 1.0 - v).collect()));
    let u_sub = tape.constant(Tensor::column(u_sub));

    let pick = |t: &mut Tape, v: Var, mask: Var| -> Result<Var> {
        let m = t.mul(v, mask)?;
        Ok(t.sum_axis(m, Axis::Cols))
    };
    let x0 = pick(tape, cx, lo_mask)?;
    let x1 = pick(tape, cx, hi_mask)?;
    let y0 = pick(tape, cy, lo_mask)?;
    let y1 = pick(tape, cy, hi_mask)?;
    let d0 = pick(tape, ds, lo_mask)?;
    let d1 = pick(tape, ds, hi_mask)?;

    let u_in = tape.mul(u, inside_t)?;
    let u_sp = tape.add(u_in, u_sub)?;
    let w = tape.sub(x1, x0)?;
    let h = tape.sub(y1, y0)?;
    let s = tape.div(h, w)?;
    let du = tape.sub(u_sp, x0)?;
    let xi = tape.div(du, w)?;
    let neg = tape.scale(xi, -1.0);
    let om = tape.offset(neg, 1.0);
    let xo = tape.mul(xi, om)?;
    let xi2 = tape.square(xi);
    let om2 = tape.square(om);

    let a = tape.mul(s, xi2)?;
    let b = tape.mul(d0, xo)?;
    let inner = tape.add(a, b)?;
    let num = tape.mul(h, inner)?;
    let dsum = tape.add(d1, d0)?;
    let s2 = tape.scale(s, 2.0);
    let m = tape.sub(dsum, s2)?;
    let mxo = tape.mul(m, xo)?;
    let den = tape.add(s, mxo)?;
    let frac = tape.div(num, den)?;
    let y = tape.add(y0, frac)?;

    let t1 = tape.mul(d1, xi2)?;
    let t2 = tape.mul(s2, xo)?;
    let t3 = tape.mul(d0, om2)?;
    let dn = tape.add(t1, t2)?;
    let dn = tape.add(dn, t3)?;
    let ls = tape.ln(s);
    let ls = tape.scale(ls, 2.0);
    let ldn = tape.ln(dn);
    let lden = tape.ln(den);
    let lden = tape.scale(lden, -2.0);
    let logdet = tape.add(ls, ldn)?;
    let logdet = tape.add(logdet, lden)?;

    let y_in = tape.mul(y, inside_t)?;
    let u_out = tape.mul(u, outside_t)?;
    let value = tape.add(y_in, u_out)?;
    let logdet = tape.mul(logdet, inside_t)?;
    Ok((value, logdet))
}
