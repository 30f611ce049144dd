use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::rqs::{self, RqSpline};
use crate::nn::{minibatch_adam, serialize, Mlp, MlpConfig, ModelDoc, Module, Standardizer, TrainConfig};
use crate::rng;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Autoregressive spline flow in standardized coordinates.
///
/// For dimension `d` a conditioner network reads `(z, x_<d)` and returns the
/// raw parameters of a rational-quadratic spline plus a shift `a` and
/// log-scale `s`. The noise is `n_d = RQS((x_d - a) e^{-s})`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineFlow {
    z_std: Standardizer,
    x_std: Standardizer,
    conditioners: Vec<Mlp>,
    bins: usize,
    range: f64,
}

struct DimTransform {
    spline: RqSpline,
    shift: f64,
    log_scale: f64,
}

impl Module for SplineFlow {
    fn parameters(&self) -> Vec<&Tensor> {
        self.conditioners.iter().flat_map(|m| m.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.conditioners.iter_mut().flat_map(|m| m.parameters_mut()).collect()
    }
}

impl SplineFlow {
    /// Identity-initialized flow: zero readout layers, so every spline is
    /// the identity and `n = (x - mean) / scale`.
    pub fn initial(
        z_std: Standardizer,
        x_std: Standardizer,
        hidden: &[usize],
        bins: usize,
        range: f64,
        seed: u64,
    ) -> Result<Self> {
        if bins < 2 || !(range > 0.0) {
            return Err(Error::config("spline flow needs at least 2 bins and a positive range"));
        }
        let q = z_std.dim();
        let conditioners = (0..x_std.dim())
            .map(|d| {
                let cfg = MlpConfig::new(q + d, hidden, rqs::param_count(bins) + 2);
                let mut m = Mlp::init(cfg, rng::derive(seed, &[0x5f, d as u64]))?;
                let out = m.output_layer_mut();
                out.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
                out.bias.data_mut().iter_mut().for_each(|w| *w = 0.0);
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            z_std,
            x_std,
            conditioners,
            bins,
            range,
        })
    }

    pub fn fit(
        cond: &Tensor,
        var: &Tensor,
        hidden: &[usize],
        bins: usize,
        range: f64,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<(Self, Vec<f64>)> {
        let mut flow = Self::initial(Standardizer::fit(cond), Standardizer::fit(var), hidden, bins, range, seed)?;
        let zs = flow.z_std.apply(cond);
        let xs = flow.x_std.apply(var);
        let inputs: Vec<Tensor> = (0..var.cols())
            .map(|d| {
                if d == 0 {
                    Ok(zs.clone())
                } else {
                    let prev = Tensor::new(
                        xs.rows(),
                        d,
                        (0..xs.rows()).flat_map(|r| xs.row(r)[..d].to_vec()).collect(),
                    )?;
                    zs.hstack(&prev)
                }
            })
            .collect::<Result<_>>()?;
        let losses = minibatch_adam(&mut flow, var.rows(), train, seed, |m, tape, params, idx| {
            let mut total: Option<Var> = None;
            let mut offset = 0;
            for (d, net) in m.conditioners.iter().enumerate() {
                let count = 2 * net.layers().len();
                let p = &params[offset..offset + count];
                offset += count;
                let inp = tape.constant(inputs[d].select_rows(idx));
                let x = tape.constant(Tensor::column(idx.iter().map(|&r| xs.get(r, d)).collect()));
                let ll = m.dim_log_likelihood(tape, net, p, inp, x)?;
                total = Some(match total {
                    None => ll,
                    Some(t) => tape.add(t, ll)?,
                });
            }
            let total = total.expect("at least one dimension");
            let mean = tape.mean(total);
            Ok(tape.scale(mean, -1.0))
        })?;
        Ok((flow, losses))
    }

    /// Per-row log-density of standardized `x_d`, up to the constants
    /// `-½ ln 2π - ln scale_d`.
    fn dim_log_likelihood(&self, tape: &mut Tape, net: &Mlp, params: &[Var], inp: Var, x: Var) -> Result<Var> {
        let k = rqs::param_count(self.bins);
        let out = net.forward(tape, params, inp)?;
        let raw = tape.columns(out, 0, k)?;
        let a = tape.columns(out, k, k + 1)?;
        let s = tape.columns(out, k + 1, k + 2)?;
        let centred = tape.sub(x, a)?;
        let neg_s = tape.scale(s, -1.0);
        let inv = tape.exp(neg_s);
        let u = tape.mul(centred, inv)?;
        let (n, logdet) = rqs::tape_forward(tape, raw, u, self.bins, self.range)?;
        let n2 = tape.square(n);
        let n2 = tape.scale(n2, -0.5);
        let ll = tape.add(n2, logdet)?;
        tape.add(ll, neg_s)
    }

    fn transform(&self, d: usize, zs: &[f64], xs_prev: &[f64]) -> Result<DimTransform> {
        let mut inp = zs.to_vec();
        inp.extend_from_slice(xs_prev);
        let out = self.conditioners[d].predict_row(&inp)?;
        let k = rqs::param_count(self.bins);
        Ok(DimTransform {
            spline: RqSpline::from_raw(&out[..k], self.bins, self.range),
            shift: out[k],
            log_scale: out[k + 1],
        })
    }

    pub fn dim(&self) -> usize {
        self.x_std.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.z_std.dim()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn sample(&self, z: &[f64], n: &[f64]) -> Result<Vec<f64>> {
        let zs = self.z_std.apply_row(z);
        let mut xs = Vec::with_capacity(n.len());
        for (d, &nd) in n.iter().enumerate() {
            let t = self.transform(d, &zs, &xs)?;
            let u = t.spline.inverse(nd);
            xs.push(u * t.log_scale.exp() + t.shift);
        }
        Ok(xs.iter().enumerate().map(|(d, &v)| self.x_std.restore(d, v)).collect())
    }

    /// Row-wise [`SplineFlow::sample`] with one conditioner pass per
    /// dimension over all rows.
    pub fn sample_rows(&self, cond: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (rows, p) = noise.shape();
        let zs: Vec<f64> = (0..rows).flat_map(|r| self.z_std.apply_row(cond.row(r))).collect();
        let zs = Tensor::new(rows, cond.cols(), zs)?;
        let k = rqs::param_count(self.bins);
        let mut xs = vec![0.0; rows * p];
        for d in 0..p {
            let out = if d == 0 {
                self.conditioners[d].predict(&zs)?
            } else {
                let prev: Vec<f64> = xs.chunks(p).flat_map(|row| row[..d].to_vec()).collect();
                self.conditioners[d].predict(&zs.hstack(&Tensor::new(rows, d, prev)?)?)?
            };
            for r in 0..rows {
                let o = out.row(r);
                let spline = RqSpline::from_raw(&o[..k], self.bins, self.range);
                xs[r * p + d] = spline.inverse(noise.get(r, d)) * o[k + 1].exp() + o[k];
            }
        }
        for row in xs.chunks_mut(p) {
            for (d, v) in row.iter_mut().enumerate() {
                *v = self.x_std.restore(d, *v);
            }
        }
        Tensor::new(rows, p, xs)
    }

    pub fn invert(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.invert_with_log_det(z, x)?.0)
    }

    fn invert_with_log_det(&self, z: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let zs = self.z_std.apply_row(z);
        let xs = self.x_std.apply_row(x);
        let mut n = Vec::with_capacity(xs.len());
        let mut logdet = 0.0;
        for d in 0..xs.len() {
            let t = self.transform(d, &zs, &xs[..d])?;
            let u = (xs[d] - t.shift) * (-t.log_scale).exp();
            let (nd, ld) = t.spline.forward(u);
            n.push(nd);
            logdet += ld - t.log_scale - self.x_std.scale[d].ln();
        }
        Ok((n, logdet))
    }

    pub fn log_likelihood(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        let (n, logdet) = self.invert_with_log_det(z, x)?;
        Ok(logdet - n.iter().map(|v| 0.5 * v * v + HALF_LN_2PI).sum::<f64>())
    }

    /// Knot derivatives of the spline used for dimension `d` at `(z, x_<d)`.
    pub fn knot_derivatives(&self, d: usize, z: &[f64], x_prev: &[f64]) -> Result<Vec<f64>> {
        let zs = self.z_std.apply_row(z);
        let xs = self.x_std.apply_row(x_prev);
        Ok(self.transform(d, &zs, &xs[..d])?.spline.knot_derivatives().to_vec())
    }

    pub(crate) fn put(&self, doc: &mut ModelDoc) {
        doc.put("bins", [self.bins]);
        doc.put("range", [self.range]);
        self.z_std.put(doc, "z");
        self.x_std.put(doc, "x");
        for (d, m) in self.conditioners.iter().enumerate() {
            serialize::put_mlp(doc, &format!("cond{d}"), m);
        }
    }

    pub(crate) fn get(doc: &ModelDoc) -> Result<Self> {
        let x_std = Standardizer::get(doc, "x")?;
        let conditioners = (0..x_std.dim())
            .map(|d| serialize::get_mlp(doc, &format!("cond{d}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            z_std: Standardizer::get(doc, "z")?,
            x_std,
            conditioners,
            bins: doc.get_one("bins")?,
            range: doc.get_one("range")?,
        })
    }
}
