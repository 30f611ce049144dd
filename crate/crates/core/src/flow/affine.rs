use nalgebra::{DMatrix, DVector};

use crate::diff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{minibatch_adam, serialize, Mlp, MlpConfig, ModelDoc, Module, Standardizer, TrainConfig};
use crate::rng;

/// Gaussian conditional model `x = A(z) n + b(z)` with
/// `A(z) = L(z)ᵀ L(z) + Ω I` and `L(z)` upper triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFlow {
    z_std: Standardizer,
    net: Mlp,
    dim: usize,
    omega: f64,
}

fn tri_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Upper-triangular matrix from its row-major entries `(0,0), (0,1), .., (1,1), ..`.
fn upper(p: usize, entries: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p, p);
    let mut k = 0;
    for i in 0..p {
        for j in i..p {
            l[(i, j)] = entries[k];
            k += 1;
        }
    }
    l
}

fn a_matrix(p: usize, entries: &[f64], omega: f64) -> DMatrix<f64> {
    let l = upper(p, entries);
    l.transpose() * &l + DMatrix::identity(p, p) * omega
}

/// `0.5 |n|² + log det A` per row, `n = A⁻¹ (x - b)`, with analytic gradients
/// in `b` and the triangular entries of `L`.
struct AffineNll {
    grad_b: Tensor,
    grad_l: Tensor,
}

impl CustomOp for AffineNll {
    fn name(&self) -> &'static str {
        "affine_nll"
    }

    fn backward(&self, grad_output: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let scale_rows = |t: &Tensor| {
            let mut out = t.clone();
            for r in 0..t.rows() {
                let g = grad_output.get(r, 0);
                out.row_mut(r).iter_mut().for_each(|v| *v *= g);
            }
            out
        };
        vec![scale_rows(&self.grad_b), scale_rows(&self.grad_l)]
    }
}

fn affine_nll(tape: &mut Tape, b: Var, l: Var, x: &Tensor, omega: f64) -> Result<Var> {
    let (rows, p) = x.shape();
    let bv = tape.value(b).clone();
    let lv = tape.value(l).clone();
    let mut out = Vec::with_capacity(rows);
    let mut grad_b = Tensor::zeros(rows, p);
    let mut grad_l = Tensor::zeros(rows, tri_len(p));
    for r in 0..rows {
        let lm = upper(p, lv.row(r));
        let a = lm.transpose() * &lm + DMatrix::identity(p, p) * omega;
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NonFinite("affine flow scale matrix".into()))?;
        let resid = DVector::from_iterator(p, x.row(r).iter().zip(bv.row(r)).map(|(x, b)| x - b));
        let n = chol.solve(&resid);
        let w = chol.solve(&n);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        out.push(0.5 * n.norm_squared() + logdet);
        let g = chol.inverse() - &w * n.transpose();
        let gl = &lm * (&g + g.transpose());
        let mut k = 0;
        for i in 0..p {
            grad_b.set(r, i, -w[i]);
            for j in i..p {
                grad_l.set(r, k, gl[(i, j)]);
                k += 1;
            }
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("affine flow likelihood".into()));
    }
    Ok(tape.custom(&[b, l], Tensor::column(out), Box::new(AffineNll { grad_b, grad_l })))
}

impl Module for AffineFlow {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

impl AffineFlow {
    /// Model with `A = scale·I`-like output independent of `z` until trained:
    /// zero readout weights, readout bias at `(mean, sqrt(scale))`.
    fn initial(cond_dim: usize, mean: &[f64], scale: &[f64], hidden: &[usize], omega: f64, seed: u64) -> Result<Self> {
        let p = mean.len();
        let mut net = Mlp::init(MlpConfig::new(cond_dim, hidden, p + tri_len(p)), seed)?;
        let out = net.output_layer_mut();
        out.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let bias = out.bias.data_mut();
        bias[..p].copy_from_slice(mean);
        let mut k = p;
        for i in 0..p {
            for j in i..p {
                bias[k] = if i == j { (scale[i] - omega).max(omega).sqrt() } else { 0.0 };
                k += 1;
            }
        }
        Ok(Self {
            z_std: Standardizer::identity(cond_dim),
            net,
            dim: p,
            omega,
        })
    }

    /// Fixed `A`, `b` independent of the condition; for tests and examples.
    pub fn constant(cond_dim: usize, a_upper_factor: &[f64], b: &[f64], omega: f64) -> Result<Self> {
        let p = b.len();
        if a_upper_factor.len() != tri_len(p) {
            return Err(Error::dim("triangular factor has the wrong number of entries"));
        }
        let mut flow = Self::initial(cond_dim, b, &vec![1.0; p], &[1], omega, 0)?;
        flow.net.output_layer_mut().bias.data_mut()[p..].copy_from_slice(a_upper_factor);
        Ok(flow)
    }

    pub fn fit(
        cond: &Tensor,
        var: &Tensor,
        hidden: &[usize],
        omega: f64,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<(Self, Vec<f64>)> {
        let stds = var.column_stds();
        let mut flow = Self::initial(
            cond.cols(),
            &var.column_means(),
            &stds,
            hidden,
            omega,
            rng::derive(seed, &[0xaf1]),
        )?;
        flow.z_std = Standardizer::fit(cond);
        let zs = flow.z_std.apply(cond);
        let p = flow.dim;
        let losses = minibatch_adam(&mut flow, var.rows(), train, seed, |m, tape, params, idx| {
            let z = tape.constant(zs.select_rows(idx));
            let out = m.net.forward(tape, params, z)?;
            let b = tape.columns(out, 0, p)?;
            let l = tape.columns(out, p, p + tri_len(p))?;
            let nll = affine_nll(tape, b, l, &var.select_rows(idx), m.omega)?;
            Ok(tape.mean(nll))
        })?;
        Ok((flow, losses))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.net.config().input_dim
    }

    /// `(A(z), b(z))`.
    pub fn parameters_at(&self, z: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let out = self.net.predict_row(&self.z_std.apply_row(z))?;
        let p = self.dim;
        Ok((a_matrix(p, &out[p..], self.omega), DVector::from_column_slice(&out[..p])))
    }

    pub fn sample(&self, z: &[f64], n: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = self.parameters_at(z)?;
        Ok((a * DVector::from_column_slice(n) + b).iter().copied().collect())
    }

    pub fn invert(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = self.parameters_at(z)?;
        let chol = a.cholesky().ok_or_else(|| Error::NonFinite("affine flow scale matrix".into()))?;
        Ok(chol.solve(&(DVector::from_column_slice(x) - b)).iter().copied().collect())
    }

    pub fn log_likelihood(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        let (a, b) = self.parameters_at(z)?;
        let chol = a.cholesky().ok_or_else(|| Error::NonFinite("affine flow scale matrix".into()))?;
        let n = chol.solve(&(DVector::from_column_slice(x) - b));
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let p = self.dim as f64;
        Ok(-0.5 * n.norm_squared() - 0.5 * p * (2.0 * std::f64::consts::PI).ln() - logdet)
    }

    pub(crate) fn put(&self, doc: &mut ModelDoc) {
        doc.put("omega", [self.omega]);
        self.z_std.put(doc, "z");
        serialize::put_mlp(doc, "net", &self.net);
    }

    pub(crate) fn get(doc: &ModelDoc) -> Result<Self> {
        let net = serialize::get_mlp(doc, "net")?;
        let out = net.config().output_dim;
        let dim = (0..=out).find(|p| p + tri_len(*p) == out).ok_or_else(|| Error::parse("bad affine output width"))?;
        Ok(Self {
            z_std: Standardizer::get(doc, "z")?,
            net,
            dim,
            omega: doc.get_one("omega")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradient_check;

    #[test]
    fn nll_gradients_match_finite_differences() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5], vec![-0.4, 0.9]]).unwrap();
        let params = Tensor::from_rows(&[
            vec![0.1, -0.2, 1.1, 0.3, 0.9],
            vec![0.5, 0.0, 0.7, -0.2, 1.3],
            vec![-0.3, 0.4, 1.5, 0.6, 0.8],
        ])
        .unwrap();
        let err = gradient_check(
            |t, v| {
                let b = t.columns(v, 0, 2)?;
                let l = t.columns(v, 2, 5)?;
                let nll = affine_nll(t, b, l, &x, 1e-4)?;
                let sq = t.square(nll);
                Ok(t.sum(sq))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn constant_model_examples() {
        let id = AffineFlow::constant(1, &[1.0, 0.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(id.sample(&[3.0], &[0.4, -0.1]).unwrap(), vec![0.4, -0.1]);
        let s = 2f64.sqrt();
        let two = AffineFlow::constant(1, &[s, 0.0, s], &[1.0, 1.0], 0.0).unwrap();
        let x = two.sample(&[0.0], &[0.0, 0.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        let two0 = AffineFlow::constant(1, &[s, 0.0, s], &[0.0, 0.0], 0.0).unwrap();
        let n = two0.invert(&[0.0], &[4.0, 4.0]).unwrap();
        assert!((n[0] - 2.0).abs() < 1e-12 && (n[1] - 2.0).abs() < 1e-12);
    }
}
