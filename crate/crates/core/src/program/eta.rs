use nalgebra::DMatrix;

use crate::diff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{serialize, Mlp, MlpConfig, ModelDoc, Module};
use crate::rng;

/// Jitter added to every coefficient covariance.
pub const OMEGA: f64 = 1e-4;

/// Diagonal of the initial covariance factor.
const INITIAL_FACTOR: f64 = 0.1;

/// Conditional distribution of response coefficients `θ | n` through its
/// first two moments: mean `μ(n)` and covariance `Σ(n) = L(n)ᵀ L(n) + Ω I`
/// with `L(n)` upper triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct EtaModel {
    mu: Mlp,
    sigma: Mlp,
    k: usize,
    omega: f64,
}

pub(crate) fn tri_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Row and column of each upper-triangular entry, row-major.
fn tri_index(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect()
}

/// Per-row inner products of two equally shaped matrices.
pub(crate) fn row_dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    Ok(tape.sum_axis(prod, Axis::Cols))
}

impl Module for EtaModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.mu.parameters();
        p.extend(self.sigma.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mu.parameters_mut();
        p.extend(self.sigma.parameters_mut());
        p
    }
}

impl EtaModel {
    /// Mean network with hidden sizes (16, 16) starting at `μ(n) ≈ theta`,
    /// covariance network with hidden sizes (32, 32) starting near
    /// `L = 0.1 I`.
    pub fn new(noise_dim: usize, theta: &[f64], seed: u64) -> Result<Self> {
        let k = theta.len();
        if k == 0 {
            return Err(Error::config("coefficient vector must be nonempty"));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("initial coefficients".into()));
        }
        let mut mu = Mlp::init(MlpConfig::new(noise_dim, &[16, 16], k), rng::derive(seed, &[0xe0]))?;
        let out = mu.output_layer_mut();
        out.weight.data_mut().iter_mut().for_each(|w| *w *= 0.01);
        out.bias.data_mut().copy_from_slice(theta);

        let mut sigma = Mlp::init(MlpConfig::new(noise_dim, &[32, 32], tri_len(k)), rng::derive(seed, &[0xe1]))?;
        let out = sigma.output_layer_mut();
        out.weight.data_mut().iter_mut().for_each(|w| *w *= 0.01);
        for (b, (i, j)) in out.bias.data_mut().iter_mut().zip(tri_index(k)) {
            *b = if i == j { INITIAL_FACTOR } else { 0.0 };
        }
        Self::from_networks(mu, sigma, OMEGA)
    }

    pub fn from_networks(mu: Mlp, sigma: Mlp, omega: f64) -> Result<Self> {
        let k = mu.config().output_dim;
        if sigma.config().output_dim != tri_len(k) {
            return Err(Error::dim(format!(
                "covariance network emits {} entries, expected {}",
                sigma.config().output_dim,
                tri_len(k)
            )));
        }
        if sigma.config().input_dim != mu.config().input_dim {
            return Err(Error::dim("mean and covariance networks read different noise dims"));
        }
        if !(omega > 0.0) {
            return Err(Error::config("covariance jitter must be positive"));
        }
        Ok(Self { mu, sigma, k, omega })
    }

    /// Number of coefficients `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn noise_dim(&self) -> usize {
        self.mu.config().input_dim
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn mean_network(&self) -> &Mlp {
        &self.mu
    }

    pub fn mean_network_mut(&mut self) -> &mut Mlp {
        &mut self.mu
    }

    pub fn covariance_network_mut(&mut self) -> &mut Mlp {
        &mut self.sigma
    }

    pub fn mean(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.mu.predict_row(noise)
    }

    /// Upper-triangular factor `L(n)`.
    pub fn factor(&self, noise: &[f64]) -> Result<DMatrix<f64>> {
        let entries = self.sigma.predict_row(noise)?;
        let mut l = DMatrix::zeros(self.k, self.k);
        for (v, (i, j)) in entries.iter().zip(tri_index(self.k)) {
            l[(i, j)] = *v;
        }
        Ok(l)
    }

    pub fn covariance(&self, noise: &[f64]) -> Result<DMatrix<f64>> {
        let l = self.factor(noise)?;
        Ok(l.transpose() * &l + DMatrix::identity(self.k, self.k) * self.omega)
    }

    /// `(E[θᵀψ], E[(θᵀψ)²])` at one noise value.
    pub fn moments(&self, noise: &[f64], psi: &[f64]) -> Result<(f64, f64)> {
        if psi.len() != self.k {
            return Err(Error::dim(format!("basis has {} values, model has {}", psi.len(), self.k)));
        }
        let mu = self.mean(noise)?;
        let a1: f64 = mu.iter().zip(psi).map(|(m, p)| m * p).sum();
        let l = self.factor(noise)?;
        let lpsi = &l * nalgebra::DVector::from_column_slice(psi);
        let psi2: f64 = psi.iter().map(|p| p * p).sum();
        Ok((a1, lpsi.norm_squared() + self.omega * psi2 + a1 * a1))
    }

    /// Splits registered parameters into the mean and covariance networks.
    pub(crate) fn split<'p>(&self, params: &'p [Var]) -> (&'p [Var], &'p [Var]) {
        params.split_at(2 * self.mu.layers().len())
    }

    /// `μ(n)` for every row of `noise`, recorded on the tape.
    pub(crate) fn tape_mean(&self, tape: &mut Tape, params: &[Var], noise: &Tensor) -> Result<Var> {
        let (mu, _) = self.split(params);
        let n = tape.constant(noise.clone());
        self.mu.forward(tape, mu, n)
    }

    /// Rowwise `(A1, A2)` for noise rows and basis rows, as `r x 1` columns:
    /// `A1 = ψᵀμ`, `A2 = |Lψ|² + Ω|ψ|² + A1²`.
    pub(crate) fn tape_moments(
        &self,
        tape: &mut Tape,
        params: &[Var],
        noise: &Tensor,
        psi: &Tensor,
    ) -> Result<(Var, Var)> {
        if psi.cols() != self.k || psi.rows() != noise.rows() {
            return Err(Error::dim(format!(
                "basis rows {:?} do not match noise rows {} and K = {}",
                psi.shape(),
                noise.rows(),
                self.k
            )));
        }
        let (mu_p, sigma_p) = self.split(params);
        let n = tape.constant(noise.clone());
        let mu = self.mu.forward(tape, mu_p, n)?;
        let psi_v = tape.constant(psi.clone());
        let a1 = row_dot(tape, mu, psi_v)?;

        // (Lψ)_i = Σ_{j ≥ i} L_ij ψ_j: scale each entry by ψ_j, then sum
        // entries of the same row i.
        let idx = tri_index(self.k);
        let rows = psi.rows();
        let mut spread = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            spread.extend(idx.iter().map(|&(_, j)| psi.get(r, j)));
        }
        let mut gather = Tensor::zeros(idx.len(), self.k);
        for (t, &(i, _)) in idx.iter().enumerate() {
            gather.set(t, i, 1.0);
        }
        let entries = self.sigma.forward(tape, sigma_p, n)?;
        let spread = tape.constant(Tensor::new(rows, idx.len(), spread)?);
        let scaled = tape.mul(entries, spread)?;
        let gather = tape.constant(gather);
        let lpsi = tape.matmul(scaled, gather)?;
        let sq = tape.square(lpsi);
        let quad = tape.sum_axis(sq, Axis::Cols);
        let jitter = Tensor::column((0..rows).map(|r| self.omega * psi.row(r).iter().map(|p| p * p).sum::<f64>()).collect());
        let jitter = tape.constant(jitter);
        let var = tape.add(quad, jitter)?;
        let a1_sq = tape.square(a1);
        let a2 = tape.add(var, a1_sq)?;
        Ok((a1, a2))
    }

    pub fn put(&self, doc: &mut ModelDoc, prefix: &str) {
        doc.put(&format!("{prefix}.omega"), [self.omega]);
        serialize::put_mlp(doc, &format!("{prefix}.mu"), &self.mu);
        serialize::put_mlp(doc, &format!("{prefix}.sigma"), &self.sigma);
    }

    pub fn get(doc: &ModelDoc, prefix: &str) -> Result<Self> {
        Self::from_networks(
            serialize::get_mlp(doc, &format!("{prefix}.mu"))?,
            serialize::get_mlp(doc, &format!("{prefix}.sigma"))?,
            doc.get_one(&format!("{prefix}.omega"))?,
        )
    }
}
