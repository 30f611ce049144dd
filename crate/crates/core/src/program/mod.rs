//! The constrained program behind each bound: a coefficient model `η`,
//! moment-matching constraints at the support points and a Monte-Carlo
//! estimate of the interventional mean.

mod eta;
mod targets;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::ResponseBasis;
use crate::diff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::nn::Module;
use crate::rng;
use crate::scm::Setting;

pub use eta::{EtaModel, OMEGA};
pub use targets::{MomentRegressors, MomentTargets};

/// Default number of noise draws per objective evaluation.
pub const DEFAULT_MC_BATCH: usize = 500;

/// Reduction of the constraint matrix `ν` to constraint values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// One constraint `ε − |ν_lj|` per entry.
    Sup,
    /// A single constraint `ε − |ν|₂`.
    Two,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sup" | "inf" | "max" => Ok(Norm::Sup),
            "two" | "l2" | "2" => Ok(Norm::Two),
            _ => Err(Error::parse(format!("unknown norm `{s}` (expected sup or two)"))),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::Sup => "sup",
            Norm::Two => "two",
        })
    }
}

/// Constraint values for a `2 x M` matrix `ν`.
pub fn constraint_scalars(nu: &Tensor, norm: Norm, epsilon: f64) -> Vec<f64> {
    match norm {
        Norm::Sup => nu.data().iter().map(|v| epsilon - v.abs()).collect(),
        Norm::Two => vec![epsilon - nu.data().iter().map(|v| v * v).sum::<f64>().sqrt()],
    }
}

/// Settings shared by every program of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramSettings {
    pub norm: Norm,
    pub epsilon: f64,
    pub mc_batch: usize,
}

impl ProgramSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("slack epsilon must be positive and finite"));
        }
        if self.mc_batch == 0 {
            return Err(Error::config("Monte-Carlo batch must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Mediator<'a> {
    flow: &'a ConditionalFlow,
    /// Observed treatments, standardized like the support noise inputs.
    treatments: Tensor,
}

/// Program for one intervention value `x*`: minimize or maximize the
/// interventional mean over `η` subject to the moment constraints.
#[derive(Clone, Debug)]
pub struct CausalProgram<'a> {
    targets: &'a MomentTargets,
    basis: &'a ResponseBasis,
    mediator: Option<Mediator<'a>>,
    settings: ProgramSettings,
    x_star: Vec<f64>,
    psi_star: Vec<f64>,
}

impl<'a> CausalProgram<'a> {
    /// Instrumental-variable program; the objective averages
    /// `ψ(x*)ᵀ μ(n)` over standard-normal `n`.
    pub fn iv(targets: &'a MomentTargets, basis: &'a ResponseBasis, x_star: &[f64], settings: ProgramSettings) -> Result<Self> {
        settings.validate()?;
        if targets.setting() != Setting::Iv {
            return Err(Error::config("instrumental-variable program needs instrumental-variable targets"));
        }
        Self::check_basis(targets, basis)?;
        Ok(Self {
            targets,
            basis,
            mediator: None,
            settings,
            x_star: x_star.to_vec(),
            psi_star: basis.evaluate(x_star)?,
        })
    }

    /// Leaky-mediator program; the objective resamples observed treatments
    /// as the first noise input and pushes fresh mediator noise through
    /// `h_{x*}`.
    pub fn lm(
        targets: &'a MomentTargets,
        basis: &'a ResponseBasis,
        flow: &'a ConditionalFlow,
        treatments: &Tensor,
        x_star: &[f64],
        settings: ProgramSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let std = targets
            .treatment_std()
            .filter(|_| targets.setting() == Setting::Lm)
            .ok_or_else(|| Error::config("leaky-mediator program needs leaky-mediator targets"))?;
        Self::check_basis(targets, basis)?;
        if x_star.len() != flow.cond_dim() || treatments.cols() != flow.cond_dim() || std.dim() != flow.cond_dim() {
            return Err(Error::dim(format!(
                "intervention has {} values, treatments {} columns, mediator model conditions on {}",
                x_star.len(),
                treatments.cols(),
                flow.cond_dim()
            )));
        }
        if basis.dim() != flow.dim() || targets.noise().cols() != flow.cond_dim() + flow.dim() {
            return Err(Error::dim("mediator model does not match the basis or the targets"));
        }
        Ok(Self {
            targets,
            basis,
            mediator: Some(Mediator {
                flow,
                treatments: std.apply(treatments),
            }),
            settings,
            x_star: x_star.to_vec(),
            psi_star: Vec::new(),
        })
    }

    fn check_basis(targets: &MomentTargets, basis: &ResponseBasis) -> Result<()> {
        if targets.psi().cols() != basis.size() {
            return Err(Error::dim(format!(
                "targets cache {} basis values, basis has {}",
                targets.psi().cols(),
                basis.size()
            )));
        }
        Ok(())
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    pub fn settings(&self) -> &ProgramSettings {
        &self.settings
    }

    pub fn targets(&self) -> &MomentTargets {
        self.targets
    }

    /// Noise-input dimension the coefficient model must accept.
    pub fn noise_dim(&self) -> usize {
        self.targets.noise().cols()
    }

    /// Number of constraint values under the configured norm.
    pub fn constraint_count(&self) -> usize {
        match self.settings.norm {
            Norm::Sup => 2 * self.targets.len(),
            Norm::Two => 1,
        }
    }

    fn check_eta(&self, eta: &EtaModel) -> Result<()> {
        if eta.k() != self.basis.size() || eta.noise_dim() != self.noise_dim() {
            return Err(Error::dim(format!(
                "coefficient model ({} inputs, K = {}) does not fit the program ({} inputs, K = {})",
                eta.noise_dim(),
                eta.k(),
                self.noise_dim(),
                self.basis.size()
            )));
        }
        Ok(())
    }

    /// `(A₁ⱼ, A₂ⱼ)` implied by `η` at support point `j`.
    pub fn implied_moments(&self, eta: &EtaModel, j: usize) -> Result<(f64, f64)> {
        self.check_eta(eta)?;
        eta.moments(self.targets.noise().row(j), self.targets.psi().row(j))
    }

    /// `ν₁ = B₁ − A₁` and `ν₂ = B₂ − A₂` as `M x 1` columns on the tape.
    pub fn tape_constraint_matrix(&self, tape: &mut Tape, eta: &EtaModel, params: &[Var]) -> Result<(Var, Var)> {
        self.check_eta(eta)?;
        let (a1, a2) = eta.tape_moments(tape, params, self.targets.noise(), self.targets.psi())?;
        let b1 = tape.constant(Tensor::column(self.targets.first().to_vec()));
        let b2 = tape.constant(Tensor::column(self.targets.second().to_vec()));
        Ok((tape.sub(b1, a1)?, tape.sub(b2, a2)?))
    }

    /// Column of constraint values `c ≥ 0` on the tape.
    pub fn tape_constraints(&self, tape: &mut Tape, eta: &EtaModel, params: &[Var]) -> Result<Var> {
        let (nu1, nu2) = self.tape_constraint_matrix(tape, eta, params)?;
        let eps = self.settings.epsilon;
        match self.settings.norm {
            Norm::Sup => {
                let nu = tape.concat(&[nu1, nu2], Axis::Rows)?;
                let mag = tape.abs(nu);
                let neg = tape.scale(mag, -1.0);
                Ok(tape.offset(neg, eps))
            }
            Norm::Two => {
                let s1 = tape.square(nu1);
                let s2 = tape.square(nu2);
                let s = tape.add(s1, s2)?;
                let total = tape.sum(s);
                let norm = tape.sqrt(total);
                let neg = tape.scale(norm, -1.0);
                Ok(tape.offset(neg, eps))
            }
        }
    }

    /// `ν` as a `2 x M` matrix, first row for the first moment.
    pub fn constraint_matrix(&self, eta: &EtaModel) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = eta.register(&mut tape);
        let (nu1, nu2) = self.tape_constraint_matrix(&mut tape, eta, &params)?;
        let mut data = tape.value(nu1).data().to_vec();
        data.extend_from_slice(tape.value(nu2).data());
        Tensor::new(2, self.targets.len(), data)
    }

    pub fn constraint_values(&self, eta: &EtaModel) -> Result<Vec<f64>> {
        Ok(constraint_scalars(&self.constraint_matrix(eta)?, self.settings.norm, self.settings.epsilon))
    }

    /// Monte-Carlo estimate of `E[Y | do(x*)]` under `η`, from
    /// `mc_batch` draws seeded by `seed`.
    pub fn tape_objective(&self, tape: &mut Tape, eta: &EtaModel, params: &[Var], seed: u64) -> Result<Var> {
        self.check_eta(eta)?;
        let b = self.settings.mc_batch;
        let mut r = rng::rng(seed);
        match &self.mediator {
            None => {
                let noise = rng::standard_normal(&mut r, b, eta.noise_dim());
                let mu = eta.tape_mean(tape, params, &noise)?;
                let psi = tape.constant(Tensor::column(self.psi_star.clone()));
                let value = tape.matmul(mu, psi)?;
                Ok(tape.mean(value))
            }
            Some(med) => {
                let n = med.treatments.rows();
                let picks: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
                let n_x = med.treatments.select_rows(&picks);
                let n_m = rng::standard_normal(&mut r, b, med.flow.dim());
                let cond = Tensor::new(b, self.x_star.len(), self.x_star.repeat(b))?;
                let m = med.flow.sample_rows(&cond, &n_m)?;
                let psi = self.basis.evaluate_rows(&m)?;
                let noise = n_x.hstack(&n_m)?;
                let mu = eta.tape_mean(tape, params, &noise)?;
                let psi = tape.constant(psi);
                let value = eta::row_dot(tape, mu, psi)?;
                Ok(tape.mean(value))
            }
        }
    }

    pub fn objective(&self, eta: &EtaModel, seed: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let params = eta.register(&mut tape);
        let v = self.tape_objective(&mut tape, eta, &params, seed)?;
        Ok(tape.value(v).item())
    }
}
