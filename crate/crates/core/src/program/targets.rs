use rand::seq::index;

use crate::basis::ResponseBasis;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::flow::ConditionalFlow;
use crate::nn::{mse, train_regression, Mlp, MlpConfig, Standardizer, TrainConfig};
use crate::rng;
use crate::scm::{Dataset, Setting};

/// Floor added to the squared first moment when reporting implied variances.
const VARIANCE_FLOOR: f64 = 1e-6;

/// Regressors for `E[Y | inputs]` and `E[Y² | inputs]`, where the inputs are
/// `(x, z)` for instrumental variables and `(x, m)` for leaky mediators.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentRegressors {
    pub first: Mlp,
    pub second: Mlp,
}

impl MomentRegressors {
    /// Fits both regressors with hidden sizes (64, 32, 16).
    pub fn fit(dataset: &Dataset, train: &TrainConfig, seed: u64) -> Result<Self> {
        let inputs = dataset.regressor_input();
        let y = dataset.outcome();
        let y2 = y.map(|v| v * v);
        let cfg = MlpConfig::regressor(inputs.cols(), 1);
        let (first, _) = train_regression(&inputs, y, train, cfg.clone(), rng::derive(seed, &[1]))?;
        let (second, _) = train_regression(&inputs, &y2, train, cfg, rng::derive(seed, &[2]))?;
        Ok(Self { first, second })
    }

    pub fn input_dim(&self) -> usize {
        self.first.config().input_dim
    }

    /// `(φ̂₁, φ̂₂)` at one input row.
    pub fn predict_row(&self, input: &[f64]) -> Result<(f64, f64)> {
        Ok((self.first.predict_row(input)?[0], self.second.predict_row(input)?[0]))
    }

    /// Implied conditional variance `φ̂₂ − φ̂₁²`, clipped below at `1e-6`.
    pub fn implied_variance(&self, input: &[f64]) -> Result<f64> {
        let (m1, m2) = self.predict_row(input)?;
        Ok(m2.max(m1 * m1 + VARIANCE_FLOOR) - m1 * m1)
    }

    /// Root mean squared error of the first-moment regressor on a dataset.
    pub fn first_moment_rmse(&self, dataset: &Dataset) -> Result<f64> {
        Ok(mse(&self.first, &dataset.regressor_input(), dataset.outcome())?.sqrt())
    }
}

/// Everything the constraints need at the support points, computed once and
/// shared by every program built on the same data.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTargets {
    setting: Setting,
    support: Vec<usize>,
    noise: Tensor,
    psi: Tensor,
    first: Vec<f64>,
    second: Vec<f64>,
    treatment_std: Option<Standardizer>,
}

impl MomentTargets {
    /// Caches noise inputs, basis values and regression targets at `m`
    /// support points drawn uniformly without replacement.
    ///
    /// For instrumental variables the noise input is `h_z⁻¹(x)` and the basis
    /// is evaluated at `x`. For leaky mediators the noise input is the
    /// standardized treatment followed by `h_x⁻¹(m)`, and the basis is
    /// evaluated at `m`.
    pub fn build(
        dataset: &Dataset,
        flow: &ConditionalFlow,
        regressors: &MomentRegressors,
        basis: &ResponseBasis,
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = dataset.n();
        if m == 0 || m > n {
            return Err(Error::config(format!("support size must be in 1..={n}, got {m}")));
        }
        if flow.cond_dim() != dataset.flow_condition().cols() || flow.dim() != dataset.flow_variable().cols() {
            return Err(Error::dim("conditional model does not match the dataset"));
        }
        if basis.dim() != dataset.basis_input().cols() {
            return Err(Error::dim("basis input dim does not match the dataset"));
        }
        let inputs = dataset.regressor_input();
        if regressors.input_dim() != inputs.cols() {
            return Err(Error::dim("regressor input dim does not match the dataset"));
        }
        let mut r = rng::rng(rng::derive(seed, &[0x5u64]));
        let support = index::sample(&mut r, n, m).into_vec();

        let cond = dataset.flow_condition().select_rows(&support);
        let var = dataset.flow_variable().select_rows(&support);
        let recovered = flow.invert_rows(&cond, &var)?;
        let treatment_std = match dataset.setting() {
            Setting::Iv => None,
            Setting::Lm => Some(Standardizer::fit(dataset.treatments())),
        };
        let noise = match &treatment_std {
            None => recovered,
            Some(s) => s.apply(&dataset.treatments().select_rows(&support)).hstack(&recovered)?,
        };
        let psi = basis.evaluate_rows(&dataset.basis_input().select_rows(&support))?;
        let mut first = Vec::with_capacity(m);
        let mut second = Vec::with_capacity(m);
        for &i in &support {
            let (b1, b2) = regressors.predict_row(inputs.row(i))?;
            first.push(b1);
            second.push(b2);
        }
        let targets = Self {
            setting: dataset.setting(),
            support,
            noise,
            psi,
            first,
            second,
            treatment_std,
        };
        if !(targets.noise.all_finite()
            && targets.psi.all_finite()
            && targets.first.iter().chain(&targets.second).all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite("moment targets".into()));
        }
        Ok(targets)
    }

    /// Targets from explicit values; for tests and custom pipelines.
    pub fn from_parts(
        setting: Setting,
        noise: Tensor,
        psi: Tensor,
        first: Vec<f64>,
        second: Vec<f64>,
        treatment_std: Option<Standardizer>,
    ) -> Result<Self> {
        let m = noise.rows();
        if psi.rows() != m || first.len() != m || second.len() != m {
            return Err(Error::dim("target parts disagree on the number of support points"));
        }
        Ok(Self {
            setting,
            support: (0..m).collect(),
            noise,
            psi,
            first,
            second,
            treatment_std,
        })
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    /// Number of support points `M`.
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Dataset row of every support point.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Noise inputs of the coefficient model, one row per support point.
    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    /// Basis values, one row per support point.
    pub fn psi(&self) -> &Tensor {
        &self.psi
    }

    /// `B₁ⱼ`: first-moment targets.
    pub fn first(&self) -> &[f64] {
        &self.first
    }

    /// `B₂ⱼ`: second-moment targets.
    pub fn second(&self) -> &[f64] {
        &self.second
    }

    /// Standardization of the treatment used as the first leaky-mediator
    /// noise input.
    pub fn treatment_std(&self) -> Option<&Standardizer> {
        self.treatment_std.as_ref()
    }
}
