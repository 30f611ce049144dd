//! Synthetic structural causal models with known interventional effects.
//!
//! All exogenous noises and confounders are independent standard normals.
//! Only observed variables are returned; confounders are discarded.

mod dataset;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, Setting};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{train_regression, MlpConfig, TrainConfig};
use crate::rng;

/// Default sample size of generated datasets.
pub const DEFAULT_N: usize = 10_000;
/// Default number of draws for the Monte-Carlo effect oracle.
pub const DEFAULT_MC_DRAWS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScmName {
    IvLin1dWeakAdd,
    IvQuad1dStrong,
    IvQuad1dWeak,
    IvLin2dStrong,
    IvLin2dWeak,
    IvQuad2dStrongAdd,
    IvQuad2dWeak,
    IvQuad3dWeak,
    LmLin1_2d,
    LmLin2_2d,
}

impl ScmName {
    pub const ALL: [ScmName; 10] = [
        ScmName::IvLin1dWeakAdd,
        ScmName::IvQuad1dStrong,
        ScmName::IvQuad1dWeak,
        ScmName::IvLin2dStrong,
        ScmName::IvLin2dWeak,
        ScmName::IvQuad2dStrongAdd,
        ScmName::IvQuad2dWeak,
        ScmName::IvQuad3dWeak,
        ScmName::LmLin1_2d,
        ScmName::LmLin2_2d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScmName::IvLin1dWeakAdd => "IV-lin-1d-weak-add",
            ScmName::IvQuad1dStrong => "IV-quad-1d-strong",
            ScmName::IvQuad1dWeak => "IV-quad-1d-weak",
            ScmName::IvLin2dStrong => "IV-lin-2d-strong",
            ScmName::IvLin2dWeak => "IV-lin-2d-weak",
            ScmName::IvQuad2dStrongAdd => "IV-quad-2d-strong-add",
            ScmName::IvQuad2dWeak => "IV-quad-2d-weak",
            ScmName::IvQuad3dWeak => "IV-quad-3d-weak",
            ScmName::LmLin1_2d => "LM-lin1-2d",
            ScmName::LmLin2_2d => "LM-lin2-2d",
        }
    }

    pub fn valid_names() -> String {
        let mut names: Vec<&str> = Self::ALL.iter().map(|n| n.as_str()).collect();
        names.extend(["LM-lin-2d-strong", "LM-lin-2d-weak"]);
        names.join(", ")
    }

    pub fn setting(self) -> Setting {
        match self {
            ScmName::LmLin1_2d | ScmName::LmLin2_2d => Setting::Lm,
            _ => Setting::Iv,
        }
    }

    /// Dimension of the treatment `X`.
    pub fn treatment_dim(self) -> usize {
        match self {
            ScmName::IvLin1dWeakAdd | ScmName::IvQuad1dStrong | ScmName::IvQuad1dWeak => 1,
            ScmName::IvQuad3dWeak => 3,
            _ => 2,
        }
    }

    /// Closed-form `E[Y | do(X = x*)]`.
    pub fn true_effect(self, x_star: &[f64]) -> Result<f64> {
        self.check_dim(x_star)?;
        let x = x_star;
        Ok(match self {
            ScmName::IvLin1dWeakAdd => x[0],
            ScmName::IvQuad1dStrong | ScmName::IvQuad1dWeak => 0.3 * x[0] * x[0],
            ScmName::IvLin2dStrong => x[0] + x[1],
            ScmName::IvLin2dWeak => 5.0 * x[0] + 6.0 * x[1],
            ScmName::IvQuad2dStrongAdd => 2.0 * x[0] * x[0] + 2.0 * x[1] * x[1],
            ScmName::IvQuad2dWeak => 5.0 * x[0] * x[0] + 6.0 * x[1] * x[1],
            ScmName::IvQuad3dWeak => 2.0 * x[0] * x[0] + 2.0 * x[1] * x[1] + 2.0 * x[2],
            // m = a x + b c - e_m, so E[(m1 + m2)(c1 + c2 + u1 + u2)] = 2b.
            ScmName::LmLin1_2d => 2.0 * x[0] + x[1] - 6.0,
            ScmName::LmLin2_2d => 6.0 * x[0] + 3.0 * x[1] - 0.6,
        })
    }

    fn check_dim(self, x_star: &[f64]) -> Result<()> {
        if x_star.len() != self.treatment_dim() {
            return Err(Error::dim(format!(
                "{} has treatment dimension {}, got x* of length {}",
                self,
                self.treatment_dim(),
                x_star.len()
            )));
        }
        Ok(())
    }

    /// `(instrument gain, confounder gain)` in `x = a z + b c + e_x`.
    fn iv_gains(self) -> (f64, f64) {
        match self {
            ScmName::IvLin1dWeakAdd | ScmName::IvQuad1dWeak => (3.0, 0.5),
            ScmName::IvQuad1dStrong => (0.5, 3.0),
            ScmName::IvLin2dStrong => (0.5, 2.0),
            ScmName::IvQuad2dStrongAdd => (1.0, 2.0),
            ScmName::IvLin2dWeak | ScmName::IvQuad2dWeak | ScmName::IvQuad3dWeak => (2.0, 1.0),
            ScmName::LmLin1_2d | ScmName::LmLin2_2d => unreachable!("not an IV model"),
        }
    }

    /// `(treatment gain a, confounder gain b, interaction k)` in
    /// `m = a x + b c - e_m`, `y = 2 m1 + m2 - k (m1 + m2)(c1 + c2 + u1 + u2) + e_y`.
    fn lm_gains(self) -> (f64, f64, f64) {
        match self {
            ScmName::LmLin1_2d => (1.0, 3.0, 1.0),
            ScmName::LmLin2_2d => (3.0, 1.0, 0.3),
            _ => unreachable!("not an LM model"),
        }
    }

    fn iv_outcome(self, x: &[f64], c: &[f64], e_y: f64) -> f64 {
        let cs: f64 = c.iter().sum();
        let base = match self {
            ScmName::IvLin1dWeakAdd => x[0] - 6.0 * c[0],
            ScmName::IvQuad1dStrong | ScmName::IvQuad1dWeak => 0.3 * x[0] * x[0] - 1.5 * x[0] * c[0],
            ScmName::IvLin2dStrong => (x[0] + x[1]) - 3.0 * (x[0] + x[1]) * cs,
            ScmName::IvLin2dWeak => 5.0 * x[0] + 6.0 * x[1] - x[0] * cs,
            ScmName::IvQuad2dStrongAdd => 2.0 * x[0] * x[0] + 2.0 * x[1] * x[1] - cs,
            ScmName::IvQuad2dWeak => 5.0 * x[0] * x[0] + 6.0 * x[1] * x[1] - (x[0] + x[1]) * cs,
            ScmName::IvQuad3dWeak => {
                2.0 * x[0] * x[0] + 2.0 * x[1] * x[1] + 2.0 * x[2] - 0.3 * (x[1] + x[2]) * cs
            }
            ScmName::LmLin1_2d | ScmName::LmLin2_2d => unreachable!("not an IV model"),
        };
        base + e_y
    }

    /// One joint draw. `forced` replaces the structural equation of `X`.
    /// `scale` multiplies every confounder (0 gives an unconfounded model).
    fn draw(self, r: &mut impl Rng, scale: f64, forced: Option<&[f64]>) -> Row {
        let d = self.treatment_dim();
        let mut normals = |k: usize| -> Vec<f64> { (0..k).map(|_| r.sample::<f64, _>(StandardNormal)).collect() };
        match self.setting() {
            Setting::Iv => {
                let c: Vec<f64> = normals(d).into_iter().map(|v| v * scale).collect();
                let z = normals(d);
                let e_x = normals(d);
                let e_y = normals(1)[0];
                let (a, b) = self.iv_gains();
                let x: Vec<f64> = match forced {
                    Some(xs) => xs.to_vec(),
                    None => (0..d).map(|i| a * z[i] + b * c[i] + e_x[i]).collect(),
                };
                let y = self.iv_outcome(&x, &c, e_y);
                Row { first: z, second: x, y }
            }
            Setting::Lm => {
                let c: Vec<f64> = normals(d).into_iter().map(|v| v * scale).collect();
                let u: Vec<f64> = normals(d).into_iter().map(|v| v * scale).collect();
                let e_x = normals(d);
                let e_m = normals(d);
                let e_y = normals(1)[0];
                let (a, b, k) = self.lm_gains();
                let x: Vec<f64> = match forced {
                    Some(xs) => xs.to_vec(),
                    None => (0..d).map(|i| u[i] + e_x[i]).collect(),
                };
                let m: Vec<f64> = (0..d).map(|i| a * x[i] + b * c[i] - e_m[i]).collect();
                let s: f64 = c.iter().sum::<f64>() + u.iter().sum::<f64>();
                let y = 2.0 * m[0] + m[1] - k * (m[0] + m[1]) * s + e_y;
                Row { first: x, second: m, y }
            }
        }
    }
}

struct Row {
    first: Vec<f64>,
    second: Vec<f64>,
    y: f64,
}

impl fmt::Display for ScmName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScmName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("LM-lin-2d-strong") {
            return Ok(ScmName::LmLin1_2d);
        }
        if t.eq_ignore_ascii_case("LM-lin-2d-weak") {
            return Ok(ScmName::LmLin2_2d);
        }
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::UnknownDataset {
                name: s.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// Samples `n` observations of `name`.
pub fn generate(name: ScmName, n: usize, seed: u64) -> Result<Dataset> {
    generate_scaled(name, n, seed, 1.0)
}

/// Like [`generate`] with every confounder multiplied by `confounder_scale`.
/// A scale of 0 yields an unconfounded model whose regression of `Y` on `X`
/// equals the causal effect.
pub fn generate_scaled(name: ScmName, n: usize, seed: u64, confounder_scale: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut r = rng::rng(seed);
    let d = name.treatment_dim();
    let mut first = Vec::with_capacity(n * d);
    let mut second = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row = name.draw(&mut r, confounder_scale, None);
        first.extend(row.first);
        second.extend(row.second);
        y.push(row.y);
    }
    let first = Tensor::new(n, d, first)?;
    let second = Tensor::new(n, d, second)?;
    let data = match name.setting() {
        Setting::Iv => Dataset::iv(first, second, y)?,
        Setting::Lm => Dataset::lm(first, second, y)?,
    };
    Ok(data.with_seed(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte-Carlo `E[Y | do(X = x*)]`: simulates the model with the structural
/// equation of `X` replaced by the constant `x*`.
pub fn simulate_effect(name: ScmName, x_star: &[f64], draws: usize, seed: u64) -> Result<McEstimate> {
    name.check_dim(x_star)?;
    if draws < 2 {
        return Err(Error::config("Monte-Carlo oracle needs at least two draws"));
    }
    let mut r = rng::rng(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let y = name.draw(&mut r, 1.0, Some(x_star)).y;
        sum += y;
        sum_sq += y * y;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_error: (var.max(0.0) / n).sqrt(),
    })
}

/// Fits `Y` on `X` by squared loss and evaluates the fit at each grid point,
/// ignoring confounding.
pub fn naive_regression_curve(
    dataset: &Dataset,
    grid: &[Vec<f64>],
    mlp_config: Option<MlpConfig>,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let x = dataset.treatments();
    let cfg = mlp_config.unwrap_or_else(|| MlpConfig::regressor(x.cols(), 1));
    let (mlp, _) = train_regression(x, dataset.outcome(), train, cfg, seed)?;
    grid.iter()
        .map(|p| {
            if p.len() != x.cols() {
                return Err(Error::dim(format!("grid point has {} coordinates, expected {}", p.len(), x.cols())));
            }
            Ok(mlp.predict_row(p)?[0])
        })
        .collect()
}
