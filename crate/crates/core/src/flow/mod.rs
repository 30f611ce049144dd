//! Conditional invertible models `x = h_z(n)` with `n ~ N(0, I)`.
//!
//! Two families are provided: an affine-Gaussian model and an autoregressive
//! rational-quadratic spline flow. Both give exact inverses, so noises can
//! be recovered from observed `(z, x)` pairs.

mod affine;
mod rqs;
mod spline;

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use affine::AffineFlow;
pub use rqs::RqSpline;
pub use spline::SplineFlow;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{check_finite, ModelDoc, TrainConfig};

/// Diagonal jitter of the affine model's scale matrix.
pub const OMEGA_FLOW: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Affine,
    Spline,
}

impl FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "affine" => Ok(FlowKind::Affine),
            "spline" => Ok(FlowKind::Spline),
            _ => Err(Error::parse(format!("unknown flow kind `{s}` (expected affine or spline)"))),
        }
    }
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowKind::Affine => "affine",
            FlowKind::Spline => "spline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub kind: FlowKind,
    pub hidden_sizes: Vec<usize>,
    /// Spline bins on `[-range, range]` in standardized units.
    pub bins: usize,
    pub range: f64,
    pub omega: f64,
    pub train: TrainConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            kind: FlowKind::Spline,
            hidden_sizes: vec![64, 32, 16],
            bins: 8,
            range: 5.0,
            omega: OMEGA_FLOW,
            train: TrainConfig::regressor(),
        }
    }
}

impl FlowConfig {
    pub fn affine() -> Self {
        Self {
            kind: FlowKind::Affine,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    pub mean_log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionalFlow {
    Affine(AffineFlow),
    Spline(SplineFlow),
}

impl ConditionalFlow {
    /// Maximum-likelihood fit of `var | cond`.
    pub fn fit(config: &FlowConfig, cond: &Tensor, var: &Tensor, seed: u64) -> Result<(Self, FitReport)> {
        if var.rows() == 0 {
            return Err(Error::EmptyData);
        }
        if cond.rows() != var.rows() {
            return Err(Error::dim(format!(
                "condition has {} rows, variable has {}",
                cond.rows(),
                var.rows()
            )));
        }
        check_finite(cond, "flow condition")?;
        check_finite(var, "flow variable")?;
        if let Some(c) = var.column_stds().iter().position(|s| *s < 1e-12) {
            return Err(Error::Degenerate(format!(
                "variable column {} is constant; add a small jitter before fitting",
                c + 1
            )));
        }
        let (flow, losses) = match config.kind {
            FlowKind::Affine => {
                let (f, l) = AffineFlow::fit(cond, var, &config.hidden_sizes, config.omega, &config.train, seed)?;
                (ConditionalFlow::Affine(f), l)
            }
            FlowKind::Spline => {
                let (f, l) = SplineFlow::fit(
                    cond,
                    var,
                    &config.hidden_sizes,
                    config.bins,
                    config.range,
                    &config.train,
                    seed,
                )?;
                (ConditionalFlow::Spline(f), l)
            }
        };
        let mean_log_likelihood = flow.mean_log_likelihood(cond, var)?;
        Ok((
            flow,
            FitReport {
                epoch_losses: losses,
                mean_log_likelihood,
            },
        ))
    }

    pub fn kind(&self) -> FlowKind {
        match self {
            ConditionalFlow::Affine(_) => FlowKind::Affine,
            ConditionalFlow::Spline(_) => FlowKind::Spline,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConditionalFlow::Affine(f) => f.dim(),
            ConditionalFlow::Spline(f) => f.dim(),
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            ConditionalFlow::Affine(f) => f.cond_dim(),
            ConditionalFlow::Spline(f) => f.cond_dim(),
        }
    }

    fn check(&self, z: &[f64], v: &[f64]) -> Result<()> {
        if z.len() != self.cond_dim() || v.len() != self.dim() {
            return Err(Error::dim(format!(
                "flow expects condition of length {} and variable of length {}, got {} and {}",
                self.cond_dim(),
                self.dim(),
                z.len(),
                v.len()
            )));
        }
        if !z.iter().chain(v).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    /// `x = h_z(n)`.
    pub fn sample(&self, z: &[f64], n: &[f64]) -> Result<Vec<f64>> {
        self.check(z, n)?;
        match self {
            ConditionalFlow::Affine(f) => f.sample(z, n),
            ConditionalFlow::Spline(f) => f.sample(z, n),
        }
    }

    /// `n = h_z⁻¹(x)`.
    pub fn invert(&self, z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(z, x)?;
        match self {
            ConditionalFlow::Affine(f) => f.invert(z, x),
            ConditionalFlow::Spline(f) => f.invert(z, x),
        }
    }

    pub fn log_likelihood(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        self.check(z, x)?;
        match self {
            ConditionalFlow::Affine(f) => f.log_likelihood(z, x),
            ConditionalFlow::Spline(f) => f.log_likelihood(z, x),
        }
    }

    pub fn mean_log_likelihood(&self, cond: &Tensor, var: &Tensor) -> Result<f64> {
        let mut total = 0.0;
        for r in 0..var.rows() {
            total += self.log_likelihood(cond.row(r), var.row(r))?;
        }
        Ok(total / var.rows() as f64)
    }

    /// Row-wise [`ConditionalFlow::sample`].
    pub fn sample_rows(&self, cond: &Tensor, noise: &Tensor) -> Result<Tensor> {
        match self {
            ConditionalFlow::Spline(f) => {
                if cond.rows() != noise.rows() {
                    return Err(Error::dim("condition and variable row counts differ"));
                }
                if cond.cols() != self.cond_dim() || noise.cols() != self.dim() {
                    return Err(Error::dim("flow sample input widths"));
                }
                if !cond.all_finite() || !noise.all_finite() {
                    return Err(Error::NonFinite("flow input".into()));
                }
                f.sample_rows(cond, noise)
            }
            ConditionalFlow::Affine(_) => self.map_rows(cond, noise, |z, n| self.sample(z, n)),
        }
    }

    /// Row-wise [`ConditionalFlow::invert`].
    pub fn invert_rows(&self, cond: &Tensor, var: &Tensor) -> Result<Tensor> {
        self.map_rows(cond, var, |z, x| self.invert(z, x))
    }

    fn map_rows(&self, cond: &Tensor, other: &Tensor, f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>) -> Result<Tensor> {
        if cond.rows() != other.rows() {
            return Err(Error::dim("condition and variable row counts differ"));
        }
        let mut data = Vec::with_capacity(other.len());
        for r in 0..other.rows() {
            data.extend(f(cond.row(r), other.row(r))?);
        }
        Tensor::new(other.rows(), self.dim(), data)
    }

    pub fn to_doc(&self) -> ModelDoc {
        let mut doc = ModelDoc::new("conditional-flow");
        doc.put("variant", [self.kind()]);
        match self {
            ConditionalFlow::Affine(f) => f.put(&mut doc),
            ConditionalFlow::Spline(f) => f.put(&mut doc),
        }
        doc
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        doc.expect_kind("conditional-flow")?;
        match doc.get_one::<String>("variant")?.parse()? {
            FlowKind::Affine => Ok(ConditionalFlow::Affine(AffineFlow::get(doc)?)),
            FlowKind::Spline => Ok(ConditionalFlow::Spline(SplineFlow::get(doc)?)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_doc().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_doc(&ModelDoc::load(path)?)
    }
}

/// Scalar conditional model with uniform noise: `x = h_z(Φ⁻¹(v))`,
/// `v ~ U(0, 1)`, so `v = F_{X|Z}(x | z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CdfModel {
    flow: ConditionalFlow,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

impl CdfModel {
    pub fn new(flow: ConditionalFlow) -> Result<Self> {
        if flow.dim() != 1 {
            return Err(Error::dim(format!(
                "the cdf parameterization needs a scalar variable, got dimension {}",
                flow.dim()
            )));
        }
        Ok(Self { flow })
    }

    /// Conditional cdf `F(x | z)`.
    pub fn cdf(&self, z: &[f64], x: f64) -> Result<f64> {
        Ok(standard_normal().cdf(self.flow.invert(z, &[x])?[0]))
    }

    /// Conditional quantile `F⁻¹(v | z)` for `v` in `(0, 1)`.
    pub fn quantile(&self, z: &[f64], v: f64) -> Result<f64> {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::config("quantile level must lie in (0, 1)"));
        }
        Ok(self.flow.sample(z, &[standard_normal().inverse_cdf(v)])?[0])
    }

    pub fn flow(&self) -> &ConditionalFlow {
        &self.flow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Standardizer;
    use crate::rng;
    use crate::scm::{generate, ScmName};
    use rand::Rng;

    fn quick(kind: FlowKind, epochs: usize) -> FlowConfig {
        FlowConfig {
            kind,
            train: TrainConfig {
                epochs,
                ..TrainConfig::regressor()
            },
            ..FlowConfig::default()
        }
    }

    #[test]
    fn batched_sampling_matches_single_rows() {
        let d = generate(ScmName::IvLin2dWeak, 500, 4).unwrap();
        let (flow, _) =
            ConditionalFlow::fit(&quick(FlowKind::Spline, 2), d.flow_condition(), d.flow_variable(), 0).unwrap();
        let noise = rng::standard_normal(&mut rng::rng(5), 500, flow.dim());
        let batch = flow.sample_rows(d.flow_condition(), &noise).unwrap();
        for r in 0..500 {
            let single = flow.sample(d.flow_condition().row(r), noise.row(r)).unwrap();
            for (a, b) in single.iter().zip(batch.row(r)) {
                assert!((a - b).abs() < 1e-10, "row {r}: {a} vs {b}");
            }
        }
        let short = Tensor::zeros(499, flow.dim());
        assert!(flow.sample_rows(d.flow_condition(), &short).is_err());
    }

    #[test]
    fn affine_recovers_location_and_scale() {
        let mut r = rng::rng(1);
        let n = 10_000;
        let z = rng::standard_normal(&mut r, n, 1);
        let x = rng::standard_normal(&mut r, n, 1).map(|v| 2.0 * v + 1.0);
        let (flow, _) = ConditionalFlow::fit(&FlowConfig::affine(), &z, &x, 0).unwrap();
        let ConditionalFlow::Affine(f) = &flow else { unreachable!() };
        for zv in [-1.0, 0.0, 1.0] {
            let (a, b) = f.parameters_at(&[zv]).unwrap();
            assert!((b[0] - 1.0).abs() < 0.05, "b {}", b[0]);
            assert!((a[(0, 0)] - 2.0).abs() < 0.1, "A {}", a[(0, 0)]);
        }
    }

    #[test]
    fn affine_round_trip_on_random_points() {
        let d = generate(ScmName::IvLin2dWeak, 2000, 2).unwrap();
        let (flow, _) =
            ConditionalFlow::fit(&quick(FlowKind::Affine, 5), d.flow_condition(), d.flow_variable(), 0).unwrap();
        let mut r = rng::rng(9);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let z: Vec<f64> = (0..2).map(|_| r.random_range(-3.0..3.0)).collect();
            let n: Vec<f64> = (0..2).map(|_| r.random_range(-3.0..3.0)).collect();
            let back = flow.invert(&z, &flow.sample(&z, &n).unwrap()).unwrap();
            worst = worst.max(back.iter().zip(&n).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn identity_spline_flow_inverts_to_input() {
        let f = SplineFlow::initial(Standardizer::identity(2), Standardizer::identity(2), &[4], 8, 5.0, 0).unwrap();
        let flow = ConditionalFlow::Spline(f);
        for x in [[0.3, -2.0], [6.0, -7.5], [-4.99, 1.0]] {
            let n = flow.invert(&[1.0, 2.0], &x).unwrap();
            assert!((n[0] - x[0]).abs() < 1e-12 && (n[1] - x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_flow_fits_linear_gaussian_conditional() {
        // x = 2z + c + e_x: x | z ~ N(2z, 2 I) per coordinate.
        let train = generate(ScmName::IvLin2dWeak, 10_000, 7).unwrap();
        let held = generate(ScmName::IvLin2dWeak, 2_000, 8).unwrap();
        let (flow, report) =
            ConditionalFlow::fit(&FlowConfig::default(), train.flow_condition(), train.flow_variable(), 3).unwrap();
        let z = held.flow_condition();
        let x = held.flow_variable();
        let truth: f64 = (0..x.rows())
            .map(|r| {
                (0..2)
                    .map(|c| {
                        let res = x.get(r, c) - 2.0 * z.get(r, c);
                        -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - res * res / 4.0
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / x.rows() as f64;
        let fitted = flow.mean_log_likelihood(z, x).unwrap();
        assert!((fitted - truth).abs() < 0.1, "fitted {fitted}, true {truth}, train {}", report.mean_log_likelihood);

        // Round trip and monotonicity on the fitted model.
        let mut r = rng::rng(4);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let zv: Vec<f64> = (0..2).map(|_| r.random_range(-3.0..3.0)).collect();
            let nv: Vec<f64> = (0..2).map(|_| r.random_range(-4.0..4.0)).collect();
            let back = flow.invert(&zv, &flow.sample(&zv, &nv).unwrap()).unwrap();
            worst = worst.max(back.iter().zip(&nv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        assert!(worst < 1e-6, "{worst}");
        let zs = [0.5, -0.2];
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let n0 = -6.0 + 0.06 * i as f64;
            let x0 = flow.sample(&zs, &[n0, 0.3]).unwrap()[0];
            assert!(x0 > prev);
            prev = x0;
        }
        let ConditionalFlow::Spline(s) = &flow else { unreachable!() };
        assert!(s.knot_derivatives(1, &zs, &[1.0]).unwrap().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn fitting_is_deterministic_and_serializable() {
        let d = generate(ScmName::IvQuad1dWeak, 600, 1).unwrap();
        let cfg = quick(FlowKind::Spline, 3);
        let (a, _) = ConditionalFlow::fit(&cfg, d.flow_condition(), d.flow_variable(), 5).unwrap();
        let (b, _) = ConditionalFlow::fit(&cfg, d.flow_condition(), d.flow_variable(), 5).unwrap();
        assert_eq!(a, b);
        let back = ConditionalFlow::from_doc(&ModelDoc::parse(&a.to_doc().to_text()).unwrap()).unwrap();
        assert_eq!(back, a);
        let (c, _) = ConditionalFlow::fit(&quick(FlowKind::Affine, 2), d.flow_condition(), d.flow_variable(), 5).unwrap();
        let back = ConditionalFlow::from_doc(&ModelDoc::parse(&c.to_doc().to_text()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn constant_variable_is_degenerate() {
        let z = Tensor::column(vec![0.0, 1.0, 2.0]);
        let x = Tensor::column(vec![1.0, 1.0, 1.0]);
        let err = ConditionalFlow::fit(&quick(FlowKind::Spline, 1), &z, &x, 0).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)) && err.to_string().contains("jitter"));
    }

    #[test]
    fn cdf_view_is_uniform_and_preserves_quantiles() {
        let d = generate(ScmName::IvQuad1dWeak, 3000, 3).unwrap();
        let (flow, _) =
            ConditionalFlow::fit(&quick(FlowKind::Spline, 20), d.flow_condition(), d.flow_variable(), 1).unwrap();
        let cdf = CdfModel::new(flow.clone()).unwrap();
        let z = [0.4];

        // Φ(N) is uniform: Kolmogorov–Smirnov distance on 1e5 draws.
        let mut r = rng::rng(12);
        let mut v: Vec<f64> = rng::standard_normal(&mut r, 100_000, 1)
            .data()
            .iter()
            .map(|n| cdf.cdf(&z, flow.sample(&z, &[*n]).unwrap()[0]).unwrap())
            .collect();
        v.sort_by(f64::total_cmp);
        let m = v.len() as f64;
        let ks = v
            .iter()
            .enumerate()
            .map(|(i, x)| ((i + 1) as f64 / m - x).abs().max((x - i as f64 / m).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "{ks}");

        // Median of samples equals the image of n = 0.
        let mut xs: Vec<f64> = (0..20_001)
            .map(|_| flow.sample(&z, &[r.sample::<f64, _>(rand_distr::StandardNormal)]).unwrap()[0])
            .collect();
        xs.sort_by(f64::total_cmp);
        let median = xs[xs.len() / 2];
        let center = flow.sample(&z, &[0.0]).unwrap()[0];
        assert!((cdf.quantile(&z, 0.5).unwrap() - center).abs() < 1e-9);
        let spread = xs[(xs.len() as f64 * 0.75) as usize] - xs[(xs.len() as f64 * 0.25) as usize];
        assert!((median - center).abs() < 0.05 * spread, "{median} vs {center}");

        for x in [-1.0, 0.0, 2.5] {
            let v = cdf.cdf(&z, x).unwrap();
            assert!((cdf.quantile(&z, v).unwrap() - x).abs() < 1e-6);
        }
        assert!(CdfModel::new(ConditionalFlow::Spline(
            SplineFlow::initial(Standardizer::identity(1), Standardizer::identity(2), &[2], 4, 5.0, 0).unwrap()
        ))
        .is_err());
    }
}
