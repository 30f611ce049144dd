//! Response-function bases `ψ: X → R^K`, so that `f_θ(x) = θᵀψ(x)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{serialize, train_regression_with, Mlp, MlpConfig, ModelDoc, TrainConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Polynomial,
    Neural,
}

impl std::str::FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "polynomial" | "poly" => Ok(BasisKind::Polynomial),
            "neural" => Ok(BasisKind::Neural),
            _ => Err(Error::parse(format!("unknown basis `{s}` (expected polynomial or neural)"))),
        }
    }
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BasisKind::Polynomial => "polynomial",
            BasisKind::Neural => "neural",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Family {
    /// `1, x_i, x_i x_j (i ≤ j)`.
    Polynomial,
    /// Last-hidden-layer activations, optionally preceded by a constant 1.
    Neural { net: Mlp, constant: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseBasis {
    family: Family,
    dim: usize,
    theta_init: Option<Vec<f64>>,
}

/// Training attempts for a neural basis with dead units.
pub const NEURAL_ATTEMPTS: u64 = 10;

/// Columns of `h` that are positive on at least 1% of rows.
pub fn live_units(h: &Tensor) -> usize {
    let need = (h.rows() / 100).max(1);
    (0..h.cols())
        .filter(|&c| (0..h.rows()).filter(|&r| h.get(r, c) > 0.0).count() >= need)
        .count()
}

/// Number of polynomial basis functions up to degree 2 in `p` variables.
pub fn polynomial_size(p: usize) -> usize {
    p * (p + 3) / 2 + 1
}

impl ResponseBasis {
    pub fn polynomial(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("treatment dimension must be positive"));
        }
        Ok(Self {
            family: Family::Polynomial,
            dim: p,
            theta_init: None,
        })
    }

    /// Trains an MLP with hidden layers `(64, 64, k)` on `y ~ x` and uses the
    /// final hidden activations as basis functions. The trained readout is
    /// kept as an initial coefficient guess. Without `constant` the network
    /// is trained with its output bias fixed at zero, so the readout alone
    /// reproduces it.
    ///
    /// A narrow bottleneck often ends training with ReLU units that are zero
    /// on every input. Training restarts from derived seeds until every unit
    /// is live, see [`live_units`]; after [`NEURAL_ATTEMPTS`] tries the
    /// network with the most live units (then the lowest loss) is kept.
    pub fn neural(x: &Tensor, y: &Tensor, k: usize, constant: bool, train: &TrainConfig, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("neural basis size must be positive"));
        }
        let cfg = MlpConfig::new(x.cols(), &[64, 64, k], 1);
        let mut best: Option<(usize, f64, Mlp)> = None;
        for attempt in 0..NEURAL_ATTEMPTS {
            let s = if attempt == 0 { seed } else { rng::derive(seed, &[0xdead, attempt]) };
            let (net, report) = train_regression_with(x, y, train, cfg.clone(), s, constant)?;
            let live = live_units(&net.hidden_rows(x)?);
            let better = best
                .as_ref()
                .is_none_or(|(l, loss, _)| live > *l || (live == *l && report.final_loss < *loss));
            if better {
                best = Some((live, report.final_loss, net));
            }
            if live == k {
                break;
            }
        }
        let (_, _, net) = best.expect("at least one attempt");
        let out = net.layers().last().expect("output layer");
        let mut theta = Vec::with_capacity(k + 1);
        if constant {
            theta.push(out.bias.data()[0]);
        }
        theta.extend_from_slice(out.weight.data());
        Ok(Self {
            family: Family::Neural { net, constant },
            dim: x.cols(),
            theta_init: Some(theta),
        })
    }

    pub fn kind(&self) -> BasisKind {
        match self.family {
            Family::Polynomial => BasisKind::Polynomial,
            Family::Neural { .. } => BasisKind::Neural,
        }
    }

    /// Treatment (input) dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of basis functions `K`.
    pub fn size(&self) -> usize {
        match &self.family {
            Family::Polynomial => polynomial_size(self.dim),
            Family::Neural { net, constant } => {
                net.config().hidden_sizes.last().copied().unwrap_or(0) + usize::from(*constant)
            }
        }
    }

    /// Coefficients reproducing the fitted network, when available.
    pub fn theta_init(&self) -> Option<&[f64]> {
        self.theta_init.as_deref()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::dim(format!("basis expects {} inputs, got {}", self.dim, x.len())));
        }
        Ok(match &self.family {
            Family::Polynomial => {
                let mut out = Vec::with_capacity(self.size());
                out.push(1.0);
                out.extend_from_slice(x);
                for i in 0..x.len() {
                    for j in i..x.len() {
                        out.push(x[i] * x[j]);
                    }
                }
                out
            }
            Family::Neural { net, constant } => {
                let mut out = Vec::with_capacity(self.size());
                if *constant {
                    out.push(1.0);
                }
                out.extend(net.hidden_activations(x)?);
                out
            }
        })
    }

    /// `n x K` matrix of basis values, one row per input row.
    pub fn evaluate_rows(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.dim {
            return Err(Error::dim(format!("basis expects {} inputs, got {}", self.dim, x.cols())));
        }
        if let Family::Neural { net, constant } = &self.family {
            let h = net.hidden_rows(x)?;
            if !*constant {
                return Ok(h);
            }
            let ones = Tensor::ones(x.rows(), 1);
            return ones.hstack(&h);
        }
        let mut data = Vec::with_capacity(x.rows() * self.size());
        for r in 0..x.rows() {
            data.extend(self.evaluate(x.row(r))?);
        }
        Tensor::new(x.rows(), self.size(), data)
    }

    /// Minimum-norm least-squares coefficients of `y` on `ψ(x)`.
    pub fn least_squares(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        if y.cols() != 1 || y.rows() != x.rows() {
            return Err(Error::dim("least squares needs one target per input row"));
        }
        let psi = self.evaluate_rows(x)?;
        let a = DMatrix::from_row_slice(psi.rows(), psi.cols(), psi.data());
        let b = DVector::from_column_slice(y.data());
        let svd = a.svd(true, true);
        let theta = svd
            .solve(&b, 1e-10)
            .map_err(|e| Error::Degenerate(format!("least-squares readout: {e}")))?;
        Ok(theta.iter().copied().collect())
    }

    pub fn to_doc(&self) -> ModelDoc {
        let mut doc = ModelDoc::new("basis");
        doc.put("family", [self.kind()]);
        doc.put("dim", [self.dim]);
        if let Some(t) = &self.theta_init {
            doc.put("theta_init", t.iter());
        }
        if let Family::Neural { net, constant } = &self.family {
            doc.put("constant", [*constant]);
            serialize::put_mlp(&mut doc, "net", net);
        }
        doc
    }

    pub fn from_doc(doc: &ModelDoc) -> Result<Self> {
        doc.expect_kind("basis")?;
        let dim = doc.get_one("dim")?;
        let theta_init = doc.get_list("theta_init").ok();
        let family = match doc.get_one::<String>("family")?.parse()? {
            BasisKind::Polynomial => Family::Polynomial,
            BasisKind::Neural => Family::Neural {
                net: serialize::get_mlp(doc, "net")?,
                constant: doc.get_one("constant")?,
            },
        };
        Ok(Self {
            family,
            dim,
            theta_init,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_doc().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_doc(&ModelDoc::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mse;
    use crate::rng;
    use crate::scm::{generate, ScmName};
    use proptest::prelude::*;

    #[test]
    fn polynomial_sizes_and_values() {
        assert_eq!(ResponseBasis::polynomial(2).unwrap().size(), 6);
        assert_eq!(ResponseBasis::polynomial(3).unwrap().size(), 10);
        let b2 = ResponseBasis::polynomial(2).unwrap();
        assert_eq!(b2.evaluate(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(b2.evaluate(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b1 = ResponseBasis::polynomial(1).unwrap();
        assert_eq!(b1.evaluate(&[2.0]).unwrap(), vec![1.0, 2.0, 4.0]);
        assert!(b1.evaluate(&[1.0, 2.0]).is_err());
        assert!(ResponseBasis::polynomial(0).is_err());
    }

    #[test]
    fn polynomial_basis_spans_quadratics() {
        let b = ResponseBasis::polynomial(3).unwrap();
        let mut r = rng::rng(2);
        let x = rng::standard_normal(&mut r, 30, 3);
        let f = |v: &[f64]| 1.5 - v[0] + 0.5 * v[2] + 2.0 * v[0] * v[1] - v[2] * v[2] + 0.3 * v[1] * v[1];
        let y = Tensor::column((0..30).map(|i| f(x.row(i))).collect());
        let theta = b.least_squares(&x, &y).unwrap();
        for i in 0..30 {
            let fit: f64 = b.evaluate(x.row(i)).unwrap().iter().zip(&theta).map(|(p, t)| p * t).sum();
            assert!((fit - y.get(i, 0)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn response_is_linear_in_theta(
            x in prop::collection::vec(-3.0f64..3.0, 2),
            t1 in prop::collection::vec(-2.0f64..2.0, 6),
            t2 in prop::collection::vec(-2.0f64..2.0, 6),
            a in -2.0f64..2.0,
            c in -2.0f64..2.0,
        ) {
            let psi = ResponseBasis::polynomial(2).unwrap().evaluate(&x).unwrap();
            let f = |t: &[f64]| psi.iter().zip(t).map(|(p, t)| p * t).sum::<f64>();
            let mix: Vec<f64> = t1.iter().zip(&t2).map(|(u, v)| a * u + c * v).collect();
            prop_assert!((f(&mix) - (a * f(&t1) + c * f(&t2))).abs() < 1e-9);
        }
    }

    #[test]
    fn live_units_need_one_percent_of_rows() {
        let mut h = Tensor::zeros(200, 3);
        h.set(0, 0, 1.0);
        h.set(1, 0, 1.0);
        h.set(5, 1, 0.5);
        for r in 0..200 {
            h.set(r, 2, r as f64);
        }
        assert_eq!(live_units(&h), 2);
    }

    #[test]
    fn collapsed_bottleneck_is_retrained() {
        // The first attempt on this data and seed ends with every unit dead.
        let d = generate(ScmName::IvLin1dWeakAdd, 2000, 0).unwrap();
        let seed = rng::derive(0, &[12]);
        let cfg = MlpConfig::new(1, &[64, 64, 3], 1);
        let (first, _) = train_regression_with(d.basis_input(), d.outcome(), &TrainConfig::basis(), cfg, seed, true).unwrap();
        assert_eq!(live_units(&first.hidden_rows(d.basis_input()).unwrap()), 0);
        let b = ResponseBasis::neural(d.basis_input(), d.outcome(), 3, true, &TrainConfig::basis(), seed).unwrap();
        let psi = b.evaluate_rows(d.basis_input()).unwrap();
        let Family::Neural { net, .. } = &b.family else { unreachable!() };
        assert_eq!(live_units(&net.hidden_rows(d.basis_input()).unwrap()), 3);
        assert_eq!(psi.cols(), 4);
    }

    #[test]
    fn neural_basis_shape_range_and_readout() {
        let d = generate(ScmName::IvQuad2dWeak, 4000, 6).unwrap();
        let (x, y) = (d.treatments(), d.outcome());
        let train = TrainConfig::basis();
        for constant in [true, false] {
            let b = ResponseBasis::neural(x, y, 3, constant, &train, 1).unwrap();
            assert_eq!(b.size(), 3 + usize::from(constant));
            let psi = b.evaluate_rows(x).unwrap();
            assert!(psi.data().iter().enumerate().all(|(i, v)| *v >= 0.0 || (constant && i % 4 == 0)));
            assert_eq!(b.evaluate(&[0.3, -0.1]).unwrap(), b.evaluate(&[0.3, -0.1]).unwrap());
            for r in [0, 17, 3999] {
                let single = b.evaluate(x.row(r)).unwrap();
                let gap = single.iter().zip(psi.row(r)).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
                assert!(gap < 1e-12, "row {r} differs by {gap}");
            }

            let Family::Neural { net, .. } = &b.family else { unreachable!() };
            let full = mse(net, x, y).unwrap();
            let theta = b.theta_init().unwrap();
            let readout: f64 = (0..x.rows())
                .map(|r| {
                    let f: f64 = psi.row(r).iter().zip(theta).map(|(p, t)| p * t).sum();
                    (f - y.get(r, 0)).powi(2)
                })
                .sum::<f64>()
                / x.rows() as f64;
            assert!((readout - full).abs() <= 0.05 * full, "constant={constant}: readout {readout}, full {full}");
        }
    }

    #[test]
    fn serialization_round_trip() {
        let d = generate(ScmName::IvLin2dWeak, 300, 6).unwrap();
        let train = TrainConfig {
            epochs: 2,
            ..TrainConfig::basis()
        };
        let b = ResponseBasis::neural(d.treatments(), d.outcome(), 3, false, &train, 1).unwrap();
        let back = ResponseBasis::from_doc(&ModelDoc::parse(&b.to_doc().to_text()).unwrap()).unwrap();
        assert_eq!(back, b);
        let p = ResponseBasis::polynomial(2).unwrap();
        assert_eq!(ResponseBasis::from_doc(&p.to_doc()).unwrap(), p);
    }
}
