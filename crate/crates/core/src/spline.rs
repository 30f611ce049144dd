//! Natural cubic interpolating splines, used to smooth plotted bound curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise cubic through `(knots[i], values[i])` with zero second
/// derivative at both ends. On `[knots[i], knots[i+1]]` with `t = x - knots[i]`
/// the value is `a[i] + b[i] t + c[i] t² + d[i] t³`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    pub knots: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl NaturalSpline {
    /// Needs at least two strictly increasing finite knots.
    pub fn fit(knots: &[f64], values: &[f64]) -> Result<Self> {
        let n = knots.len();
        if n != values.len() {
            return Err(Error::dim(format!("{n} knots but {} values", values.len())));
        }
        if n < 2 {
            return Err(Error::config("a spline needs at least two points"));
        }
        if !knots.iter().chain(values).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("spline knots or values".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("spline knots must be strictly increasing"));
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        // Second derivatives m[1..n-1] from the tridiagonal system; m[0] = m[n-1] = 0.
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h[i + 1] - (values[i + 1] - values[i]) / h[i]);
            }
            // Thomas algorithm; off-diagonals are h[1..k].
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        let seg = n - 1;
        let mut s = Self {
            knots: knots.to_vec(),
            a: values[..seg].to_vec(),
            b: Vec::with_capacity(seg),
            c: Vec::with_capacity(seg),
            d: Vec::with_capacity(seg),
        };
        for i in 0..seg {
            s.b.push((values[i + 1] - values[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0);
            s.c.push(m[i] / 2.0);
            s.d.push((m[i + 1] - m[i]) / (6.0 * h[i]));
        }
        Ok(s)
    }

    /// Evaluates the spline; outside the knots the end segments extend.
    pub fn eval(&self, x: f64) -> f64 {
        let last = self.a.len() - 1;
        let i = match self.knots.partition_point(|&k| k <= x) {
            0 => 0,
            p => (p - 1).min(last),
        };
        let t = x - self.knots[i];
        self.a[i] + t * (self.b[i] + t * (self.c[i] + t * self.d[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_points_give_a_line() {
        let s = NaturalSpline::fit(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((s.eval(1.0) - 2.0).abs() < 1e-12);
        assert!((s.eval(0.5) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cubic_is_interpolated_closely() {
        let knots: Vec<f64> = (0..20).map(|i| -2.0 + 4.0 * i as f64 / 19.0).collect();
        let values: Vec<f64> = knots.iter().map(|x| x.powi(3)).collect();
        let s = NaturalSpline::fit(&knots, &values).unwrap();
        let err = knots
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                (s.eval(mid) - mid.powi(3)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max midpoint error {err}");
    }

    #[test]
    fn second_derivative_vanishes_at_the_ends() {
        let s = NaturalSpline::fit(&[0.0, 1.0, 3.0, 4.0], &[0.0, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(s.c[0], 0.0);
        let last = s.a.len() - 1;
        let h = 1.0;
        assert!((2.0 * s.c[last] + 6.0 * s.d[last] * h).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(NaturalSpline::fit(&[1.0], &[1.0]).is_err());
        assert!(NaturalSpline::fit(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(NaturalSpline::fit(&[1.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(NaturalSpline::fit(&[0.0, 1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn passes_through_every_knot(values in prop::collection::vec(-10.0f64..10.0, 2..12), gaps in prop::collection::vec(0.1f64..2.0, 12)) {
            let mut knots = vec![0.0];
            for g in &gaps[..values.len() - 1] {
                knots.push(knots.last().unwrap() + g);
            }
            let s = NaturalSpline::fit(&knots, &values).unwrap();
            for (k, v) in knots.iter().zip(&values) {
                prop_assert!((s.eval(*k) - v).abs() < 1e-9);
            }
        }
    }
}
