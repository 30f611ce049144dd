use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `f` at `point` with central finite
/// differences and returns
/// `max_i |g_ad - g_fd| / (|g_fd| + 1e-8)`.
///
/// `f` builds a scalar from the input variable on the tape it is given; it is
/// re-run on a fresh tape for every perturbed evaluation.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad_or_zeros(x);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(p.clone());
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::column((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn inner_product_with_self() {
        let x = random_point(6, 1);
        let err = gradient_check(
            |t, x| {
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = random_point(4, 2);
        let err = gradient_check(|t, _x| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let x = Tensor::column(vec![0.5, -1.2, 2.0, -0.3, 1.7]);
        let err = gradient_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_smooth_primitive_matches_finite_differences() {
        type Case = (&'static str, fn(&mut Tape, Var) -> Result<Var>);
        let cases: Vec<Case> = vec![
            ("add", |t, x| {
                let c = t.constant(Tensor::column(vec![1.0, -2.0, 0.5, 0.1]));
                let y = t.add(x, c)?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("sub", |t, x| {
                let xt = t.transpose(x);
                let y = t.sub(x, xt)?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("mul", |t, x| {
                let y = t.mul(x, x)?;
                let y = t.mul(y, x)?;
                Ok(t.sum(y))
            }),
            ("div", |t, x| {
                let d = t.offset(x, 5.0);
                let y = t.div(x, d)?;
                Ok(t.sum(y))
            }),
            ("matmul", |t, x| {
                let xt = t.transpose(x);
                let y = t.matmul(xt, x)?;
                let y = t.matmul(x, y)?;
                Ok(t.mean(y))
            }),
            ("matmul_t", |t, x| {
                let y = t.matmul_t(x, x)?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("abs", |t, x| {
                let y = t.abs(x);
                let y = t.scale(y, 3.0);
                Ok(t.sum(y))
            }),
            ("exp_ln", |t, x| {
                let e = t.exp(x);
                let e = t.offset(e, 1.0);
                let l = t.ln(e);
                Ok(t.sum(l))
            }),
            ("sqrt", |t, x| {
                let s = t.square(x);
                let s = t.offset(s, 1.0);
                let r = t.sqrt(s);
                Ok(t.sum(r))
            }),
            ("softplus", |t, x| {
                let s = t.softplus(x);
                let s = t.square(s);
                Ok(t.sum(s))
            }),
            ("max_const", |t, x| {
                let m = t.max_const(x, 0.05);
                let m = t.square(m);
                Ok(t.sum(m))
            }),
            ("concat_columns", |t, x| {
                let x2 = t.square(x);
                let c = t.concat(&[x, x2], Axis::Cols)?;
                let s = t.sum_axis(c, Axis::Cols);
                let s = t.square(s);
                Ok(t.sum(s))
            }),
            ("concat_rows", |t, x| {
                let x2 = t.exp(x);
                let c = t.concat(&[x2, x], Axis::Rows)?;
                let s = t.sum_axis(c, Axis::Rows);
                let s = t.square(s);
                Ok(t.sum(s))
            }),
        ];
        // Coordinates stay away from 0 and 0.05 so abs/max kinks are not probed.
        let x = Tensor::column(vec![0.7, -1.3, 1.9, -0.4]);
        for (name, f) in cases {
            let err = gradient_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn column_slice_gradient() {
        let x = Tensor::new(2, 3, vec![0.3, -0.5, 1.2, 0.8, -1.1, 0.4]).unwrap();
        let err = gradient_check(
            |t, x| {
                let c = t.columns(x, 1, 3)?;
                let c = t.square(c);
                Ok(t.sum(c))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
