use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp, MlpConfig, Module, Standardizer};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainConfig {
    /// Moment regressors and conditional models: 200 epochs, batch 512, lr 0.01.
    pub fn regressor() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            learning_rate: 0.01,
        }
    }

    /// Neural basis network: 100 epochs, batch 512, lr 0.01.
    pub fn basis() -> Self {
        Self {
            epochs: 100,
            ..Self::regressor()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config("epochs, batch_size and learning_rate must be positive"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::regressor()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss over the full training set after the last epoch.
    pub final_loss: f64,
}

/// Runs `epochs` passes of shuffled minibatch Adam over `n` rows.
///
/// `loss` receives the model, a fresh tape, the model's registered parameter
/// variables and the batch row indices, and returns a scalar loss node. The
/// final partial batch is kept. Each epoch's permutation comes from a seed
/// derived from `(seed, epoch)`.
pub fn minibatch_adam<M, F>(model: &mut M, n: usize, config: &TrainConfig, seed: u64, mut loss: F) -> Result<Vec<f64>>
where
    M: Module,
    F: FnMut(&M, &mut Tape, &[Var], &[usize]) -> Result<Var>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::rng(rng::derive(seed, &[0x5bu64, epoch as u64]));
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let l = loss(model, &mut tape, &params, batch)?;
            let value = tape.value(l).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            tape.backward(l)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad_or_zeros(p)).collect();
            adam.step(model.parameters_mut(), &grads);
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Mean squared error of `mlp` on `(inputs, targets)`, averaged over rows and
/// output columns.
pub fn mse(mlp: &Mlp, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
    let pred = mlp.predict(inputs)?;
    if pred.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: pred.shape(),
            rhs: targets.shape(),
        });
    }
    Ok(pred
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Rewrites `mlp` so that it maps raw inputs to raw targets when it was
/// trained on standardized ones.
fn fold_standardization(mlp: &mut Mlp, x: &Standardizer, y: &Standardizer) {
    let (x_mean, x_scale, y_mean, y_scale) = (&x.mean, &x.scale, &y.mean, &y.scale);
    let layers = mlp.layers_mut();
    let first = &mut layers[0];
    for o in 0..first.weight.rows() {
        let mut shift = 0.0;
        for (i, w) in first.weight.row_mut(o).iter_mut().enumerate() {
            *w /= x_scale[i];
            shift += *w * x_mean[i];
        }
        first.bias.data_mut()[o] -= shift;
    }
    let last = layers.last_mut().expect("at least one layer");
    for o in 0..last.weight.rows() {
        for w in last.weight.row_mut(o) {
            *w *= y_scale[o];
        }
        let b = &mut last.bias.data_mut()[o];
        *b = *b * y_scale[o] + y_mean[o];
    }
}

/// Fits an MLP to `targets` by minibatch Adam on the squared loss.
pub fn train_regression(
    inputs: &Tensor,
    targets: &Tensor,
    config: &TrainConfig,
    mlp_config: MlpConfig,
    seed: u64,
) -> Result<(Mlp, TrainReport)> {
    train_regression_with(inputs, targets, config, mlp_config, seed, true)
}

/// Like [`train_regression`]; with `output_bias = false` the readout bias is
/// held at zero so the fitted function is exactly a linear combination of
/// the last hidden activations.
pub fn train_regression_with(
    inputs: &Tensor,
    targets: &Tensor,
    config: &TrainConfig,
    mlp_config: MlpConfig,
    seed: u64,
    output_bias: bool,
) -> Result<(Mlp, TrainReport)> {
    if inputs.rows() != targets.rows() {
        return Err(Error::dim(format!(
            "inputs have {} rows but targets have {}",
            inputs.rows(),
            targets.rows()
        )));
    }
    if mlp_config.input_dim != inputs.cols() || mlp_config.output_dim != targets.cols() {
        return Err(Error::dim(format!(
            "network {} -> {} does not fit data {} -> {}",
            mlp_config.input_dim,
            mlp_config.output_dim,
            inputs.cols(),
            targets.cols()
        )));
    }
    check_finite(inputs, "regression inputs")?;
    check_finite(targets, "regression targets")?;

    // Train in standardized coordinates and fold the affine maps back into
    // the first and last layers afterwards.
    let x_std = Standardizer::fit(inputs);
    let mut y_std = Standardizer::fit(targets);
    if !output_bias {
        y_std.mean.iter_mut().for_each(|m| *m = 0.0);
    }
    let xs = x_std.apply(inputs);
    let ys = y_std.apply(targets);

    let mut mlp = Mlp::init(mlp_config, rng::derive(seed, &[0x1417]))?;
    let epoch_losses = minibatch_adam(&mut mlp, inputs.rows(), config, seed, |m, tape, params, idx| {
        let x = tape.constant(xs.select_rows(idx));
        let y = tape.constant(ys.select_rows(idx));
        let pred = if output_bias {
            m.forward(tape, params, x)?
        } else {
            let mut fixed = params.to_vec();
            let last = fixed.len() - 1;
            fixed[last] = tape.constant(Tensor::zeros(1, m.config().output_dim));
            m.forward(tape, &fixed, x)?
        };
        let diff = tape.sub(pred, y)?;
        let sq = tape.square(diff);
        Ok(tape.mean(sq))
    })?;
    fold_standardization(&mut mlp, &x_std, &y_std);
    let final_loss = mse(&mlp, inputs, targets)?;
    Ok((
        mlp,
        TrainReport {
            epoch_losses,
            final_loss,
        },
    ))
}
