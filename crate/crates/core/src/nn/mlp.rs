use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Layer sizes of a ReLU perceptron with an identity output layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_sizes: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_sizes: hidden_sizes.to_vec(),
            output_dim,
        }
    }

    /// The moment-regressor architecture: hidden layers (64, 32, 16).
    pub fn regressor(input_dim: usize, output_dim: usize) -> Self {
        Self::new(input_dim, &[64, 32, 16], output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("MLP input and output dims must be positive"));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::config("MLP needs at least one hidden layer"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::config("MLP hidden sizes must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_sizes);
        sizes.push(self.output_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Affine layer `y = x Wᵀ + b` with `W: out x in` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    fn apply_row(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.weight.rows() {
            let w = self.weight.row(o);
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(dot + self.bias.data()[o]);
        }
    }
}

/// Parameters of a model, exposed in a fixed order so that tape variables,
/// gradients and optimizer state line up.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records every parameter on `tape`, in [`Module::parameters`] order.
    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters().into_iter().map(|p| tape.param(p.clone())).collect()
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Weights uniform in `±sqrt(1 / fan_in)`, zero biases.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::new(fan_out, fan_in, data).expect("dims"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: Tensor::zeros(fan_out, fan_in),
                bias: Tensor::zeros(1, fan_out),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: MlpConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::dim(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != (*fan_out, *fan_in) || layer.bias.shape() != (1, *fan_out) {
                return Err(Error::dim(format!(
                    "layer {i}: weight {:?} / bias {:?} do not chain as {fan_in} -> {fan_out}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_layer_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("at least one layer")
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp forward",
                lhs: (0, cols),
                rhs: (0, self.config.input_dim),
            });
        }
        Ok(())
    }

    /// Forward pass without recording, all rows at once.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.cols())?;
        self.run_batch(x, self.layers.len())
    }

    /// Post-ReLU activations of the last hidden layer for every row of `x`.
    pub fn hidden_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.cols())?;
        self.run_batch(x, self.layers.len() - 1)
    }

    /// Batched counterpart of `run_row`.
    fn run_batch(&self, x: &Tensor, depth: usize) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().take(depth).enumerate() {
            h = h.matmul_t(&layer.weight)?;
            let bias = layer.bias.data();
            let relu = i < last;
            for row in h.data_mut().chunks_mut(bias.len()) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if relu {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        Ok(h)
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        Ok(self.run_row(x, &mut a, &mut b, self.layers.len()).to_vec())
    }

    /// Post-ReLU activations of the last hidden layer.
    pub fn hidden_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        Ok(self.run_row(x, &mut a, &mut b, self.layers.len() - 1).to_vec())
    }

    /// Runs the first `depth` layers; ReLU follows every layer except the
    /// output layer.
    fn run_row<'a>(&self, x: &[f64], a: &'a mut Vec<f64>, b: &'a mut Vec<f64>, depth: usize) -> &'a [f64] {
        a.clear();
        a.extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().take(depth).enumerate() {
            layer.apply_row(a, b);
            if i < last {
                b.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(a, b);
        }
        a
    }

    /// Forward pass recorded on `tape`, using parameter variables from
    /// [`Module::register`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.shape(x).1)?;
        debug_assert_eq!(params.len(), 2 * self.layers.len());
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, pair) in params.chunks(2).enumerate() {
            let lin = tape.matmul_t(h, pair[0])?;
            h = tape.add(lin, pair[1])?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
