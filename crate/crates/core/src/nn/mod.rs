//! Multilayer perceptrons, Adam, and squared-loss regression.

mod adam;
mod mlp;
pub mod serialize;
mod standardize;
mod train;

pub use adam::Adam;
pub use mlp::{Layer, Mlp, MlpConfig, Module};
pub use serialize::ModelDoc;
pub use standardize::Standardizer;
pub use train::{minibatch_adam, mse, train_regression, train_regression_with, TrainConfig, TrainReport};
pub(crate) use train::check_finite;
