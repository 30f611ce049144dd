//! Bounds on interventional means `E[Y | do(X = x*)]` under unobserved
//! confounding.
//!
//! The outcome is modelled through response functions `f_θ(x) = θᵀψ(x)`
//! whose coefficients are drawn from a distribution conditioned on a
//! recoverable noise variable. Matching the first two conditional moments of
//! the observed outcome at a set of support points turns bounding into a
//! pair of constrained programs, each solved with an augmented Lagrangian.
//!
//! Module map:
//!
//! - [`diff`]: tape-based reverse-mode autodiff.
//! - [`nn`]: multilayer perceptrons, Adam and regression training.
//! - [`scm`]: synthetic structural causal models and their true effects.
//! - [`flow`]: conditional invertible models (affine Gaussian, spline flow).
//! - [`basis`]: polynomial and neural response-function bases.
//! - [`program`]: the η-model, moment constraints and objectives.
//! - [`auglag`]: the augmented-Lagrangian solver.
//! - [`pipeline`], [`report`], [`spline`], [`plot`]: end-to-end sweeps,
//!   output files and figures.

pub mod auglag;
pub mod basis;
pub mod diff;
pub mod error;
pub mod flow;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod program;
pub mod report;
pub mod rng;
pub mod scm;
pub mod spline;

pub use error::{Error, Result};
