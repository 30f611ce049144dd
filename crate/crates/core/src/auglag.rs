//! Augmented Lagrangian for `min ±o(η)` subject to `c(η) ≥ 0`.
//!
//! Each round runs a fixed number of Adam steps on
//! `ℒ = ±o + Σ ξ(c_l, λ_l, τ)`, then updates `λ_l ← max(0, λ_l − τ c_l)`
//! and grows `τ` geometrically up to a cap. The Adam moments persist across
//! rounds.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Module};
use crate::program::{CausalProgram, EtaModel};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Minimize the objective.
    Lower,
    /// Maximize the objective.
    Upper,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Lower, Direction::Upper];

    /// Factor applied to the objective so that the solver always minimizes.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Lower => 1.0,
            Direction::Upper => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Lower => "lower",
            Direction::Upper => "upper",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lower" | "min" | "minimize" => Ok(Direction::Lower),
            "upper" | "max" | "maximize" => Ok(Direction::Upper),
            _ => Err(Error::parse(format!("unknown direction `{s}` (expected lower or upper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugLagConfig {
    pub tau_init: f64,
    pub tau_max: f64,
    /// Multiplicative growth of `τ` per round.
    pub tau_growth: f64,
    pub outer_rounds: usize,
    pub inner_steps: usize,
    pub learning_rate: f64,
    /// A run is infeasible when its final violation exceeds this fraction
    /// of the slack.
    pub feasibility_ratio: f64,
}

impl Default for AugLagConfig {
    fn default() -> Self {
        Self {
            tau_init: 10.0,
            tau_max: 10_000.0,
            tau_growth: 1.08,
            outer_rounds: 150,
            inner_steps: 30,
            learning_rate: 1e-3,
            feasibility_ratio: 1e-2,
        }
    }
}

impl AugLagConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init > 0.0) || !(self.tau_init <= self.tau_max) {
            return Err(Error::config("need 0 < tau_init <= tau_max"));
        }
        if !(self.tau_growth > 1.0) {
            return Err(Error::config("tau_growth must exceed 1"));
        }
        if self.outer_rounds == 0 || self.inner_steps == 0 {
            return Err(Error::config("outer_rounds and inner_steps must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.feasibility_ratio > 0.0) {
            return Err(Error::config("learning_rate and feasibility_ratio must be positive"));
        }
        Ok(())
    }

    /// `τ` after `k` outer updates.
    pub fn tau_at(&self, k: usize) -> f64 {
        (self.tau_init * self.tau_growth.powi(k as i32)).min(self.tau_max)
    }
}

/// Multipliers and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct AugLagState {
    pub lambda: Vec<f64>,
    pub tau: f64,
}

impl AugLagState {
    pub fn new(constraints: usize, config: &AugLagConfig) -> Self {
        Self {
            lambda: vec![0.0; constraints],
            tau: config.tau_init,
        }
    }

    /// `λ_l ← max(0, λ_l − τ c_l)`, then `τ ← min(growth · τ, τ_max)`.
    pub fn outer_update(&mut self, c: &[f64], config: &AugLagConfig) {
        debug_assert_eq!(c.len(), self.lambda.len());
        for (l, &cv) in self.lambda.iter_mut().zip(c) {
            *l = (*l - self.tau * cv).max(0.0);
        }
        self.tau = (self.tau * config.tau_growth).min(config.tau_max);
    }
}

/// Penalty of one inequality constraint `c ≥ 0`.
pub fn xi(c: f64, lambda: f64, tau: f64) -> f64 {
    if tau * c <= lambda {
        -lambda * c + 0.5 * tau * c * c
    } else {
        -lambda * lambda / (2.0 * tau)
    }
}

/// `Σ ξ(c_l, λ_l, τ)` on the tape for a column of constraint values.
pub fn tape_penalty(tape: &mut Tape, c: Var, state: &AugLagState) -> Result<Var> {
    let values = tape.value(c).clone();
    if values.len() != state.lambda.len() {
        return Err(Error::dim(format!(
            "{} constraint values but {} multipliers",
            values.len(),
            state.lambda.len()
        )));
    }
    let tau = state.tau;
    let mut active = Vec::with_capacity(values.len());
    let mut flat = 0.0;
    for (&cv, &l) in values.data().iter().zip(&state.lambda) {
        let on = tau * cv <= l;
        active.push(if on { 1.0 } else { 0.0 });
        if !on {
            flat -= l * l / (2.0 * tau);
        }
    }
    let shape = values.shape();
    let lambda = tape.constant(Tensor::new(shape.0, shape.1, state.lambda.clone())?);
    let mask = tape.constant(Tensor::new(shape.0, shape.1, active)?);
    let lin = tape.mul(lambda, c)?;
    let lin = tape.scale(lin, -1.0);
    let sq = tape.square(c);
    let sq = tape.scale(sq, 0.5 * tau);
    let branch = tape.add(lin, sq)?;
    let kept = tape.mul(branch, mask)?;
    let total = tape.sum(kept);
    Ok(tape.offset(total, flat))
}

/// A program the solver can minimize: a stochastic objective and a column
/// of constraint values that must be nonnegative.
pub trait Problem {
    type Model: Module + Clone;

    /// Slack the feasibility tolerance is relative to.
    fn slack(&self) -> f64;

    fn tape_objective(&self, tape: &mut Tape, model: &Self::Model, params: &[Var], seed: u64) -> Result<Var>;

    fn tape_constraints(&self, tape: &mut Tape, model: &Self::Model, params: &[Var]) -> Result<Var>;

    fn objective(&self, model: &Self::Model, seed: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let v = self.tape_objective(&mut tape, model, &params, seed)?;
        Ok(tape.value(v).item())
    }

    fn constraints(&self, model: &Self::Model) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let c = self.tape_constraints(&mut tape, model, &params)?;
        Ok(tape.value(c).data().to_vec())
    }
}

impl Problem for CausalProgram<'_> {
    type Model = EtaModel;

    fn slack(&self) -> f64 {
        self.settings().epsilon
    }

    fn tape_objective(&self, tape: &mut Tape, model: &EtaModel, params: &[Var], seed: u64) -> Result<Var> {
        CausalProgram::tape_objective(self, tape, model, params, seed)
    }

    fn tape_constraints(&self, tape: &mut Tape, model: &EtaModel, params: &[Var]) -> Result<Var> {
        CausalProgram::tape_constraints(self, tape, model, params)
    }
}

/// `ℒ = ±o + Σ ξ(c_l, λ_l, τ)` on the tape.
pub fn lagrangian<P: Problem>(
    problem: &P,
    tape: &mut Tape,
    model: &P::Model,
    params: &[Var],
    state: &AugLagState,
    direction: Direction,
    seed: u64,
) -> Result<(Var, f64)> {
    let o = problem.tape_objective(tape, model, params, seed)?;
    let objective = tape.value(o).item();
    let signed = tape.scale(o, direction.sign());
    let c = problem.tape_constraints(tape, model, params)?;
    let penalty = tape_penalty(tape, c, state)?;
    Ok((tape.add(signed, penalty)?, objective))
}

/// Largest violation `max(0, −c_l)`.
pub fn max_violation(c: &[f64]) -> f64 {
    // Adding 0.0 turns a -0.0 from a zero constraint into 0.0.
    c.iter().fold(0.0, |m: f64, &v| m.max(-v)) + 0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Objective at the last inner step, unsigned.
    pub objective: f64,
    pub max_violation: f64,
    pub tau: f64,
    pub lambda_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Solution<M> {
    pub model: M,
    /// Objective at the final iterate, evaluated with a fresh seed.
    pub bound: f64,
    pub max_violation: f64,
    pub feasible: bool,
    pub state: AugLagState,
    pub trace: Vec<RoundTrace>,
}

/// Runs `outer_rounds` rounds of `inner_steps` Adam steps on the
/// Lagrangian, each followed by a multiplier and temperature update, and
/// returns the final iterate.
pub fn solve<P: Problem>(
    problem: &P,
    init: P::Model,
    direction: Direction,
    config: &AugLagConfig,
    seed: u64,
) -> Result<Solution<P::Model>> {
    config.validate()?;
    let mut model = init;
    let mut state = AugLagState::new(problem.constraints(&model)?.len(), config);
    let mut adam = Adam::new(config.learning_rate);
    let mut trace = Vec::with_capacity(config.outer_rounds);
    for round in 0..config.outer_rounds {
        let mut objective = f64::NAN;
        for step in 0..config.inner_steps {
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let step_seed = rng::derive(seed, &[round as u64, step as u64]);
            let (l, o) = lagrangian(problem, &mut tape, &model, &params, &state, direction, step_seed)?;
            if !tape.value(l).item().is_finite() {
                return Err(Error::NonFiniteLagrangian { round, step });
            }
            tape.backward(l)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad_or_zeros(p)).collect();
            if !grads.iter().all(Tensor::all_finite) {
                return Err(Error::NonFiniteLagrangian { round, step });
            }
            adam.step(model.parameters_mut(), &grads);
            objective = o;
        }
        let c = problem.constraints(&model)?;
        state.outer_update(&c, config);
        trace.push(RoundTrace {
            round,
            objective,
            max_violation: max_violation(&c),
            tau: state.tau,
            lambda_norm: state.lambda.iter().map(|l| l * l).sum::<f64>().sqrt(),
        });
    }
    let final_violation = max_violation(&problem.constraints(&model)?);
    let bound = problem.objective(&model, rng::derive(seed, &[u64::MAX]))?;
    if !bound.is_finite() {
        return Err(Error::NonFinite("final objective".into()));
    }
    Ok(Solution {
        model,
        bound,
        max_violation: final_violation,
        feasible: final_violation <= config.feasibility_ratio * problem.slack(),
        state,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradient_check;

    /// A single real variable.
    #[derive(Clone, Debug)]
    struct Point(Tensor);

    impl Module for Point {
        fn parameters(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }

        fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    impl Point {
        fn at(x: f64) -> Self {
            Point(Tensor::scalar(x))
        }

        fn value(&self) -> f64 {
            self.0.item()
        }
    }

    /// `o(x) = a (x − b)²` subject to `lo ≤ x ≤ hi`.
    struct Quadratic {
        a: f64,
        b: f64,
        lo: Option<f64>,
        hi: Option<f64>,
    }

    impl Problem for Quadratic {
        type Model = Point;

        fn slack(&self) -> f64 {
            1.0
        }

        fn tape_objective(&self, tape: &mut Tape, _: &Point, params: &[Var], _: u64) -> Result<Var> {
            let d = tape.offset(params[0], -self.b);
            let sq = tape.square(d);
            Ok(tape.scale(sq, self.a))
        }

        fn tape_constraints(&self, tape: &mut Tape, _: &Point, params: &[Var]) -> Result<Var> {
            let mut parts = Vec::new();
            if let Some(lo) = self.lo {
                parts.push(tape.offset(params[0], -lo));
            }
            if let Some(hi) = self.hi {
                let neg = tape.scale(params[0], -1.0);
                parts.push(tape.offset(neg, hi));
            }
            if parts.is_empty() {
                // Always satisfied.
                let zero = tape.scale(params[0], 0.0);
                parts.push(tape.offset(zero, 1e9));
            }
            tape.concat(&parts, crate::diff::Axis::Rows)
        }
    }

    #[test]
    fn xi_examples() {
        assert_eq!(xi(-1.0, 1.0, 1.0), 1.5);
        assert_eq!(xi(0.7, 0.0, 3.0), 0.0);
        assert_eq!(xi(1.0, 2.0, 2.0), -1.0);
        assert_eq!(xi(-1.0, 0.0, 2.0), 1.0);
    }

    #[test]
    fn xi_is_continuous_at_the_switch() {
        for (l, t) in [(0.5f64, 1.0f64), (2.0, 10.0), (7.0, 0.3), (0.0, 5.0)] {
            let c = l / t;
            let left = -l * c + 0.5 * t * c * c;
            assert!((left + l * l / (2.0 * t)).abs() < 1e-12);
            assert!((xi(c - 1e-9, l, t) - xi(c + 1e-9, l, t)).abs() < 1e-8);
        }
    }

    #[test]
    fn outer_update_examples() {
        let cfg = AugLagConfig::default();
        let mut s = AugLagState {
            lambda: vec![2.0, 0.0],
            tau: 4.0,
        };
        s.outer_update(&[1.0, 0.0], &cfg);
        assert_eq!(s.lambda[0], 0.0);
        let mut s = AugLagState {
            lambda: vec![0.0],
            tau: 10.0,
        };
        s.outer_update(&[-0.5], &cfg);
        assert_eq!(s.lambda[0], 5.0);
        let mut s = AugLagState {
            lambda: vec![0.0],
            tau: cfg.tau_max,
        };
        s.outer_update(&[0.0], &cfg);
        assert_eq!(s.tau, cfg.tau_max);
    }

    #[test]
    fn tau_follows_the_capped_geometric_schedule() {
        let cfg = AugLagConfig::default();
        let mut s = AugLagState::new(1, &cfg);
        for k in 0..200 {
            assert!((s.tau - cfg.tau_at(k)).abs() <= 1e-9 * s.tau);
            let before = s.tau;
            s.outer_update(&[-0.1], &cfg);
            assert!(s.tau >= before && s.tau <= cfg.tau_max);
            assert!(s.lambda[0] >= 0.0);
        }
    }

    #[test]
    fn lagrangian_examples_and_gradient() {
        let p = Quadratic {
            a: 1.0,
            b: 0.0,
            lo: Some(1.0),
            hi: None,
        };
        let eval = |x: f64, lambda: f64, tau: f64, dir: Direction| {
            let m = Point::at(x);
            let mut t = Tape::new();
            let params = m.register(&mut t);
            let state = AugLagState {
                lambda: vec![lambda],
                tau,
            };
            let (l, _) = lagrangian(&p, &mut t, &m, &params, &state, dir, 0).unwrap();
            t.value(l).item()
        };
        assert_eq!(eval(2.0, 0.0, 10.0, Direction::Lower), 4.0);
        assert_eq!(eval(2.0, 0.0, 10.0, Direction::Upper), -4.0);
        // c = -1, λ = 0, τ = 2: penalty 1.
        assert_eq!(eval(0.0, 0.0, 2.0, Direction::Lower), 1.0);

        let state = AugLagState {
            lambda: vec![0.3, 1.2],
            tau: 3.0,
        };
        let p = Quadratic {
            a: 0.7,
            b: 0.4,
            lo: Some(-0.5),
            hi: Some(0.2),
        };
        for x in [-0.9, 0.05, 0.6] {
            let err = gradient_check(
                |t, v| {
                    let m = Point::at(t.value(v).item());
                    let (l, _) = lagrangian(&p, t, &m, &[v], &state, Direction::Upper, 0)?;
                    Ok(l)
                },
                &Tensor::scalar(x),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-3, "{err}");
        }
    }

    #[test]
    fn convex_minimum_on_the_boundary() {
        let p = Quadratic {
            a: 1.0,
            b: 0.0,
            lo: Some(1.0),
            hi: None,
        };
        // Started inside the feasible set.
        let s = solve(&p, Point::at(2.0), Direction::Lower, &AugLagConfig::default(), 0).unwrap();
        let x = s.model.value();
        assert!((x - 1.0).abs() < 1e-3, "{x}");
        assert!(s.max_violation <= 1e-3);
        assert!((s.bound - x * x).abs() < 1e-12);
        assert_eq!(s.trace.len(), 150);
    }

    #[test]
    fn concave_maximum_on_the_boundary() {
        let p = Quadratic {
            a: -1.0,
            b: 3.0,
            lo: Some(-1.0),
            hi: Some(1.0),
        };
        let s = solve(&p, Point::at(0.0), Direction::Upper, &AugLagConfig::default(), 0).unwrap();
        let x = s.model.value();
        assert!((x - 1.0).abs() < 1e-3, "{x}");
        assert!(s.max_violation <= 1e-3);
        assert!(s.feasible);
    }

    #[test]
    fn inactive_constraints_reduce_to_plain_adam() {
        let p = Quadratic {
            a: 1.0,
            b: 2.0,
            lo: None,
            hi: None,
        };
        let cfg = AugLagConfig {
            outer_rounds: 20,
            ..AugLagConfig::default()
        };
        let s = solve(&p, Point::at(-1.0), Direction::Lower, &cfg, 0).unwrap();
        let mut m = Point::at(-1.0);
        let mut adam = Adam::new(cfg.learning_rate);
        for _ in 0..cfg.outer_rounds * cfg.inner_steps {
            let x = m.value();
            adam.step(m.parameters_mut(), &[Tensor::scalar(2.0 * (x - 2.0))]);
        }
        assert!((s.model.value() - m.value()).abs() < 1e-4);
        assert!(s.state.lambda.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = AugLagConfig {
            tau_growth: 1.0,
            ..AugLagConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugLagConfig {
            tau_init: 1e5,
            ..AugLagConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
