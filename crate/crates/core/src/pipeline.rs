//! End-to-end bounds: one-time setup, a sweep over intervention values,
//! directions and seeds, and min/max aggregation.
//!
//! The programs run on the standardized outcome `(y - mean) / sd`; bounds
//! are mapped back to the original scale. The slack `epsilon` is therefore
//! in outcome standard deviations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auglag::{self, AugLagConfig, Direction, RoundTrace};
use crate::basis::{BasisKind, ResponseBasis};
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlow, FlowConfig, FlowKind};
use crate::nn::{self, train_regression, MlpConfig, TrainConfig};
use crate::plot::{self, Density};
use crate::program::{CausalProgram, EtaModel, MomentRegressors, MomentTargets, Norm, ProgramSettings};
use crate::rng;
use crate::scm::{self, Dataset, ScmName, Setting};

/// Where the observations come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Named(ScmName),
    Csv(PathBuf),
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower.ends_with(".csv") || Path::new(s).is_file() {
            Ok(DataSource::Csv(PathBuf::from(s)))
        } else {
            Ok(DataSource::Named(s.parse()?))
        }
    }

    pub fn scm(&self) -> Option<ScmName> {
        match self {
            DataSource::Named(n) => Some(*n),
            DataSource::Csv(_) => None,
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Named(n) => write!(f, "{n}"),
            DataSource::Csv(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Constraint slack, in outcome standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slack {
    Fixed(f64),
    /// `factor` times the held-out regression error (see [`auto_slack`]).
    Auto(f64),
}

impl FromStr for Slack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "auto" {
            return Ok(Slack::Auto(2.0));
        }
        if let Some(f) = t.strip_prefix("auto:") {
            let factor: f64 = f.parse().map_err(|_| Error::parse(format!("bad slack factor `{f}`")))?;
            return Ok(Slack::Auto(factor));
        }
        t.parse()
            .map(Slack::Fixed)
            .map_err(|_| Error::parse(format!("epsilon must be a number, `auto` or `auto:<factor>`, got `{s}`")))
    }
}

impl std::fmt::Display for Slack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Slack::Fixed(v) => write!(f, "{v}"),
            Slack::Auto(k) if *k == 2.0 => f.write_str("auto"),
            Slack::Auto(k) => write!(f, "auto:{k}"),
        }
    }
}

/// Intervention grid: one coordinate varies, the others sit at their
/// empirical means.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    /// 1-based index of the varied treatment coordinate.
    pub coordinate: usize,
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.start + step * i as f64).collect()
    }

    /// Full intervention vectors for treatment means `means`.
    pub fn points(&self, means: &[f64]) -> Vec<Vec<f64>> {
        self.values()
            .into_iter()
            .map(|v| {
                let mut x = means.to_vec();
                x[self.coordinate - 1] = v;
                x
            })
            .collect()
    }
}

/// Everything a sweep needs. Read from flat `key = value` text; see
/// [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub n: usize,
    pub data_seed: u64,
    pub setup_seed: u64,
    pub basis: BasisKind,
    /// Neural basis width; `None` picks 3 for p ≤ 2 and 10 otherwise.
    pub basis_size: Option<usize>,
    pub flow: FlowKind,
    pub norm: Norm,
    pub epsilon: Slack,
    pub support: usize,
    pub mc_batch: usize,
    pub grid: GridSpec,
    pub seeds: Vec<u64>,
    pub auglag: AugLagConfig,
    pub regressor_epochs: usize,
    pub flow_epochs: usize,
    pub basis_epochs: usize,
    pub workers: usize,
    /// Record wall-clock times; off makes every output byte-reproducible.
    pub timing: bool,
    pub output: PathBuf,
}

impl RunConfig {
    /// Recognised keys, in the order they are echoed.
    pub const KEYS: [&'static str; 30] = [
        "dataset",
        "variant",
        "n",
        "data_seed",
        "setup_seed",
        "basis",
        "basis_size",
        "flow",
        "norm",
        "epsilon",
        "support",
        "mc_batch",
        "grid_coordinate",
        "grid_start",
        "grid_end",
        "grid_points",
        "seeds",
        "tau_init",
        "tau_max",
        "tau_growth",
        "outer_rounds",
        "inner_steps",
        "learning_rate",
        "feasibility_ratio",
        "regressor_epochs",
        "flow_epochs",
        "basis_epochs",
        "workers",
        "timing",
        "output",
    ];

    /// Defaults for `data`: n = 10,000, M = 100, 500 noise draws, seeds
    /// 0..=4, a 7-point grid of the first coordinate over [-2, 2].
    pub fn new(data: DataSource) -> Self {
        Self {
            data,
            n: scm::DEFAULT_N,
            data_seed: 0,
            setup_seed: 0,
            basis: BasisKind::Neural,
            basis_size: None,
            flow: FlowKind::Spline,
            norm: Norm::Sup,
            epsilon: Slack::Auto(2.0),
            support: 100,
            mc_batch: crate::program::DEFAULT_MC_BATCH,
            grid: GridSpec {
                coordinate: 1,
                start: -2.0,
                end: 2.0,
                points: 7,
            },
            seeds: (0..5).collect(),
            auglag: AugLagConfig::default(),
            regressor_epochs: TrainConfig::regressor().epochs,
            flow_epochs: TrainConfig::regressor().epochs,
            basis_epochs: TrainConfig::basis().epochs,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            timing: true,
            output: PathBuf::from("out"),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. `dataset` is
    /// required.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&Self::parse_pairs(text)?)
    }

    /// The raw pairs of a config text, in order.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Builds a config from ordered pairs; later pairs override earlier ones.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let data = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "dataset")
            .ok_or_else(|| Error::config("`dataset` is required"))?;
        let mut cfg = Self::new(DataSource::parse(&data.1)?);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::parse(format!("`{key}` has invalid value `{v}`")))
        }
        match key {
            "dataset" => self.data = DataSource::parse(value)?,
            "variant" => {
                let s: Setting = value.parse()?;
                if let Some(name) = self.data.scm() {
                    if name.setting() != s {
                        return Err(Error::config(format!("{name} is a {} dataset, not {s}", name.setting())));
                    }
                }
            }
            "n" => self.n = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "setup_seed" => self.setup_seed = num(key, value)?,
            "basis" => self.basis = value.parse()?,
            "basis_size" => {
                self.basis_size = if value.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "flow" => self.flow = value.parse()?,
            "norm" => self.norm = value.parse()?,
            "epsilon" => self.epsilon = value.parse()?,
            "support" => self.support = num(key, value)?,
            "mc_batch" => self.mc_batch = num(key, value)?,
            "grid_coordinate" => self.grid.coordinate = num(key, value)?,
            "grid_start" => self.grid.start = num(key, value)?,
            "grid_end" => self.grid.end = num(key, value)?,
            "grid_points" => self.grid.points = num(key, value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "tau_init" => self.auglag.tau_init = num(key, value)?,
            "tau_max" => self.auglag.tau_max = num(key, value)?,
            "tau_growth" => self.auglag.tau_growth = num(key, value)?,
            "outer_rounds" => self.auglag.outer_rounds = num(key, value)?,
            "inner_steps" => self.auglag.inner_steps = num(key, value)?,
            "learning_rate" => self.auglag.learning_rate = num(key, value)?,
            "feasibility_ratio" => self.auglag.feasibility_ratio = num(key, value)?,
            "regressor_epochs" => self.regressor_epochs = num(key, value)?,
            "flow_epochs" => self.flow_epochs = num(key, value)?,
            "basis_epochs" => self.basis_epochs = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "timing" => self.timing = num(key, value)?,
            "output" => self.output = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be positive"));
        }
        if self.support == 0 {
            return Err(Error::config("support must be positive"));
        }
        if self.grid.points == 0 {
            return Err(Error::config("grid_points must be positive"));
        }
        if !(self.grid.start.is_finite() && self.grid.end.is_finite()) || self.grid.start > self.grid.end {
            return Err(Error::config("grid_start must not exceed grid_end"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be nonempty"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        if let Some(name) = self.data.scm() {
            if self.grid.coordinate == 0 || self.grid.coordinate > name.treatment_dim() {
                return Err(Error::config(format!(
                    "grid_coordinate must be in 1..={} for {name}",
                    name.treatment_dim()
                )));
            }
        }
        if let DataSource::Csv(p) = &self.data {
            if !p.is_file() {
                return Err(Error::config(format!("dataset file {} does not exist", p.display())));
            }
        }
        match self.epsilon {
            Slack::Fixed(v) | Slack::Auto(v) if !(v > 0.0) || !v.is_finite() => {
                return Err(Error::config("epsilon must be positive"))
            }
            _ => {}
        }
        if self.basis_size == Some(0) {
            return Err(Error::config("basis_size must be positive"));
        }
        if self.mc_batch == 0 || [self.regressor_epochs, self.flow_epochs, self.basis_epochs].contains(&0) {
            return Err(Error::config("mc_batch and epoch counts must be positive"));
        }
        self.auglag.validate()
    }

    /// Every setting as ordered `(key, value)` pairs; parsing them back
    /// reproduces the config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(&str, String)> = vec![
            ("dataset", self.data.to_string()),
            ("n", self.n.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("setup_seed", self.setup_seed.to_string()),
            ("basis", self.basis.to_string()),
            ("basis_size", self.basis_size.map_or("auto".to_string(), |k| k.to_string())),
            ("flow", self.flow.to_string()),
            ("norm", self.norm.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("support", self.support.to_string()),
            ("mc_batch", self.mc_batch.to_string()),
            ("grid_coordinate", self.grid.coordinate.to_string()),
            ("grid_start", self.grid.start.to_string()),
            ("grid_end", self.grid.end.to_string()),
            ("grid_points", self.grid.points.to_string()),
            (
                "seeds",
                self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("tau_init", self.auglag.tau_init.to_string()),
            ("tau_max", self.auglag.tau_max.to_string()),
            ("tau_growth", self.auglag.tau_growth.to_string()),
            ("outer_rounds", self.auglag.outer_rounds.to_string()),
            ("inner_steps", self.auglag.inner_steps.to_string()),
            ("learning_rate", self.auglag.learning_rate.to_string()),
            ("feasibility_ratio", self.auglag.feasibility_ratio.to_string()),
            ("regressor_epochs", self.regressor_epochs.to_string()),
            ("flow_epochs", self.flow_epochs.to_string()),
            ("basis_epochs", self.basis_epochs.to_string()),
            ("timing", self.timing.to_string()),
        ];
        if let Some(name) = self.data.scm() {
            out.insert(1, ("variant", name.setting().to_string()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `0,2,5`, `0-4` (inclusive) or a mix of both.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::parse(format!("bad seed list entry `{part}`"));
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(Error::config("seed list is empty"));
    }
    Ok(out)
}

/// Default slack: `factor` times the held-out RMSE of the first-moment
/// regressor, refitted on 80% of the data and scored on the remaining 20%.
/// Under the two-norm the value is multiplied by `sqrt(2M)` so that both
/// norms allow the same typical per-constraint residual.
pub fn auto_slack(
    scaled: &Dataset,
    train: &TrainConfig,
    factor: f64,
    norm: Norm,
    support: usize,
    seed: u64,
) -> Result<f64> {
    let n = scaled.n();
    if n < 5 {
        return Err(Error::config("automatic slack needs at least 5 observations"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::rng(rng::derive(seed, &[0x51])));
    }
    let (held, fit) = order.split_at(n / 5);
    let fit = subset(scaled, fit)?;
    let held = subset(scaled, held)?;
    let cfg = MlpConfig::regressor(fit.regressor_input().cols(), 1);
    let (first, _) = train_regression(&fit.regressor_input(), fit.outcome(), train, cfg, rng::derive(seed, &[1]))?;
    let rmse = nn::mse(&first, &held.regressor_input(), held.outcome())?.sqrt();
    let scale = match norm {
        Norm::Sup => 1.0,
        Norm::Two => ((2 * support) as f64).sqrt(),
    };
    Ok(factor * rmse * scale)
}

fn subset(d: &Dataset, rows: &[usize]) -> Result<Dataset> {
    let y = d.outcome().select_rows(rows).into_data();
    let x = d.treatments().select_rows(rows);
    match d.setting() {
        Setting::Iv => Dataset::iv(
            d.instruments().expect("iv data has instruments").select_rows(rows),
            x,
            y,
        ),
        Setting::Lm => Dataset::lm(x, d.mediators().expect("lm data has mediators").select_rows(rows), y),
    }
}

/// Shared one-time computations: data, conditional model, regressors,
/// basis, support targets and slack.
#[derive(Clone, Debug)]
pub struct Setup {
    pub dataset: Dataset,
    /// The dataset with standardized outcome.
    pub scaled: Dataset,
    pub outcome_mean: f64,
    pub outcome_scale: f64,
    pub flow: ConditionalFlow,
    pub regressors: MomentRegressors,
    pub basis: ResponseBasis,
    pub theta_init: Vec<f64>,
    pub targets: MomentTargets,
    pub epsilon: f64,
    pub grid: Vec<Vec<f64>>,
}

impl Setup {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = match &config.data {
            DataSource::Named(name) => scm::generate(*name, config.n, config.data_seed)?,
            DataSource::Csv(path) => Dataset::read_csv(path)?,
        };
        Self::from_dataset(config, dataset)
    }

    pub fn from_dataset(config: &RunConfig, dataset: Dataset) -> Result<Self> {
        let p = dataset.treatment_dim();
        if config.grid.coordinate == 0 || config.grid.coordinate > p {
            return Err(Error::config(format!("grid_coordinate must be in 1..={p}")));
        }
        let y = dataset.outcome();
        let outcome_mean = y.mean();
        let sd = y.column_stds()[0];
        let outcome_scale = if sd > 1e-12 { sd } else { 1.0 };
        let scaled = dataset.with_outcome(y.data().iter().map(|v| (v - outcome_mean) / outcome_scale).collect())?;
        let seed = config.setup_seed;

        let flow_cfg = FlowConfig {
            kind: config.flow,
            train: TrainConfig {
                epochs: config.flow_epochs,
                ..TrainConfig::regressor()
            },
            ..FlowConfig::default()
        };
        let (flow, _) = ConditionalFlow::fit(
            &flow_cfg,
            scaled.flow_condition(),
            scaled.flow_variable(),
            rng::derive(seed, &[10]),
        )?;
        let reg_train = TrainConfig {
            epochs: config.regressor_epochs,
            ..TrainConfig::regressor()
        };
        let regressors = MomentRegressors::fit(&scaled, &reg_train, rng::derive(seed, &[11]))?;
        let basis_x = scaled.basis_input();
        let basis = match config.basis {
            BasisKind::Polynomial => ResponseBasis::polynomial(basis_x.cols())?,
            BasisKind::Neural => {
                let k = config.basis_size.unwrap_or(if basis_x.cols() <= 2 { 3 } else { 10 });
                let train = TrainConfig {
                    epochs: config.basis_epochs,
                    ..TrainConfig::basis()
                };
                ResponseBasis::neural(basis_x, scaled.outcome(), k, true, &train, rng::derive(seed, &[12]))?
            }
        };
        let theta_init = match basis.theta_init() {
            Some(t) => t.to_vec(),
            None => basis.least_squares(basis_x, scaled.outcome())?,
        };
        let targets = MomentTargets::build(
            &scaled,
            &flow,
            &regressors,
            &basis,
            config.support.min(scaled.n()),
            rng::derive(seed, &[13]),
        )?;
        let epsilon = match config.epsilon {
            Slack::Fixed(v) => v,
            Slack::Auto(factor) => auto_slack(&scaled, &reg_train, factor, config.norm, targets.len(), rng::derive(seed, &[14]))?,
        };
        let grid = config.grid.points(&dataset.treatments().column_means());
        Ok(Self {
            dataset,
            scaled,
            outcome_mean,
            outcome_scale,
            flow,
            regressors,
            basis,
            theta_init,
            targets,
            epsilon,
            grid,
        })
    }

    pub fn settings(&self, config: &RunConfig) -> ProgramSettings {
        ProgramSettings {
            norm: config.norm,
            epsilon: self.epsilon,
            mc_batch: config.mc_batch,
        }
    }

    pub fn program(&self, config: &RunConfig, x_star: &[f64]) -> Result<CausalProgram<'_>> {
        match self.scaled.setting() {
            Setting::Iv => CausalProgram::iv(&self.targets, &self.basis, x_star, self.settings(config)),
            Setting::Lm => CausalProgram::lm(
                &self.targets,
                &self.basis,
                &self.flow,
                self.scaled.treatments(),
                x_star,
                self.settings(config),
            ),
        }
    }

    /// Back to the original outcome scale.
    pub fn unscale(&self, v: f64) -> f64 {
        self.outcome_mean + self.outcome_scale * v
    }

    /// Solves one program and reports the bound on the original scale.
    pub fn solve(
        &self,
        config: &RunConfig,
        point: usize,
        direction: Direction,
        seed: u64,
    ) -> (BoundResult, Vec<RoundTrace>) {
        let start = Instant::now();
        let x_star = self.grid[point].clone();
        let run = || -> Result<auglag::Solution<EtaModel>> {
            let program = self.program(config, &x_star)?;
            let eta = EtaModel::new(program.noise_dim(), &self.theta_init, rng::derive(seed, &[0xe7a]))?;
            let solve_seed = rng::derive(seed, &[0x501e, point as u64, direction as u64]);
            auglag::solve(&program, eta, direction, &config.auglag, solve_seed)
        };
        let outcome = run();
        let wall_time_s = if config.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        match outcome {
            Ok(s) => (
                BoundResult {
                    x_star,
                    direction,
                    seed,
                    bound: self.unscale(s.bound),
                    converged: s.feasible,
                    max_violation: s.max_violation,
                    wall_time_s,
                },
                s.trace,
            ),
            Err(e) => {
                eprintln!("warning: solve at x* = {x_star:?} ({direction}, seed {seed}) failed: {e}");
                (
                    BoundResult {
                        x_star,
                        direction,
                        seed,
                        bound: f64::NAN,
                        converged: false,
                        max_violation: f64::NAN,
                        wall_time_s,
                    },
                    Vec::new(),
                )
            }
        }
    }
}

/// One solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub x_star: Vec<f64>,
    pub direction: Direction,
    pub seed: u64,
    pub bound: f64,
    /// Finished with violation within the feasibility tolerance.
    pub converged: bool,
    /// Largest constraint violation at the returned iterate.
    pub max_violation: f64,
    pub wall_time_s: f64,
}

/// Aggregated bounds along the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub dataset: String,
    /// 1-based varied coordinate.
    pub coordinate: usize,
    pub x_star: Vec<Vec<f64>>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    pub true_effect: Option<Vec<f64>>,
    pub naive: Option<Vec<f64>>,
    /// Density of the observed varied treatment coordinate.
    pub density: Density,
}

impl BoundCurve {
    /// Values of the varied coordinate.
    pub fn varied(&self) -> Vec<f64> {
        self.x_star.iter().map(|x| x[self.coordinate - 1]).collect()
    }

    /// Whether every available interval contains the true effect, with an
    /// absolute tolerance `tol(truth)`; `None` without a known truth.
    pub fn contains_truth(&self, tol: impl Fn(f64) -> f64) -> Option<bool> {
        let truth = self.true_effect.as_ref()?;
        Some(truth.iter().enumerate().all(|(i, &t)| {
            let lo_ok = self.lower[i].is_none_or(|l| l <= t + tol(t));
            let hi_ok = self.upper[i].is_none_or(|u| u >= t - tol(t));
            lo_ok && hi_ok
        }))
    }
}

/// Per grid point: the minimum converged lower bound and the maximum
/// converged upper bound; `None` when no run converged.
pub fn aggregate(grid: &[Vec<f64>], results: &[BoundResult]) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let pick = |dir: Direction, x: &[f64]| {
        let vals = results
            .iter()
            .filter(|r| r.direction == dir && r.converged && r.bound.is_finite() && r.x_star == x)
            .map(|r| r.bound);
        match dir {
            Direction::Lower => vals.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
            Direction::Upper => vals.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
        }
    };
    (
        grid.iter().map(|x| pick(Direction::Lower, x)).collect(),
        grid.iter().map(|x| pick(Direction::Upper, x)).collect(),
    )
}

/// Complete output of a sweep.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub epsilon: f64,
    pub results: Vec<BoundResult>,
    /// Solver traces keyed by result index.
    pub traces: BTreeMap<usize, Vec<RoundTrace>>,
    pub curve: BoundCurve,
}

impl RunOutput {
    /// No run converged anywhere.
    pub fn totally_infeasible(&self) -> bool {
        !self.results.iter().any(|r| r.converged)
    }
}

/// Setup followed by every `(x*, direction, seed)` solve, in parallel on
/// `workers` threads, and aggregation.
pub fn run_bounds(config: &RunConfig) -> Result<RunOutput> {
    let setup = Setup::build(config)?;
    run_with_setup(config, &setup)
}

pub fn run_with_setup(config: &RunConfig, setup: &Setup) -> Result<RunOutput> {
    let tasks: Vec<(usize, Direction, u64)> = (0..setup.grid.len())
        .flat_map(|p| Direction::BOTH.into_iter().flat_map(move |d| config.seeds.iter().map(move |&s| (p, d, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let solved: Vec<(BoundResult, Vec<RoundTrace>)> =
        pool.install(|| tasks.par_iter().map(|&(p, d, s)| setup.solve(config, p, d, s)).collect());
    let mut results = Vec::with_capacity(solved.len());
    let mut traces = BTreeMap::new();
    for (i, (r, t)) in solved.into_iter().enumerate() {
        if !r.converged && r.bound.is_finite() {
            eprintln!(
                "warning: run at x* = {:?} ({}, seed {}) ended with violation {:.3e} > {:.3e}; excluded",
                r.x_star,
                r.direction,
                r.seed,
                r.max_violation,
                config.auglag.feasibility_ratio * setup.epsilon
            );
        }
        results.push(r);
        traces.insert(i, t);
    }
    let (lower, upper) = aggregate(&setup.grid, &results);
    let true_effect = match config.data.scm() {
        Some(name) => Some(setup.grid.iter().map(|x| name.true_effect(x)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let naive = scm::naive_regression_curve(
        &setup.dataset,
        &setup.grid,
        None,
        &TrainConfig {
            epochs: config.regressor_epochs,
            ..TrainConfig::regressor()
        },
        rng::derive(config.setup_seed, &[15]),
    )?;
    let curve = BoundCurve {
        dataset: config.data.to_string(),
        coordinate: config.grid.coordinate,
        x_star: setup.grid.clone(),
        lower,
        upper,
        true_effect,
        naive: Some(naive),
        density: density_strip(&setup.dataset, &config.grid),
    };
    Ok(RunOutput {
        config: config.clone(),
        epsilon: setup.epsilon,
        results,
        traces,
        curve,
    })
}

/// Density of the varied treatment over the grid range widened by half its
/// span on each side.
fn density_strip(dataset: &Dataset, grid: &GridSpec) -> Density {
    let observed = dataset.treatments().column_values(grid.coordinate - 1);
    let half = 0.5 * (grid.end - grid.start).max(1.0);
    plot::kde(&observed, grid.start - half, grid.end + half, 201)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn named() -> RunConfig {
        RunConfig::new(DataSource::Named(ScmName::IvLin2dWeak))
    }

    fn result(x: f64, direction: Direction, seed: u64, bound: f64, converged: bool) -> BoundResult {
        BoundResult {
            x_star: vec![x],
            direction,
            seed,
            bound,
            converged,
            max_violation: 0.0,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn config_text_round_trips() {
        let text = "dataset = LM-lin1-2d  # leaky mediation\nnorm = two\nepsilon = auto:1.5\nseeds = 0-2, 7\n\ngrid_coordinate = 2\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.data, DataSource::Named(ScmName::LmLin1_2d));
        assert_eq!(cfg.norm, Norm::Two);
        assert_eq!(cfg.epsilon, Slack::Auto(1.5));
        assert_eq!(cfg.seeds, vec![0, 1, 2, 7]);
        assert_eq!(cfg.grid.coordinate, 2);
        let mut back = RunConfig::parse(&cfg.to_text()).unwrap();
        back.workers = cfg.workers;
        back.output = cfg.output.clone();
        assert_eq!(back, cfg);
    }

    #[test]
    fn later_pairs_override_earlier_ones() {
        let pairs: Vec<(String, String)> = [("dataset", "IV-lin-2d-weak"), ("epsilon", "0.5"), ("epsilon", "2")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        assert_eq!(RunConfig::from_pairs(&pairs).unwrap().epsilon, Slack::Fixed(2.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "n = 5",
            "dataset = nope",
            "dataset = IV-lin-2d-weak\ngrid_coordinate = 3",
            "dataset = IV-lin-2d-weak\ngrid_coordinate = 0",
            "dataset = IV-lin-2d-weak\nvariant = LM",
            "dataset = IV-lin-2d-weak\nseeds = 4-1",
            "dataset = IV-lin-2d-weak\nepsilon = -1",
            "dataset = IV-lin-2d-weak\ngrid_start = 3",
            "dataset = IV-lin-2d-weak\ncolour = red",
            "dataset = IV-lin-2d-weak\nsupport",
            "dataset = missing.csv",
        ] {
            assert!(RunConfig::parse(text).is_err(), "accepted {text:?}");
        }
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0-4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("3, 1").unwrap(), vec![3, 1]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn slack_syntax() {
        assert_eq!("auto".parse::<Slack>().unwrap(), Slack::Auto(2.0));
        assert_eq!("auto:3".parse::<Slack>().unwrap(), Slack::Auto(3.0));
        assert_eq!("0.25".parse::<Slack>().unwrap(), Slack::Fixed(0.25));
        assert!("auto:x".parse::<Slack>().is_err());
        for s in [Slack::Auto(1.5), Slack::Fixed(0.1)] {
            assert_eq!(s.to_string().parse::<Slack>().unwrap(), s);
        }
    }

    #[test]
    fn grid_points_fix_other_coordinates_at_their_means() {
        let mut cfg = named();
        cfg.grid = GridSpec {
            coordinate: 2,
            start: -1.0,
            end: 1.0,
            points: 3,
        };
        assert_eq!(cfg.grid.values(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(cfg.grid.points(&[0.5, 9.0]), vec![vec![0.5, -1.0], vec![0.5, 0.0], vec![0.5, 1.0]]);
        cfg.grid.points = 1;
        assert_eq!(cfg.grid.values(), vec![-1.0]);
    }

    #[test]
    fn aggregation_takes_the_extremes_of_converged_runs() {
        let mut results = Vec::new();
        for (s, (lo, hi)) in [(0.1, 1.0), (-0.2, 1.2), (0.0, 0.9)].into_iter().enumerate() {
            results.push(result(0.0, Direction::Lower, s as u64, lo, true));
            results.push(result(0.0, Direction::Upper, s as u64, hi, true));
        }
        results.push(result(0.0, Direction::Lower, 9, -5.0, false));
        results.push(result(1.0, Direction::Upper, 0, 2.0, false));
        let (lower, upper) = aggregate(&[vec![0.0], vec![1.0]], &results);
        assert_eq!(lower, vec![Some(-0.2), None]);
        assert_eq!(upper, vec![Some(1.2), None]);
    }

    proptest! {
        #[test]
        fn aggregated_lower_never_exceeds_aggregated_upper_of_nested_runs(
            mids in prop::collection::vec(-5.0f64..5.0, 1..6),
            halves in prop::collection::vec(0.0f64..3.0, 6),
        ) {
            let mut results = Vec::new();
            for (s, m) in mids.iter().enumerate() {
                results.push(result(0.0, Direction::Lower, s as u64, m - halves[s], true));
                results.push(result(0.0, Direction::Upper, s as u64, m + halves[s], true));
            }
            let (lower, upper) = aggregate(&[vec![0.0]], &results);
            prop_assert!(lower[0].unwrap() <= upper[0].unwrap());
        }
    }
}
