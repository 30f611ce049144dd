use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use causal_bounds::pipeline::{self, GridSpec, RunConfig};
use causal_bounds::report::{self, Summary};
use causal_bounds::scm::{self, ScmName};
use causal_bounds::{plot, rng};
use clap::{Args, Parser, Subcommand};

/// Bounds on interventional means under unobserved confounding.
#[derive(Parser)]
#[command(name = "causal-bounds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset to CSV.
    Generate {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = scm::DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the full bounds pipeline.
    Bounds(BoundsArgs),
    /// Print the true effect of a synthetic dataset along a grid.
    Oracle(OracleArgs),
    /// Re-render a figure from a summary JSON.
    Plot {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Every flag overrides the config-file key of the same name (with `-`
/// read as `_`).
#[derive(Args, Default)]
struct BoundsArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    #[arg(long)]
    setup_seed: Option<String>,
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    basis_size: Option<String>,
    #[arg(long)]
    flow: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    /// A number, `auto` or `auto:<factor>`.
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    support: Option<String>,
    #[arg(long)]
    mc_batch: Option<String>,
    #[arg(long)]
    grid_coordinate: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    grid_start: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    grid_end: Option<String>,
    #[arg(long)]
    grid_points: Option<String>,
    /// For example `0-4` or `0,3,7`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    tau_init: Option<String>,
    #[arg(long)]
    tau_max: Option<String>,
    #[arg(long)]
    tau_growth: Option<String>,
    #[arg(long)]
    outer_rounds: Option<String>,
    #[arg(long)]
    inner_steps: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    feasibility_ratio: Option<String>,
    #[arg(long)]
    regressor_epochs: Option<String>,
    #[arg(long)]
    flow_epochs: Option<String>,
    #[arg(long)]
    basis_epochs: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// `false` writes zero wall times so outputs are byte-reproducible.
    #[arg(long)]
    timing: Option<String>,
    #[arg(long)]
    output: Option<String>,
}

impl BoundsArgs {
    fn pairs(&self) -> Vec<(String, String)> {
        let flags: [(&str, &Option<String>); 30] = [
            ("dataset", &self.dataset),
            ("variant", &self.variant),
            ("n", &self.n),
            ("data_seed", &self.data_seed),
            ("setup_seed", &self.setup_seed),
            ("basis", &self.basis),
            ("basis_size", &self.basis_size),
            ("flow", &self.flow),
            ("norm", &self.norm),
            ("epsilon", &self.epsilon),
            ("support", &self.support),
            ("mc_batch", &self.mc_batch),
            ("grid_coordinate", &self.grid_coordinate),
            ("grid_start", &self.grid_start),
            ("grid_end", &self.grid_end),
            ("grid_points", &self.grid_points),
            ("seeds", &self.seeds),
            ("tau_init", &self.tau_init),
            ("tau_max", &self.tau_max),
            ("tau_growth", &self.tau_growth),
            ("outer_rounds", &self.outer_rounds),
            ("inner_steps", &self.inner_steps),
            ("learning_rate", &self.learning_rate),
            ("feasibility_ratio", &self.feasibility_ratio),
            ("regressor_epochs", &self.regressor_epochs),
            ("flow_epochs", &self.flow_epochs),
            ("basis_epochs", &self.basis_epochs),
            ("workers", &self.workers),
            ("timing", &self.timing),
            ("output", &self.output),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    fn config(&self) -> causal_bounds::Result<RunConfig> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            let file = RunConfig::parse_pairs(&text)?;
            // Relative dataset paths in a config file are relative to the file.
            let base = path.parent().unwrap_or(Path::new(""));
            for (k, v) in file {
                let v = if k == "dataset" && v.to_ascii_lowercase().ends_with(".csv") && Path::new(&v).is_relative() {
                    base.join(&v).to_string_lossy().into_owned()
                } else {
                    v
                };
                pairs.push((k, v));
            }
        }
        pairs.extend(self.pairs());
        RunConfig::from_pairs(&pairs)
    }
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    dataset: String,
    /// Sample size used for the empirical means of the fixed coordinates.
    #[arg(long, default_value_t = scm::DEFAULT_N)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 1)]
    grid_coordinate: usize,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    grid_start: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    grid_end: f64,
    #[arg(long, default_value_t = 7)]
    grid_points: usize,
    /// Also print a Monte Carlo estimate from this many interventional draws.
    #[arg(long)]
    mc_draws: Option<usize>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Infeasible,
}

impl From<causal_bounds::Error> for Failure {
    fn from(e: causal_bounds::Error) -> Self {
        Failure::Config(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Infeasible) => {
            eprintln!("error: no run reached the feasibility tolerance");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Generate { dataset, n, seed, output } => {
            let name: ScmName = dataset.parse()?;
            let data = scm::generate(name, n, seed)?;
            data.write_csv(&output)?;
            println!("wrote {} rows of {name} to {}", data.n(), output.display());
        }
        Command::Bounds(args) => bounds(&args)?,
        Command::Oracle(args) => oracle(&args)?,
        Command::Plot { summary, output } => {
            let s = Summary::load(&summary)?;
            plot::emit_svg_plot(&s.curve(), &output)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn bounds(args: &BoundsArgs) -> std::result::Result<(), Failure> {
    let config = args.config()?;
    let out = pipeline::run_bounds(&config)?;
    write_outputs(&out).context("writing outputs")?;
    for i in 0..out.curve.x_star.len() {
        let show = |v: Option<f64>| v.map_or("missing".to_string(), |v| format!("{v:.4}"));
        println!(
            "x* = {:?}: [{}, {}]",
            out.curve.x_star[i],
            show(out.curve.lower[i]),
            show(out.curve.upper[i])
        );
    }
    println!("epsilon {:.6}; outputs in {}", out.epsilon, config.output.display());
    if out.totally_infeasible() {
        return Err(Failure::Infeasible);
    }
    Ok(())
}

fn write_outputs(out: &pipeline::RunOutput) -> Result<()> {
    let dir = &out.config.output;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows = report::sorted(&out.results, &out.curve.x_star);
    report::emit_csv(&rows, &dir.join("bounds.csv"))?;
    report::emit_summary_json(out, &dir.join("summary.json"))?;
    report::emit_trace_csv(out, &dir.join("trace.csv"))?;
    std::fs::write(dir.join("config.txt"), out.config.to_text())?;
    plot::emit_svg_plot(&out.curve, &dir.join("bounds.svg"))?;
    Ok(())
}

fn oracle(args: &OracleArgs) -> std::result::Result<(), Failure> {
    let name: ScmName = args.dataset.parse()?;
    let grid = GridSpec {
        coordinate: args.grid_coordinate,
        start: args.grid_start,
        end: args.grid_end,
        points: args.grid_points,
    };
    if grid.coordinate == 0 || grid.coordinate > name.treatment_dim() || grid.points == 0 || grid.start > grid.end {
        return Err(anyhow::anyhow!("invalid grid for {name}").into());
    }
    let data = scm::generate(name, args.n, args.data_seed)?;
    let points = grid.points(&data.treatments().column_means());
    let mut header: Vec<String> = (1..=name.treatment_dim()).map(|i| format!("x_star_{i}")).collect();
    header.push("true_effect".into());
    if args.mc_draws.is_some() {
        header.extend(["mc_estimate".into(), "mc_se".into()]);
    }
    println!("{}", header.join(","));
    for (i, x) in points.iter().enumerate() {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(name.true_effect(x)?.to_string());
        if let Some(draws) = args.mc_draws {
            let mc = scm::simulate_effect(name, x, draws, rng::derive(args.data_seed, &[i as u64]))?;
            row.push(mc.mean.to_string());
            row.push(mc.std_error.to_string());
        }
        println!("{}", row.join(","));
    }
    Ok(())
}
