//! `symdyn`: train agents, collect exploration data, fit symbolic
//! expressions and score dynamics models from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;
mod files;
mod train;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symdyn::dynamics::horizon_mse;
use symdyn::envs::{collect_exploration_dataset, write_dataset_csv};
use symdyn::sr::{fit_dimension, ExpressionGenerator};
use symdyn::{Dataset, Env, EnvKind, GeneratorConfig, GpGenerator, ModelKind, RandomGenerator, SymbolicDynamics};

use crate::files::{read_table, write_atomic};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "symdyn", version, about = "Model-based RL with symbolic dynamics models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents for one or more seeds and write metrics to a run directory.
    Train(TrainArgs),
    /// Collect an action-hold exploration dataset as CSV.
    Collect(CollectArgs),
    /// Fit one symbolic expression to a column of a CSV dataset.
    FitSr(FitSrArgs),
    /// Multi-step prediction error of a symbolic model file.
    EvalModel(EvalModelArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration; missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `sac.lr=0.001`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub env: Option<EnvKind>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Run seeds 0..N.
    #[arg(long, conflicts_with = "seed_list")]
    pub seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Vec<u64>,
    /// Output root; defaults to $SYMDYN_RUN_DIR, then `runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name under the root; defaults to `<env>-<model>`.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    env: EnvKind,
    #[arg(long, default_value_t = 5000)]
    n_traj: usize,
    #[arg(long, default_value_t = 50)]
    traj_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorKind {
    Gp,
    Random,
}

#[derive(Args)]
struct FitSrArgs {
    /// CSV file with a header row.
    #[arg(long, required_unless_present = "demo")]
    data: Option<PathBuf>,
    /// Column to fit.
    #[arg(long, required_unless_present = "demo")]
    target: Option<String>,
    /// Use 100 uniform points on [-2, 2]^2 with target 2*pi*x0 + x1^2.
    #[arg(long, conflicts_with_all = ["data", "target"])]
    demo: bool,
    /// Input columns; defaults to every column except the target, `reward`,
    /// `done` and `next_*`.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<String>,
    #[arg(long, value_enum, default_value = "gp")]
    generator: GeneratorKind,
    /// Pool size of the random generator.
    #[arg(long, default_value_t = 20)]
    pool: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator override such as `generations=20`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the per-candidate table as CSV.
    #[arg(long)]
    candidates: Option<PathBuf>,
}

#[derive(Args)]
struct EvalModelArgs {
    /// Model file, one `coordinate<TAB>expression` line per state coordinate.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    env: EnvKind,
    #[arg(long, default_value_t = 3)]
    horizon: usize,
    /// Random-action episodes whose states serve as start states.
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `step,mse` rows as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Collect(a) => collect(&a),
        Command::FitSr(a) => fit_sr(&a),
        Command::EvalModel(a) => eval_model(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn collect(a: &CollectArgs) -> Result<(), CliError> {
    if a.n_traj == 0 || a.traj_len == 0 {
        return Err(CliError::Usage("n-traj and traj-len must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let data = collect_exploration_dataset(a.env, a.n_traj, a.traj_len, &mut rng);
    let mut buf = Vec::new();
    write_dataset_csv(&a.env.spec(), &data, &mut buf)?;
    write_atomic(&a.out, &buf)?;
    println!("wrote {} transitions to {}", data.len(), a.out.display());
    Ok(())
}

/// The refinement demonstration set.
fn demo_dataset(seed: u64) -> (Vec<String>, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x1: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = x0.iter().zip(&x1).map(|(a, b)| 2.0 * PI * a + b * b).collect();
    (vec!["x0".into(), "x1".into()], Dataset::from_columns(vec![x0, x1], y).expect("equal lengths"))
}

fn load_dataset(a: &FitSrArgs) -> Result<(Vec<String>, Dataset), CliError> {
    let (Some(path), Some(target)) = (&a.data, &a.target) else {
        return Ok(demo_dataset(a.seed));
    };
    let table = read_table(path)?;
    let t = table
        .column(target)
        .ok_or_else(|| CliError::Data(format!("{}: no column named '{target}'", path.display())))?;
    let inputs: Vec<usize> = if a.inputs.is_empty() {
        (0..table.header.len())
            .filter(|&j| {
                let h = &table.header[j];
                j != t && h != "reward" && h != "done" && !h.starts_with("next_")
            })
            .collect()
    } else {
        a.inputs
            .iter()
            .map(|n| table.column(n).ok_or_else(|| CliError::Data(format!("{}: no column named '{n}'", path.display()))))
            .collect::<Result<_, _>>()?
    };
    if inputs.is_empty() {
        return Err(CliError::Data("no input columns".into()));
    }
    let names = inputs.iter().map(|&j| table.header[j].clone()).collect();
    let cols = inputs.iter().map(|&j| table.columns[j].clone()).collect();
    let data = Dataset::from_columns(cols, table.columns[t].clone()).map_err(|e| CliError::Data(e.to_string()))?;
    Ok((names, data))
}

fn fit_sr(a: &FitSrArgs) -> Result<(), CliError> {
    let defaults = GeneratorConfig { seed: a.seed, ..GeneratorConfig::default() };
    let cfg: GeneratorConfig = config::build(&defaults, None, &a.overrides)?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (names, data) = load_dataset(a)?;
    let gen: Box<dyn ExpressionGenerator> = match a.generator {
        GeneratorKind::Gp => Box::new(GpGenerator::new(cfg.clone())),
        GeneratorKind::Random => Box::new(RandomGenerator::new(cfg.clone(), a.pool.max(cfg.n_candidates))),
    };
    let fit = fit_dimension(&data, gen.as_ref(), cfg.n_candidates, cfg.max_rows, a.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    println!("expression\t{}", fit.tree.display_with(&name_refs));
    println!("held_out_mse\t{:e}", fit.report.mse);
    println!("held_out_r2\t{:.6}", fit.report.r2);

    let mut table = String::from("candidate,r2_before,r2_after,r2_gain,mse_before,mse_after,expression\n");
    match &fit.ranking {
        Some(ranking) => {
            println!("\ncandidate  r2_before  r2_after  gain     expression (standardized units)");
            for (i, c) in ranking.candidates.iter().enumerate() {
                let (rb, mb) = c.before.map_or((f64::NAN, f64::NAN), |r| (r.r2, r.mse));
                let (ra, ma) = c.after.map_or((f64::NAN, f64::NAN), |r| (r.r2, r.mse));
                let mark = if i == ranking.best_index { "*" } else { " " };
                println!("{mark}{i:<9} {rb:>9.4} {ra:>9.4} {:>+8.4}  {}", ra - rb, c.tree);
                writeln!(table, "{i},{rb},{ra},{},{mb},{ma},\"{}\"", ra - rb, c.tree).expect("string write");
            }
        }
        None => println!("target is constant on the training rows"),
    }
    if let Some(path) = &a.candidates {
        write_atomic(path, table.as_bytes())?;
    }
    Ok(())
}

fn eval_model(a: &EvalModelArgs) -> Result<(), CliError> {
    if a.horizon == 0 || a.episodes == 0 {
        return Err(CliError::Usage("horizon and episodes must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&a.model)?;
    let model = SymbolicDynamics::from_text(a.env, &text).map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let spec = a.env.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut env = Env::new(a.env);
    let mut starts = Vec::new();
    for _ in 0..a.episodes {
        env.reset(&mut rng);
        loop {
            starts.push(env.state().to_vec());
            if env.step(&spec.uniform_action(&mut rng)).truncated {
                break;
            }
        }
    }
    let mut policy_rng = ChaCha8Rng::seed_from_u64(a.seed);
    policy_rng.set_stream(1);
    let mut policy = |_: &[f64]| spec.uniform_action(&mut policy_rng);
    let mse = horizon_mse(&model, a.env, &starts, &mut policy, a.horizon).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut csv = String::from("step,mse\n");
    for (i, m) in mse.iter().enumerate() {
        writeln!(csv, "{},{m:e}", i + 1).expect("string write");
    }
    print!("{csv}");
    if let Some(path) = &a.out {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}
