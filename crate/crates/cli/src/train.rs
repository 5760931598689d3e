//! The `train` command: a seed sweep writing one directory per seed plus an
//! aggregate learning curve.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use symdyn::{run_training, EpochMetrics, RunConfig};

use crate::files::write_atomic;
use crate::{config, CliError, TrainArgs};

pub const RUN_DIR_ENV: &str = "SYMDYN_RUN_DIR";
const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Serialize)]
struct SeedOutputs {
    seed: u64,
    metrics: String,
    models: String,
    final_model: String,
    policy: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    config: &'a RunConfig,
    seeds: &'a [u64],
    started_unix: u64,
    revision: String,
    outputs: Vec<SeedOutputs>,
    aggregate: String,
}

fn revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

fn run_root(a: &TrainArgs) -> PathBuf {
    a.out
        .clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn metrics_line(m: &EpochMetrics) -> String {
    serde_json::to_string(m).expect("metrics serialize")
}

/// Mean and population std of the evaluation return across seeds, for every
/// epoch that all seeds completed and evaluated.
pub fn aggregate_csv(runs: &[Vec<EpochMetrics>]) -> String {
    let mut out = String::from("env_steps,mean,std\n");
    let epochs = runs.iter().map(Vec::len).min().unwrap_or(0);
    for e in 0..epochs {
        let rets: Option<Vec<f64>> = runs.iter().map(|r| r[e].eval_return_mean).collect();
        let Some(rets) = rets else { continue };
        let n = rets.len() as f64;
        let mean = rets.iter().sum::<f64>() / n;
        let std = (rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        writeln!(out, "{},{mean},{std}", runs[0][e].env_steps).expect("string write");
    }
    out
}

fn rel(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

pub fn run(a: &TrainArgs) -> Result<(), CliError> {
    let file = a.config.as_ref().map(std::fs::read_to_string).transpose()?;
    let mut overrides = a.overrides.clone();
    if let Some(env) = a.env {
        overrides.push(format!("env={env}"));
    }
    if let Some(model) = a.model {
        overrides.push(format!("model={model}"));
    }
    let cfg: RunConfig = config::build(&RunConfig::default(), file.as_deref(), &overrides)?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let seeds: Vec<u64> = match (a.seeds, a.seed_list.is_empty()) {
        (Some(0), _) => return Err(CliError::Usage("--seeds must be at least 1".into())),
        (Some(n), _) => (0..n).collect(),
        (None, false) => a.seed_list.clone(),
        (None, true) => DEFAULT_SEEDS.to_vec(),
    };

    let name = a.name.clone().unwrap_or_else(|| format!("{}-{}", cfg.env, cfg.model));
    let dir = run_root(a).join(name);
    let outputs: Vec<SeedOutputs> = seeds
        .iter()
        .map(|&seed| {
            let s = PathBuf::from(format!("seed-{seed}"));
            SeedOutputs {
                seed,
                metrics: s.join("metrics.jsonl").display().to_string(),
                models: s.join("models").display().to_string(),
                final_model: s.join("model.tsv").display().to_string(),
                policy: s.join("policy.json").display().to_string(),
            }
        })
        .collect();
    let manifest = RunManifest {
        config: &cfg,
        seeds: &seeds,
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        revision: revision(),
        outputs,
        aggregate: "aggregate.csv".into(),
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest").as_bytes())?;

    let mut all = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let seed_dir = dir.join(format!("seed-{seed}"));
        let metrics_path = seed_dir.join("metrics.jsonl");
        let mut lines = String::new();
        let mut records: Vec<EpochMetrics> = Vec::new();
        let mut io_err = None;
        let result = run_training(RunConfig { seed, ..cfg.clone() }, |run, m| {
            lines.push_str(&metrics_line(m));
            lines.push('\n');
            records.push(m.clone());
            let mut res = write_atomic(&metrics_path, lines.as_bytes());
            if let (Ok(()), Some(text)) = (&res, run.model_text()) {
                res = write_atomic(&seed_dir.join("models").join(format!("epoch-{:04}.tsv", m.epoch)), text.as_bytes());
            }
            if let Err(e) = res {
                io_err.get_or_insert(e);
            }
            if !a.quiet {
                let ret = m.eval_return_mean.map_or("-".to_string(), |r| format!("{r:.2}"));
                eprintln!("seed {seed} epoch {} env_steps {} return {ret}", m.epoch, m.env_steps);
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let res = match result {
            Ok(res) => res,
            Err(e) => {
                let dump = serde_json::json!({
                    "seed": seed,
                    "error": e.to_string(),
                    "completed_epochs": records.len(),
                    "last_metrics": records.last(),
                });
                write_atomic(&seed_dir.join("failure.json"), dump.to_string().as_bytes())?;
                return Err(CliError::Runtime(format!(
                    "seed {seed}: {e} (state dump in {})",
                    rel(&seed_dir.join("failure.json"), &dir)
                )));
            }
        };
        if let Some(text) = &res.model_text {
            write_atomic(&seed_dir.join("model.tsv"), text.as_bytes())?;
        }
        let policy = serde_json::to_string(&res.agent.policy_snapshot()).expect("policy serializes");
        write_atomic(&seed_dir.join("policy.json"), policy.as_bytes())?;
        all.push(res.metrics);
    }
    write_atomic(&dir.join("aggregate.csv"), aggregate_csv(&all).as_bytes())?;
    if !a.quiet {
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}
