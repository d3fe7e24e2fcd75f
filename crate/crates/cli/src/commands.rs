use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use salf::engine::{run_experiment_with_data, sweep, DataSource, ExperimentConfig, ExperimentData, SweepSpec};
use salf::theory::{
    builtin_fixtures, verify_gradients, verify_lemma1, verify_lemma2, verify_lemma3, verify_theorem1, Report,
    Theorem1Options,
};
use serde::Serialize;
use toml::Value;

use crate::config::{apply_override, digest, read_document, resolve, usage};
use crate::output::{write_json, write_rounds_csv, write_sweep_cells, write_sweep_table, Manifest};

pub const DATA_DIR_ENV: &str = "SALF_DATA_DIR";

/// Whether everything requested completed and passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    Failed,
}

fn load_document(path: Option<&Path>, sets: &[String]) -> Result<Value> {
    let mut doc = match path {
        Some(p) => read_document(p)?,
        None => Value::Table(toml::Table::new()),
    };
    for s in sets {
        apply_override(&mut doc, s)?;
    }
    Ok(doc)
}

/// Precedence for the MNIST root: flag, then config, then environment.
fn fill_data_dir(cfg: &mut ExperimentConfig, flag: Option<&Path>) {
    if let DataSource::Mnist { dir, .. } = &mut cfg.data {
        if let Some(f) = flag {
            *dir = Some(f.to_path_buf());
        } else if dir.is_none() {
            *dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        }
    }
}

fn out_dir(out: Option<&Path>, command: &str, digest: &str) -> Result<PathBuf> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs").join(format!("{command}-{}", &digest[..12])));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    method: &'a str,
    rounds: usize,
    final_loss: Option<f64>,
    final_accuracy: Option<f64>,
    config: &'a ExperimentConfig,
}

pub fn train(args: &TrainArgs) -> Result<Outcome> {
    let mut doc = load_document(Some(&args.config), &args.sets)?;
    if let Some(seed) = args.seed {
        apply_override(&mut doc, &format!("seed={seed}"))?;
    }
    let mut cfg: ExperimentConfig = resolve(&doc, "experiment config")?;
    fill_data_dir(&mut cfg, args.data_dir.as_deref());
    cfg.validate()?;
    let digest = digest("train", &cfg)?;
    let data = ExperimentData::load(&cfg)?;
    let dir = out_dir(args.out.as_deref(), "train", &digest)?;
    println!("train {} with {} clients for {} rounds (config {})", cfg.aggregator.name(), cfg.clients, cfg.rounds, &digest[..12]);
    let result = run_experiment_with_data(&cfg, &data)?;
    for r in result.records.iter().filter(|r| r.eval_loss.is_some()) {
        println!(
            "round {:>5}  train_loss {:.5}  eval_loss {:.5}  accuracy {}",
            r.round,
            r.train_loss,
            r.eval_loss.unwrap_or(f64::NAN),
            r.eval_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
    }
    write_rounds_csv(&dir.join("rounds.csv"), &result.records)?;
    let summary = TrainSummary {
        method: cfg.aggregator.name(),
        rounds: cfg.rounds,
        final_loss: result.final_eval.map(|e| e.loss),
        final_accuracy: result.final_accuracy(),
        config: &cfg,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("manifest.json"), &Manifest::new("train", digest, cfg.seed, &["rounds.csv", "summary.json"]))?;
    match (summary.final_loss, summary.final_accuracy) {
        (Some(l), Some(a)) => println!("final eval_loss {l:.5} accuracy {a:.4}"),
        (Some(l), None) => println!("final eval_loss {l:.5}"),
        _ => {}
    }
    println!("wrote {}", dir.display());
    Ok(Outcome::Passed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Lemma1,
    Lemma2,
    Lemma3,
    Theorem1,
    Gradients,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyArgs {
    pub suite: Suite,
    pub clients: usize,
    pub layers: usize,
    pub draws: usize,
    pub seed: u64,
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[serde(skip)]
    pub sets: Vec<String>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// Approximate expected total variation between the empirical law of
/// `|U^l|` from `n` draws and its binomial law, worst layer.
fn expected_tv(clients: usize, layers: usize, n: usize) -> f64 {
    (1..=layers)
        .map(|l| {
            let q = l as f64 / (layers + 1) as f64;
            let mut pmf = (1.0 - q).powi(clients as i32);
            let mut sum = 0.0;
            for k in 0..=clients {
                sum += (2.0 * pmf * (1.0 - pmf) / (std::f64::consts::PI * n as f64)).sqrt();
                pmf *= (clients - k) as f64 / (k + 1) as f64 * q / (1.0 - q);
            }
            0.5 * sum
        })
        .fold(0.0, f64::max)
}

pub fn verify(args: &VerifyArgs) -> Result<Outcome> {
    if args.draws == 0 {
        return Err(usage("--draws must be positive"));
    }
    let theorem1 = if args.suite == Suite::Theorem1 {
        let doc = load_document(args.config.as_deref(), &args.sets)?;
        Some(resolve::<Theorem1Options>(&doc, "theorem1 options")?)
    } else {
        if args.config.is_some() || !args.sets.is_empty() {
            return Err(usage("--config and --set only apply to the theorem1 suite"));
        }
        None
    };
    match args.suite {
        Suite::Lemma1 if expected_tv(args.clients, args.layers, args.draws) > 0.005 => eprintln!(
            "warning: {} draws give an expected sampling total variation of {:.4}; the 0.01 threshold may fail by chance",
            args.draws,
            expected_tv(args.clients, args.layers, args.draws)
        ),
        Suite::Lemma2 | Suite::Lemma3 if args.draws < 10_000 => {
            eprintln!("warning: {} draws are too few for tight Monte Carlo estimates; use at least 10000", args.draws)
        }
        _ => {}
    }
    let digest = digest("verify", &(args, &theorem1))?;
    let dir = out_dir(args.out.as_deref(), "verify", &digest)?;
    let reports: Vec<Report> = match args.suite {
        Suite::Lemma1 => vec![verify_lemma1(args.clients, args.layers, args.draws, args.seed)?],
        Suite::Lemma2 => builtin_fixtures(args.seed)?
            .iter()
            .map(|f| verify_lemma2(f, args.draws, args.seed))
            .collect::<salf::Result<_>>()?,
        Suite::Lemma3 => builtin_fixtures(args.seed)?
            .iter()
            .map(|f| verify_lemma3(f, args.draws, args.seed))
            .collect::<salf::Result<_>>()?,
        Suite::Theorem1 => vec![verify_theorem1(theorem1.as_ref().expect("parsed above"))?.report],
        Suite::Gradients => vec![verify_gradients(args.seed)?],
    };
    for check in reports.iter().flat_map(|r| &r.checks) {
        println!("{check}");
    }
    let passed = reports.iter().all(Report::passed);
    write_json(&dir.join("report.json"), &reports)?;
    write_json(&dir.join("manifest.json"), &Manifest::new("verify", digest, args.seed, &["report.json"]))?;
    println!("{}", if passed { "all checks passed" } else { "some checks failed" });
    Ok(if passed { Outcome::Passed } else { Outcome::Failed })
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub sets: Vec<String>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn run_sweep(args: &SweepArgs) -> Result<Outcome> {
    let doc = load_document(Some(&args.config), &args.sets)?;
    let mut spec: SweepSpec = resolve(&doc, "sweep config")?;
    fill_data_dir(&mut spec.base, args.data_dir.as_deref());
    spec.validate()?;
    let digest = digest("sweep", &spec)?;
    let data = ExperimentData::load(&spec.base)?;
    let dir = out_dir(args.out.as_deref(), "sweep", &digest)?;
    let cells = spec.methods.len() * spec.fractions.len() * spec.seeds.len();
    println!("sweep over {cells} cells (config {})", &digest[..12]);
    let result = sweep(&spec, &data)?;
    for c in &result.cells {
        match (&c.accuracy, &c.error) {
            (_, Some(e)) => println!("{} q={} seed={}: failed: {e}", c.method, c.fraction, c.seed),
            (Some(a), None) => println!("{} q={} seed={}: accuracy {a:.4}", c.method, c.fraction, c.seed),
            (None, None) => println!("{} q={} seed={}: done", c.method, c.fraction, c.seed),
        }
    }
    write_sweep_table(&dir.join("table.csv"), &result)?;
    write_sweep_cells(&dir.join("cells.csv"), &result)?;
    write_json(&dir.join("summary.json"), &result)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest::new("sweep", digest, spec.base.seed, &["table.csv", "cells.csv", "summary.json"]),
    )?;
    print!("{}", fs::read_to_string(dir.join("table.csv"))?);
    println!("wrote {}", dir.display());
    Ok(if result.all_succeeded() { Outcome::Passed } else { Outcome::Failed })
}
