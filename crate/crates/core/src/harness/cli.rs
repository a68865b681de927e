use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{FedError, Result};
use crate::harness::config::{parse_config, ExperimentConfig, Method};
use crate::harness::emit::{emit_traces, write_config, write_manifest, RunStatus, CONFIG_FILE, MANIFEST_FILE};
use crate::harness::experiment::{run_experiment_partial, ExperimentResult};

#[derive(Parser, Debug)]
#[command(name = "federico", version, about = "Decentralized personalized federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Vary one dotted config key over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Run every value once per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run several methods on shared data splits and initial models.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        splits: usize,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_value = "federico,local_only,fedavg,fedavg_plus")]
        methods: Vec<String>,
    },
}

/// Runs `cfg` into `dir`: the manifest is written first as `running`, then
/// rewritten as `complete` or `failed` once traces are flushed.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, workers: Option<usize>) -> Result<ExperimentResult> {
    fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    write_config(dir, cfg)?;
    write_manifest(dir, cfg, RunStatus::Running, 0, &[CONFIG_FILE], None)?;
    let outcome = match run_experiment_partial(cfg, workers) {
        Ok(o) => o,
        Err(e) => {
            write_manifest(dir, cfg, RunStatus::Failed, 0, &[CONFIG_FILE], Some(&e.to_string()))?;
            return Err(e);
        }
    };
    let mut files = vec![CONFIG_FILE];
    files.extend(emit_traces(&outcome.result, dir)?);
    files.push(MANIFEST_FILE);
    let rounds = outcome.result.rounds;
    match outcome.error {
        None => {
            write_manifest(dir, cfg, RunStatus::Complete, rounds, &files, None)?;
            Ok(outcome.result)
        }
        Some(e) => {
            write_manifest(dir, cfg, RunStatus::Failed, rounds, &files, Some(&e.to_string()))?;
            Err(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub weighted_average: f64,
    pub total_bytes: u64,
}

pub fn sweep(
    base: &ExperimentConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
    out: &Path,
    workers: Option<usize>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(FedError::config("values", "need at least one value"));
    }
    let seeds: Vec<Option<u64>> = if seeds.is_empty() {
        vec![None]
    } else {
        seeds.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    for value in values {
        let cfg = base.with_override(param, value)?;
        for &seed in &seeds {
            let (cfg, name) = match seed {
                Some(s) => (
                    ExperimentConfig { seed: s, ..cfg.clone() },
                    format!("{param}={value}/seed={s}"),
                ),
                None => (cfg.clone(), format!("{param}={value}")),
            };
            let dir = out.join(name);
            log::info!("sweep: {}", dir.display());
            let r = run_to_dir(&cfg, &dir, workers)?;
            rows.push(SweepRow {
                value: value.clone(),
                seed: cfg.seed,
                dir,
                weighted_average: r.weighted_average,
                total_bytes: r.comm.iter().map(|c| c.total()).sum(),
            });
        }
    }
    let path = out.join("sweep.csv");
    let file = fs::File::create(&path).map_err(|e| FedError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["param", "value", "seed", "weighted_average", "total_bytes"])?;
    for r in &rows {
        w.serialize((param, &r.value, r.seed, r.weighted_average, r.total_bytes))?;
    }
    w.flush().map_err(|e| FedError::io(&path, e))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub split: usize,
    pub seed_index: usize,
    pub data_seed: u64,
    pub seed: u64,
    pub method: Method,
    pub weighted_average: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub splits: usize,
    pub seeds: usize,
    pub rows: Vec<CompareRow>,
}

impl ComparisonTable {
    /// Mean over seeds of `method`'s metric, one entry per split.
    pub fn split_means(&self, method: Method) -> Vec<f64> {
        (0..self.splits)
            .map(|s| {
                let v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.split == s && r.method == method)
                    .map(|r| r.weighted_average)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    pub fn mean(&self, method: Method) -> f64 {
        let v = self.split_means(method);
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.rows.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    }
}

/// Split `s` uses data seed `data_seed + s`; seed index `r` uses model seed
/// `seed + r`. Every method sees the same pairs.
pub fn compare(
    base: &ExperimentConfig,
    methods: &[Method],
    splits: usize,
    seeds: usize,
    out: &Path,
    workers: Option<usize>,
) -> Result<ComparisonTable> {
    if splits == 0 || seeds == 0 {
        return Err(FedError::config("splits", "splits and seeds must be positive"));
    }
    if methods.is_empty() {
        return Err(FedError::config("methods", "need at least one method"));
    }
    let mut table = ComparisonTable {
        splits,
        seeds,
        rows: Vec::new(),
    };
    for s in 0..splits {
        for r in 0..seeds {
            for &method in methods {
                let cfg = ExperimentConfig {
                    method,
                    seed: base.seed + r as u64,
                    data_seed: Some(base.data_seed() + s as u64),
                    ..base.clone()
                };
                let dir = out.join(format!("split={s}/seed={r}/{}", method.name()));
                let res = run_to_dir(&cfg, &dir, workers)?;
                log::info!("compare split {s} seed {r} {}: {:.4}", method.name(), res.weighted_average);
                table.rows.push(CompareRow {
                    split: s,
                    seed_index: r,
                    data_seed: cfg.data_seed(),
                    seed: cfg.seed,
                    method,
                    weighted_average: res.weighted_average,
                });
            }
        }
    }
    write_comparison(&table, out)?;
    Ok(table)
}

fn write_comparison(table: &ComparisonTable, out: &Path) -> Result<()> {
    let path = out.join("compare.csv");
    let file = fs::File::create(&path).map_err(|e| FedError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["split", "seed_index", "data_seed", "seed", "method", "weighted_average"])?;
    for r in &table.rows {
        w.serialize((r.split, r.seed_index, r.data_seed, r.seed, r.method.name(), r.weighted_average))?;
    }
    w.flush().map_err(|e| FedError::io(&path, e))?;

    let summary: BTreeMap<&str, serde_json::Value> = table
        .methods()
        .into_iter()
        .map(|m| {
            (
                m.name(),
                serde_json::json!({ "split_means": table.split_means(m), "mean": table.mean(m) }),
            )
        })
        .collect();
    let json = serde_json::json!({ "splits": table.splits, "seeds": table.seeds, "summary": summary, "rows": table.rows });
    let path = out.join("compare.json");
    fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(|e| FedError::io(&path, e))
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common } => {
            let (cfg, out) = load(&common)?;
            let r = run_to_dir(&cfg, &out, common.workers)?;
            println!(
                "{}: weighted {:?} {:.4} over {} rounds -> {}",
                cfg.method.name(),
                r.metric,
                r.weighted_average,
                r.rounds,
                out.display()
            );
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let (cfg, out) = load(&common)?;
            for row in sweep(&cfg, &param, &values, &seeds, &out, common.workers)? {
                println!("{param}={} seed={}: {:.4}", row.value, row.seed, row.weighted_average);
            }
        }
        Command::Compare {
            common,
            splits,
            seeds,
            methods,
        } => {
            let (cfg, out) = load(&common)?;
            let methods = methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?;
            let table = compare(&cfg, &methods, splits, seeds, &out, common.workers)?;
            for m in table.methods() {
                let per_split: Vec<String> = table.split_means(m).iter().map(|v| format!("{v:.4}")).collect();
                println!("{:<12} mean {:.4}  splits [{}]", m.name(), table.mean(m), per_split.join(", "));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
