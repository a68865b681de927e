//! Trace and manifest files. CSV rows are ordered by round, then `i`, then `j`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::error::{FedError, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{ExperimentResult, MetricPoint};
use crate::mixture::Metric;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const COMM_FILE: &str = "comm.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Serialize)]
struct ClientMetric {
    client: usize,
    distribution_id: usize,
    n: usize,
    value: f64,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    method: &'static str,
    metric: Metric,
    rounds: usize,
    per_client: Vec<ClientMetric>,
    weighted_average: f64,
    history: &'a [MetricPoint],
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| FedError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| FedError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    status: RunStatus,
    rounds_completed: usize,
    files: &[&str],
    error: Option<&str>,
) -> Result<()> {
    let manifest = json!({
        "status": status,
        "complete": status == RunStatus::Complete,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "data_seed": cfg.data_seed(),
        "rounds_completed": rounds_completed,
        "files": files,
        "error": error,
        "config": cfg,
    });
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_file(&dir.join(CONFIG_FILE), &cfg.to_json())
}

/// Writes the trace files for whatever rounds `result` holds. `metrics.json`
/// is only written once final metrics exist. Returns the file names written.
pub fn emit_traces(result: &ExperimentResult, dir: &Path) -> Result<Vec<&'static str>> {
    fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
    let mut written = Vec::new();

    let mut w = csv_writer(&dir.join(WEIGHTS_FILE))?;
    w.write_record(["round", "i", "j", "w_ij"])?;
    for (t, matrix) in result.weights.iter().enumerate() {
        for (i, row) in matrix.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.serialize((t + 1, i, j, v))?;
            }
        }
    }
    w.flush().map_err(|e| FedError::io(dir.join(WEIGHTS_FILE), e))?;
    written.push(WEIGHTS_FILE);

    let mut w = csv_writer(&dir.join(COMM_FILE))?;
    w.write_record(["round", "model_bytes", "gradient_bytes", "total_bytes", "all_to_all_bytes"])?;
    for (t, c) in result.comm.iter().enumerate() {
        w.serialize((t + 1, c.model_bytes, c.gradient_bytes, c.total(), c.all_to_all_bytes))?;
    }
    w.flush().map_err(|e| FedError::io(dir.join(COMM_FILE), e))?;
    written.push(COMM_FILE);

    let mut w = csv_writer(&dir.join(LOSSES_FILE))?;
    w.write_record(["round", "i", "weighted_loss"])?;
    for (t, row) in result.loss_trace.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            w.serialize((t + 1, i, v))?;
        }
    }
    w.flush().map_err(|e| FedError::io(dir.join(LOSSES_FILE), e))?;
    written.push(LOSSES_FILE);

    if !result.final_metric.is_empty() {
        let metrics = MetricsFile {
            method: result.method.name(),
            metric: result.metric,
            rounds: result.rounds,
            per_client: result
                .final_metric
                .iter()
                .enumerate()
                .map(|(i, &value)| ClientMetric {
                    client: i,
                    distribution_id: result.distribution_ids[i],
                    n: result.sample_counts[i],
                    value,
                })
                .collect(),
            weighted_average: result.weighted_average,
            history: &result.metric_history,
        };
        write_file(&dir.join(METRICS_FILE), &serde_json::to_string_pretty(&metrics)?)?;
        written.push(METRICS_FILE);
    }
    Ok(written)
}

/// Paths of the files a complete run leaves behind.
pub fn run_files(dir: &Path) -> Vec<PathBuf> {
    [CONFIG_FILE, WEIGHTS_FILE, METRICS_FILE, COMM_FILE, LOSSES_FILE, MANIFEST_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Method;
    use crate::protocol::CommStats;

    fn result(rounds: usize, k: usize) -> ExperimentResult {
        let row = vec![1.0 / k as f64; k];
        ExperimentResult {
            method: Method::Federico,
            metric: Metric::Accuracy,
            rounds,
            final_metric: vec![0.5; k],
            weighted_average: 0.5,
            sample_counts: vec![10; k],
            distribution_ids: (0..k).collect(),
            weights: vec![vec![row; k]; rounds],
            loss_trace: vec![vec![1.0; k]; rounds],
            metric_history: Vec::new(),
            comm: vec![CommStats::default(); rounds],
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn one_round_two_clients_gives_four_weight_rows() {
        let dir = tempfile::tempdir().unwrap();
        emit_traces(&result(1, 2), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(WEIGHTS_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,i,j,w_ij");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "1,0,0,0.5");
        assert_eq!(lines[4], "1,1,1,0.5");
    }

    #[test]
    fn unfinished_results_skip_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = result(2, 3);
        r.final_metric.clear();
        let files = emit_traces(&r, dir.path()).unwrap();
        assert!(!files.contains(&METRICS_FILE));
        assert!(!dir.path().join(METRICS_FILE).exists());
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        assert!(matches!(
            emit_traces(&result(1, 2), &blocker.join("sub")),
            Err(FedError::Io { .. })
        ));
    }
}
