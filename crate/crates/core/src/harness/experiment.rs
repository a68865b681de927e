use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::baselines::{fedavg_round, fine_tune, local_round};
use crate::data::{train_test_split, Dataset};
use crate::em_reference::{em_iteration, EmLoss, GlobalState, PhiStep};
use crate::error::{FedError, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::recipes::{build_task, Task};
use crate::mixture::{evaluate, Metric};
use crate::models::{ModelSpec, ParamVector};
use crate::protocol::{ClientNode, CommStats, Federation, ProtocolConfig, TrainConfig};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricPoint {
    pub round: usize,
    pub per_client: Vec<f64>,
    pub weighted_average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub method: Method,
    pub metric: Metric,
    /// Rounds actually completed.
    pub rounds: usize,
    pub final_metric: Vec<f64>,
    pub weighted_average: f64,
    /// Local dataset size `n_i` (train plus test).
    pub sample_counts: Vec<usize>,
    pub distribution_ids: Vec<usize>,
    /// `weights[t][i][j]` after round `t + 1`.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// `loss_trace[t][i]`: client `i`'s weighted training loss in round `t + 1`.
    pub loss_trace: Vec<Vec<f64>>,
    /// Every `eval_every` rounds.
    pub metric_history: Vec<MetricPoint>,
    pub comm: Vec<CommStats>,
    pub wall_clock_secs: f64,
}

impl ExperimentResult {
    pub fn final_weights(&self) -> Option<&Vec<Vec<f64>>> {
        self.weights.last()
    }
}

/// A run that stopped early keeps the traces of the rounds it completed.
#[derive(Debug)]
pub struct RunOutcome {
    pub result: ExperimentResult,
    pub error: Option<FedError>,
}

/// `Σ_i n_i m_i / Σ_i n_i`.
pub fn weighted_mean(values: &[f64], counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return f64::NAN;
    }
    values.iter().zip(counts).map(|(v, &c)| v * c as f64).sum::<f64>() / n as f64
}

pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult> {
    let outcome = run_experiment_partial(cfg, workers)?;
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(outcome.result),
    }
}

/// Runs on a dedicated pool of `workers` threads. Setup errors are returned
/// directly; errors during training come back inside the outcome.
pub fn run_experiment_partial(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(FedError::config("workers", "must be positive"));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| FedError::config("workers", e.to_string()))?;
    pool.install(|| {
        let task = build_task(cfg)?;
        Ok(Runner::new(cfg, &task)?.run())
    })
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    task: &'a Task,
    train: TrainConfig,
    nodes: Vec<ClientNode>,
    result: ExperimentResult,
    start: Instant,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, task: &'a Task) -> Result<Self> {
        let k = task.clients.len();
        let train = TrainConfig {
            optimizer: cfg.optimizer,
            loss_fn: task.loss_fn,
            reduction: cfg.loss_reduction,
            local_steps: cfg.local_steps,
            batch_size: cfg.batch_size,
        };
        let nodes = task
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let (fit, holdout) = match cfg.weight_holdout {
                    Some(h) => {
                        let seed = stream(cfg.data_seed(), Purpose::Partition, i as u64).random();
                        let s = train_test_split(&c.split.train, 1.0 - h, seed)?;
                        (s.train, Some(s.test))
                    }
                    None => (c.split.train.clone(), None),
                };
                let node = ClientNode::new(i, k, task.spec.clone(), fit, cfg.tracker, &cfg.optimizer, cfg.seed);
                Ok(match holdout {
                    Some(h) => node.with_holdout(h),
                    None => node,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let result = ExperimentResult {
            method: cfg.method,
            metric: task.metric,
            rounds: 0,
            final_metric: Vec::new(),
            weighted_average: f64::NAN,
            sample_counts: task.clients.iter().map(|c| c.split.len()).collect(),
            distribution_ids: task.clients.iter().map(|c| c.distribution_id).collect(),
            weights: Vec::new(),
            loss_trace: Vec::new(),
            metric_history: Vec::new(),
            comm: Vec::new(),
            wall_clock_secs: 0.0,
        };
        Ok(Runner {
            cfg,
            task,
            train,
            nodes,
            result,
            start: Instant::now(),
        })
    }

    fn run(mut self) -> RunOutcome {
        let err = match self.cfg.method {
            Method::Federico => self.run_federico(),
            Method::LocalOnly => self.run_local(),
            Method::Fedavg => self.run_fedavg(false),
            Method::FedavgPlus => self.run_fedavg(true),
            Method::ReferenceEm => self.run_reference_em(),
        }
        .err();
        if let Some(e) = &err {
            log::error!("{} stopped after {} rounds: {e}", self.cfg.method.name(), self.result.rounds);
        }
        self.result.wall_clock_secs = self.start.elapsed().as_secs_f64();
        RunOutcome {
            result: self.result,
            error: err,
        }
    }

    fn evaluate_all(&self, weights: &[Vec<f64>], models: &[(&ModelSpec, &ParamVector)]) -> Result<Vec<f64>> {
        self.task
            .clients
            .iter()
            .zip(weights)
            .map(|(c, w)| evaluate(w, models, &c.split.test, self.task.metric))
            .collect()
    }

    fn record_round(
        &mut self,
        round: usize,
        weights: Vec<Vec<f64>>,
        losses: Vec<f64>,
        comm: CommStats,
        eval: impl FnOnce(&Self) -> Result<Vec<f64>>,
    ) -> Result<()> {
        self.result.rounds = round;
        self.result.weights.push(weights);
        self.result.loss_trace.push(losses);
        self.result.comm.push(comm);
        if round.is_multiple_of(self.cfg.eval_every) {
            let per_client = eval(self)?;
            let avg = weighted_mean(&per_client, &self.result.sample_counts);
            log::info!("round {round}: weighted {:?} {avg:.4}", self.task.metric);
            self.result.metric_history.push(MetricPoint {
                round,
                per_client,
                weighted_average: avg,
            });
        }
        Ok(())
    }

    fn finish(&mut self, per_client: Vec<f64>) {
        self.result.weighted_average = weighted_mean(&per_client, &self.result.sample_counts);
        self.result.final_metric = per_client;
    }

    fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            sampler: self.cfg.sampler,
            tracker: self.cfg.tracker,
            self_loss: self.cfg.self_loss,
            train: self.train.clone(),
        }
    }

    fn run_federico(&mut self) -> Result<()> {
        let mut fed = Federation::new(std::mem::take(&mut self.nodes), self.protocol_config())?;
        let mixture_eval = |fed: &Federation, this: &Self| this.evaluate_all(&fed.weight_matrix(), &fed.models());
        for _ in 0..self.cfg.rounds {
            let trace = fed.step()?;
            let f = &fed;
            self.record_round(trace.round, trace.weights, trace.weighted_loss, trace.comm, |this| {
                mixture_eval(f, this)
            })?;
        }
        let last = mixture_eval(&fed, self)?;
        self.finish(last);
        Ok(())
    }

    fn own_losses(&self, models: &[&ParamVector]) -> Result<Vec<f64>> {
        self.nodes
            .iter()
            .zip(models)
            .map(|(n, p)| n.spec.batch_loss(p, self.train.loss_fn, self.train.reduction, n.train.samples()))
            .collect()
    }

    fn identity(&self) -> Vec<Vec<f64>> {
        let k = self.nodes.len();
        (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    fn own_models_eval(&self) -> Result<Vec<f64>> {
        let models: Vec<_> = self.nodes.iter().map(|n| (&n.spec, &n.params)).collect();
        self.evaluate_all(&self.identity(), &models)
    }

    fn run_local(&mut self) -> Result<()> {
        for round in 1..=self.cfg.rounds {
            let comm = local_round(&mut self.nodes, &self.train, round)?;
            let losses = self.own_losses(&self.nodes.iter().map(|n| &n.params).collect::<Vec<_>>())?;
            self.record_round(round, self.identity(), losses, comm, Self::own_models_eval)?;
        }
        let last = self.own_models_eval()?;
        self.finish(last);
        Ok(())
    }

    /// The exported weight row of every client is `n_j / n`, the share of
    /// each client in the global average.
    fn run_fedavg(&mut self, fine_tune_after: bool) -> Result<()> {
        let counts: Vec<usize> = self.nodes.iter().map(|n| n.train.len()).collect();
        let n: usize = counts.iter().sum();
        let share: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let k = self.nodes.len();
        let mut global = self.nodes[0].params.clone();
        let spec = self.task.spec.clone();
        let global_eval = |this: &Self, g: &ParamVector| {
            let models = vec![(&spec, g)];
            this.evaluate_all(&vec![vec![1.0]; k], &models)
        };
        for round in 1..=self.cfg.rounds {
            let comm = fedavg_round(&mut global, &mut self.nodes, &self.train, round)?;
            let losses = self.own_losses(&vec![&global; k])?;
            let g = &global;
            self.record_round(round, vec![share.clone(); k], losses, comm, |this| global_eval(this, g))?;
        }
        let last = if fine_tune_after {
            fine_tune(
                &global,
                &mut self.nodes,
                &self.train,
                self.cfg.fine_tune_epochs,
                self.cfg.rounds + 1,
            )?;
            self.own_models_eval()?
        } else {
            global_eval(self, &global)?
        };
        self.finish(last);
        Ok(())
    }

    /// All-to-all EM with a plain gradient M-step at rate `optimizer.eta`.
    fn run_reference_em(&mut self) -> Result<()> {
        let k = self.nodes.len();
        let params = self.nodes.iter().map(|n| n.params.clone()).collect();
        let mut state = GlobalState::new(self.task.spec.clone(), params);
        let datasets: Vec<Dataset> = self.nodes.iter().map(|n| n.train.clone()).collect();
        let refs: Vec<&Dataset> = datasets.iter().collect();
        let loss = EmLoss {
            loss_fn: self.train.loss_fn,
            reduction: self.train.reduction,
        };
        let d = state.spec.num_params() as u64 * 8;
        let pair_bytes = (k * (k - 1)) as u64 * d;
        let mut w = vec![vec![1.0 / k as f64; k]; k];
        for round in 1..=self.cfg.rounds {
            let losses = state.loss_matrix(&refs, loss)?;
            w = em_iteration(&mut state, &refs, PhiStep::Gradient { eta: self.train.optimizer.eta }, loss)?;
            let weighted = w
                .iter()
                .zip(&losses)
                .map(|(wr, lr)| wr.iter().zip(lr).map(|(a, b)| a * b).sum())
                .collect();
            let comm = CommStats {
                model_bytes: pair_bytes,
                gradient_bytes: pair_bytes,
                all_to_all_bytes: 2 * pair_bytes,
            };
            let (st, wm) = (&state, &w);
            self.record_round(round, w.clone(), weighted, comm, |this| {
                let models: Vec<_> = st.params.iter().map(|p| (&st.spec, p)).collect();
                this.evaluate_all(wm, &models)
            })?;
        }
        let models: Vec<_> = state.params.iter().map(|p| (&state.spec, p)).collect();
        let last = self.evaluate_all(&w, &models)?;
        self.finish(last);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Recipe;

    fn small(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.recipe = Recipe::Sine;
        cfg.method = method;
        cfg.clients = 4;
        cfg.rounds = 6;
        cfg.eval_every = 3;
        cfg.data.n_per_client = 20;
        cfg
    }

    #[test]
    fn every_method_produces_full_traces() {
        for m in [
            Method::Federico,
            Method::LocalOnly,
            Method::Fedavg,
            Method::FedavgPlus,
            Method::ReferenceEm,
        ] {
            let r = run_experiment(&small(m), Some(1)).unwrap();
            assert_eq!(r.rounds, 6);
            assert_eq!(r.weights.len(), 6);
            assert_eq!(r.loss_trace.len(), 6);
            assert_eq!(r.comm.len(), 6);
            assert_eq!(r.metric_history.len(), 2);
            assert_eq!(r.final_metric.len(), 4);
            for row in r.weights.iter().flatten() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{m:?}");
            }
        }
    }

    #[test]
    fn zero_rounds_evaluates_the_initial_state() {
        let mut cfg = small(Method::Federico);
        cfg.rounds = 0;
        let r = run_experiment(&cfg, Some(1)).unwrap();
        assert!(r.weights.is_empty());
        assert_eq!(r.final_metric.len(), 4);
    }

    #[test]
    fn weighted_mean_with_equal_counts_is_plain_mean() {
        assert_eq!(weighted_mean(&[0.5, 1.0, 0.0], &[7, 7, 7]), 0.5);
        assert_eq!(weighted_mean(&[1.0, 0.0], &[3, 1]), 0.75);
    }

    #[test]
    fn holdout_splits_training_data() {
        let mut cfg = small(Method::Federico);
        cfg.weight_holdout = Some(0.25);
        let r = run_experiment(&cfg, Some(1)).unwrap();
        assert_eq!(r.rounds, 6);
    }

    #[test]
    fn zero_workers_is_rejected() {
        assert!(run_experiment(&small(Method::Fedavg), Some(0)).is_err());
    }
}
