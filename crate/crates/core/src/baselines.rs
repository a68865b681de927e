//! Reference methods: local-only training, FedAvg and FedAvg with local
//! fine-tuning. They run on the same [`ClientNode`]s as the protocol so a
//! comparison shares data splits and initial parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::models::ParamVector;
use crate::protocol::{ClientNode, CommStats, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    LocalOnly,
    Fedavg,
    FedavgPlus { fine_tune_epochs: usize },
}

/// `steps` optimizer steps of `node` on its own data.
fn local_steps(node: &mut ClientNode, cfg: &TrainConfig, steps: usize, round: usize) -> Result<()> {
    for _ in 0..steps {
        let spec = node.spec.clone();
        let params = node.params.clone();
        let batch = node.draw_batch(cfg.batch_size);
        let g = spec.batch_grad(&params, cfg.loss_fn, cfg.reduction, &batch)?;
        drop(batch);
        node.params = node
            .opt
            .step(&node.params, &g, cfg.optimizer.eta)
            .map_err(|_| FedError::NumericFailure {
                round,
                client: node.id,
                detail: "non-finite local update".into(),
            })?;
    }
    Ok(())
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

/// One round of local-only training: no bytes leave any client.
pub fn local_round(nodes: &mut [ClientNode], cfg: &TrainConfig, round: usize) -> Result<CommStats> {
    cfg.validate()?;
    first_error(
        nodes
            .par_iter_mut()
            .map(|node| local_steps(node, cfg, cfg.local_steps, round))
            .collect(),
    )?;
    Ok(CommStats::default())
}

/// `Σ_i (n_i / n) φ_i`, accumulated in slice order.
pub fn weighted_average(models: &[&ParamVector], counts: &[usize]) -> ParamVector {
    let n: usize = counts.iter().sum();
    let mut avg = ParamVector::zeros(models[0].len());
    for (m, &c) in models.iter().zip(counts) {
        avg.add_scaled(m, c as f64 / n as f64);
    }
    avg
}

/// One FedAvg round: broadcast `global`, run local steps on every client,
/// replace `global` with the sample-weighted average.
pub fn fedavg_round(
    global: &mut ParamVector,
    nodes: &mut [ClientNode],
    cfg: &TrainConfig,
    round: usize,
) -> Result<CommStats> {
    cfg.validate()?;
    first_error(
        nodes
            .par_iter_mut()
            .map(|node| {
                node.params = global.clone();
                local_steps(node, cfg, cfg.local_steps, round)
            })
            .collect(),
    )?;
    let models: Vec<&ParamVector> = nodes.iter().map(|n| &n.params).collect();
    let counts: Vec<usize> = nodes.iter().map(|n| n.train.len()).collect();
    *global = weighted_average(&models, &counts);
    let bytes = nodes.len() as u64 * global.wire_bytes();
    Ok(CommStats {
        model_bytes: bytes,
        gradient_bytes: bytes,
        all_to_all_bytes: 0,
    })
}

/// Each client starts from `global` with a fresh optimizer and trains
/// `epochs` full passes locally.
pub fn fine_tune(
    global: &ParamVector,
    nodes: &mut [ClientNode],
    cfg: &TrainConfig,
    epochs: usize,
    round: usize,
) -> Result<()> {
    if epochs == 0 {
        return Err(FedError::config("fine_tune_epochs", "must be at least 1"));
    }
    first_error(
        nodes
            .par_iter_mut()
            .map(|node| {
                node.params = global.clone();
                node.opt = cfg.optimizer.new_state(node.params.len());
                local_steps(node, cfg, epochs, round)
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutcome {
    /// Model each client predicts with at the end.
    pub models: Vec<ParamVector>,
    pub comm: Vec<CommStats>,
}

pub fn run_local(nodes: &mut [ClientNode], rounds: usize, cfg: &TrainConfig) -> Result<BaselineOutcome> {
    let comm = (1..=rounds)
        .map(|r| local_round(nodes, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineOutcome {
        models: nodes.iter().map(|n| n.params.clone()).collect(),
        comm,
    })
}

/// The initial global model is client 0's initialization.
pub fn run_fedavg(nodes: &mut [ClientNode], rounds: usize, cfg: &TrainConfig) -> Result<BaselineOutcome> {
    let mut global = nodes
        .first()
        .map(|n| n.params.clone())
        .ok_or_else(|| FedError::config("clients", "need at least one client"))?;
    let comm = (1..=rounds)
        .map(|r| fedavg_round(&mut global, nodes, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineOutcome {
        models: vec![global; nodes.len()],
        comm,
    })
}

pub fn run_fedavg_plus(
    nodes: &mut [ClientNode],
    rounds: usize,
    cfg: &TrainConfig,
    fine_tune_epochs: usize,
) -> Result<BaselineOutcome> {
    let fed = run_fedavg(nodes, rounds, cfg)?;
    fine_tune(&fed.models[0], nodes, cfg, fine_tune_epochs, rounds + 1)?;
    Ok(BaselineOutcome {
        models: nodes.iter().map(|n| n.params.clone()).collect(),
        comm: fed.comm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Sample, Target};
    use crate::mixture::TrackerConfig;
    use crate::models::{LossFn, LossReduction, ModelSpec};
    use crate::optim::OptimizerConfig;

    fn train_cfg(opt: OptimizerConfig) -> TrainConfig {
        TrainConfig {
            optimizer: opt,
            loss_fn: LossFn::Mse,
            reduction: LossReduction::Sum,
            local_steps: 1,
            batch_size: None,
        }
    }

    fn nodes(datasets: Vec<Dataset>, opt: &OptimizerConfig) -> Vec<ClientNode> {
        let k = datasets.len();
        let spec = ModelSpec::LinearRegression {
            input_dim: 1,
            output_dim: 1,
        };
        datasets
            .into_iter()
            .enumerate()
            .map(|(i, d)| ClientNode::new(i, k, spec.clone(), d, TrackerConfig::default(), opt, 5))
            .collect()
    }

    fn line(slope: f64, n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|s| Sample {
                    x: vec![s as f64 / n as f64],
                    y: Target::Value(slope * s as f64 / n as f64),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn averaging_is_weighted_and_order_free() {
        let a = ParamVector::new(vec![1.0, 5.0]);
        let b = ParamVector::new(vec![3.0, 7.0]);
        assert_eq!(weighted_average(&[&a, &b], &[4, 4]), ParamVector::new(vec![2.0, 6.0]));
        let c = ParamVector::new(vec![-0.3, 0.7]);
        let fwd = weighted_average(&[&a, &b, &c], &[3, 5, 9]);
        let rev = weighted_average(&[&c, &b, &a], &[9, 5, 3]);
        for (x, y) in fwd.iter().zip(rev.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_fedavg_equals_local() {
        let opt = OptimizerConfig::adam(0.05);
        let cfg = train_cfg(opt);
        let mut a = nodes(vec![line(2.0, 10)], &opt);
        let mut b = a.clone();
        let local = run_local(&mut a, 30, &cfg).unwrap();
        let fed = run_fedavg(&mut b, 30, &cfg).unwrap();
        assert_eq!(local.models, fed.models);
    }

    #[test]
    fn homogeneous_fedavg_tracks_local_training() {
        let opt = OptimizerConfig::sgd(0.01);
        let cfg = train_cfg(opt);
        let mut fed_nodes = nodes(vec![line(2.0, 10), line(2.0, 10), line(2.0, 10)], &opt);
        let mut solo = vec![fed_nodes[0].clone()];
        solo[0].id = 0;
        let fed = run_fedavg(&mut fed_nodes, 25, &cfg).unwrap();
        let local = run_local(&mut solo, 25, &cfg).unwrap();
        for (x, y) in fed.models[0].iter().zip(local.models[0].iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn local_training_sends_nothing_and_fedavg_sends_two_models_per_client() {
        let opt = OptimizerConfig::adam(0.01);
        let cfg = train_cfg(opt);
        let mut n = nodes(vec![line(1.0, 5), line(-1.0, 5)], &opt);
        let local = run_local(&mut n.clone(), 3, &cfg).unwrap();
        assert!(local.comm.iter().all(|c| c.total() == 0));
        let fed = run_fedavg(&mut n, 3, &cfg).unwrap();
        assert!(fed.comm.iter().all(|c| c.total() == 2 * 2 * 16));
    }

    #[test]
    fn fine_tuning_with_zero_rate_keeps_the_global_model() {
        let opt = OptimizerConfig::adam(0.05);
        let mut n = nodes(vec![line(1.0, 8), line(-1.0, 8)], &opt);
        let cfg = train_cfg(opt);
        let fed = run_fedavg(&mut n.clone(), 10, &cfg).unwrap();
        let mut frozen = cfg.clone();
        let plus = {
            let fed_again = run_fedavg(&mut n, 10, &cfg).unwrap();
            frozen.optimizer.eta = 0.0;
            fine_tune(&fed_again.models[0], &mut n, &frozen, 1, 11).unwrap();
            n.iter().map(|c| c.params.clone()).collect::<Vec<_>>()
        };
        assert_eq!(plus, fed.models);
        assert!(fine_tune(&fed.models[0], &mut n, &cfg, 0, 11).is_err());
    }
}
