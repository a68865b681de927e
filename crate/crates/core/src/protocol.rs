//! Decentralized round engine.
//!
//! One round, for every client `i` in parallel:
//!
//! 1. sample `M` neighbors ε-greedily from the current weights;
//! 2. every sampled client sends its model to `i`;
//! 3. `i` evaluates the received models (and its own) on its local data,
//!    updates the loss tracker and recomputes its weights;
//! 4. `i` sends back `g = w_ib * ∇ loss_i(φ_b)` to each sampled `b`;
//! 5. every client applies the sum of the gradients it received, plus its
//!    own self-weighted gradient, with its optimizer.
//!
//! All cross-client data flows through [`Transport`]. Each client owns its
//! random stream and aggregation is ordered by sender id, so the outcome does
//! not depend on how many worker threads run the round.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{FedError, Result};
use crate::mixture::{MixtureError, MixtureState, TrackerConfig};
use crate::models::{LossFn, LossReduction, ModelSpec, ParamVector};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::{stream, Purpose};

fn default_neighbors() -> usize {
    3
}
fn default_epsilon() -> f64 {
    0.3
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Neighbors sampled per round (`M`).
    #[serde(default = "default_neighbors", alias = "M")]
    pub neighbors: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            neighbors: default_neighbors(),
            epsilon: default_epsilon(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(FedError::config("sampler.epsilon", format!("{} is outside [0, 1]", self.epsilon)));
        }
        if self.neighbors == 0 || self.neighbors + 1 > clients {
            return Err(FedError::config(
                "sampler.neighbors",
                format!("{} neighbors is outside [1, {}]", self.neighbors, clients.saturating_sub(1)),
            ));
        }
        Ok(())
    }
}

/// ε-greedy selection of distinct neighbors, excluding `self_id`.
///
/// Each slot explores uniformly among the remaining clients with probability
/// `epsilon`, otherwise takes the remaining client with the highest weight
/// (lowest id on ties). Returned ids are sorted.
pub fn sample_neighbors<R: Rng + ?Sized>(
    weights: &[f64],
    self_id: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).filter(|&j| j != self_id).collect();
    if cfg.neighbors >= remaining.len() {
        return remaining;
    }
    let mut chosen = Vec::with_capacity(cfg.neighbors);
    for _ in 0..cfg.neighbors {
        let pos = if rng.random::<f64>() < cfg.epsilon {
            rng.random_range(0..remaining.len())
        } else {
            let mut best = 0;
            for (p, &j) in remaining.iter().enumerate() {
                if weights[j] > weights[remaining[best]] {
                    best = p;
                }
            }
            best
        };
        chosen.push(remaining.remove(pos));
    }
    chosen.sort_unstable();
    chosen
}

/// Local optimization settings shared by the protocol and the baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub loss_fn: LossFn,
    pub reduction: LossReduction,
    /// Gradient steps per round.
    pub local_steps: usize,
    /// Mini-batch size for gradients; `None` uses the full local set.
    pub batch_size: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(FedError::config("local_steps", "must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(FedError::config("batch_size", "must be positive"));
        }
        if !(self.optimizer.eta >= 0.0 && self.optimizer.eta.is_finite()) {
            return Err(FedError::config("optimizer.eta", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// How a client's own model enters its loss tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfLoss {
    /// The own model is scored on local data every round, like a sampled peer.
    #[default]
    Refresh,
    /// The own model is never scored; its tracked loss keeps its initial 0.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub sampler: SamplerConfig,
    pub tracker: TrackerConfig,
    pub self_loss: SelfLoss,
    /// The weights stay fixed across the `local_steps` exchanges of a round.
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ModelPayload,
    GradientPayload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMessage {
    pub kind: MessageKind,
    pub from: usize,
    pub to: usize,
    pub round: usize,
    pub body: ParamVector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub model_bytes: u64,
    pub gradient_bytes: u64,
    /// What the same round would cost with every client talking to every other.
    pub all_to_all_bytes: u64,
}

impl CommStats {
    pub fn total(&self) -> u64 {
        self.model_bytes + self.gradient_bytes
    }
}

#[derive(Default)]
struct TransportInner {
    queues: BTreeMap<(usize, usize), Vec<RoundMessage>>,
    bytes: BTreeMap<usize, CommStats>,
}

/// Lossless in-memory network keyed by `(recipient, round)`.
#[derive(Default)]
pub struct Transport {
    inner: Mutex<TransportInner>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&self, msg: RoundMessage) {
        let mut inner = self.inner.lock().expect("transport lock poisoned");
        let stats = inner.bytes.entry(msg.round).or_default();
        match msg.kind {
            MessageKind::ModelPayload => stats.model_bytes += msg.body.wire_bytes(),
            MessageKind::GradientPayload => stats.gradient_bytes += msg.body.wire_bytes(),
        }
        inner.queues.entry((msg.to, msg.round)).or_default().push(msg);
    }

    /// Removes and returns every message of `kind` for `to` in `round`,
    /// ordered by sender.
    pub fn take(&self, to: usize, round: usize, kind: MessageKind) -> Vec<RoundMessage> {
        let mut inner = self.inner.lock().expect("transport lock poisoned");
        let Some(queue) = inner.queues.get_mut(&(to, round)) else {
            return Vec::new();
        };
        let (mut taken, kept): (Vec<_>, Vec<_>) = queue.drain(..).partition(|m| m.kind == kind);
        *queue = kept;
        if queue.is_empty() {
            inner.queues.remove(&(to, round));
        }
        taken.sort_by_key(|m| m.from);
        taken
    }

    /// Messages sent in `round` that nobody has taken yet.
    pub fn pending(&self, round: usize) -> usize {
        let inner = self.inner.lock().expect("transport lock poisoned");
        inner
            .queues
            .iter()
            .filter(|((_, r), _)| *r == round)
            .map(|(_, q)| q.len())
            .sum()
    }

    pub fn round_bytes(&self, round: usize) -> CommStats {
        let inner = self.inner.lock().expect("transport lock poisoned");
        inner.bytes.get(&round).copied().unwrap_or_default()
    }
}

/// One simulated participant.
#[derive(Clone, Debug)]
pub struct ClientNode {
    pub id: usize,
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub mixture: MixtureState,
    pub opt: OptimizerState,
    /// Data used for gradients.
    pub train: Dataset,
    /// Optional held-out data used for the weight losses instead of `train`.
    pub holdout: Option<Dataset>,
    rng: ChaCha8Rng,
}

impl ClientNode {
    /// Initial parameters and the protocol stream both derive from
    /// `(seed, id)` only.
    pub fn new(
        id: usize,
        clients: usize,
        spec: ModelSpec,
        train: Dataset,
        tracker: TrackerConfig,
        optimizer: &OptimizerConfig,
        seed: u64,
    ) -> Self {
        let params = spec.init_params(&mut stream(seed, Purpose::Init, id as u64));
        ClientNode {
            id,
            opt: optimizer.new_state(spec.num_params()),
            spec,
            params,
            mixture: MixtureState::new(clients, tracker),
            train,
            holdout: None,
            rng: stream(seed, Purpose::Protocol, id as u64),
        }
    }

    pub fn with_holdout(mut self, holdout: Dataset) -> Self {
        self.holdout = Some(holdout);
        self
    }

    pub fn weight_data(&self) -> &Dataset {
        self.holdout.as_ref().unwrap_or(&self.train)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Full training set, or a fresh mini-batch drawn without replacement.
    pub fn draw_batch(&mut self, batch_size: Option<usize>) -> Cow<'_, [Sample]> {
        match batch_size {
            Some(b) if b < self.train.len() => {
                let mut idx = index::sample(&mut self.rng, self.train.len(), b).into_vec();
                idx.sort_unstable();
                Cow::Owned(idx.into_iter().map(|i| self.train.samples()[i].clone()).collect())
            }
            _ => Cow::Borrowed(self.train.samples()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    /// `weights[i][j]` after this round's weight update.
    pub weights: Vec<Vec<f64>>,
    pub neighbors: Vec<Vec<usize>>,
    /// `Σ_j w_ij ℓ_ij` per client, using the tracked raw losses.
    pub weighted_loss: Vec<f64>,
    pub comm: CommStats,
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

fn send_models(nodes: &[ClientNode], requesters: &[Vec<usize>], transport: &Transport, round: usize) {
    nodes.par_iter().for_each(|owner| {
        for &to in &requesters[owner.id] {
            transport.send(RoundMessage {
                kind: MessageKind::ModelPayload,
                from: owner.id,
                to,
                round,
                body: owner.params.clone(),
            });
        }
    });
}

fn receive_models(
    node: &ClientNode,
    expected: &[usize],
    transport: &Transport,
    round: usize,
) -> Result<Vec<(usize, ParamVector)>> {
    let msgs = transport.take(node.id, round, MessageKind::ModelPayload);
    let senders: Vec<usize> = msgs.iter().map(|m| m.from).collect();
    if senders != expected {
        return Err(FedError::ProtocolIntegrity {
            round,
            detail: format!(
                "client {} expected models from {expected:?}, received {senders:?}",
                node.id
            ),
        });
    }
    Ok(msgs.into_iter().map(|m| (m.from, m.body)).collect())
}

fn validate_nodes(nodes: &[ClientNode], cfg: &ProtocolConfig) -> Result<()> {
    let k = nodes.len();
    cfg.sampler.validate(k)?;
    cfg.train.validate()?;
    for (pos, node) in nodes.iter().enumerate() {
        if node.id != pos {
            return Err(FedError::config("clients", format!("node at position {pos} has id {}", node.id)));
        }
        if node.spec != nodes[0].spec {
            return Err(FedError::config("model", "all clients must share one architecture"));
        }
        if node.mixture.len() != k {
            return Err(FedError::Dimension(format!("client {pos} tracks {} clients, expected {k}", node.mixture.len())));
        }
        if node.train.is_empty() || node.weight_data().is_empty() {
            return Err(FedError::Data(format!("client {pos} has no training data")));
        }
    }
    nodes[0].spec.check_loss(cfg.train.loss_fn)
}

/// Executes round `round` (1-based) over all nodes.
pub fn run_round(
    nodes: &mut [ClientNode],
    transport: &Transport,
    cfg: &ProtocolConfig,
    round: usize,
) -> Result<RoundTrace> {
    validate_nodes(nodes, cfg)?;
    let k = nodes.len();

    let neighbors: Vec<Vec<usize>> = nodes
        .par_iter_mut()
        .map(|node| sample_neighbors(&node.mixture.weights, node.id, &cfg.sampler, &mut node.rng))
        .collect();
    let mut requesters = vec![Vec::new(); k];
    for (i, picked) in neighbors.iter().enumerate() {
        for &j in picked {
            requesters[j].push(i);
        }
    }

    // E-step on models as they were at the start of the round.
    send_models(nodes, &requesters, transport, round);
    let received = first_error(
        nodes
            .par_iter_mut()
            .zip(&neighbors)
            .map(|(node, expected)| {
                let models = receive_models(node, expected, transport, round)?;
                let data = node.weight_data().samples();
                let mut observed = Vec::with_capacity(models.len() + 1);
                if cfg.self_loss == SelfLoss::Refresh {
                    let own = node.spec.batch_loss(&node.params, cfg.train.loss_fn, cfg.train.reduction, data)?;
                    observed.push((node.id, own));
                }
                for (j, params) in &models {
                    observed.push((*j, node.spec.batch_loss(params, cfg.train.loss_fn, cfg.train.reduction, data)?));
                }
                observed.sort_by_key(|(j, _)| *j);
                node.mixture = node.mixture.observe_losses(&observed).map_err(|e| match e {
                    MixtureError::NonFiniteLoss { client, value } => FedError::NumericFailure {
                        round,
                        client,
                        detail: format!("loss {value} of model {client} on client {}'s data", node.id),
                    },
                    MixtureError::UnknownClient(c) => FedError::Dimension(format!("unknown client {c}")),
                })?;
                Ok(models)
            })
            .collect(),
    )?;
    let mut received = received;

    // M-step: exchange weighted gradients, possibly several times.
    for step in 0..cfg.train.local_steps {
        if step > 0 {
            send_models(nodes, &requesters, transport, round);
            received = first_error(
                nodes
                    .par_iter()
                    .zip(&neighbors)
                    .map(|(node, expected)| receive_models(node, expected, transport, round))
                    .collect(),
            )?;
        }
        let own_grads = first_error(
            nodes
                .par_iter_mut()
                .zip(&received)
                .map(|(node, models)| {
                    let weights = node.mixture.weights.clone();
                    let (id, spec, own) = (node.id, node.spec.clone(), node.params.clone());
                    let batch = node.draw_batch(cfg.train.batch_size);
                    let weighted_grad = |owner: usize, params: &ParamVector| -> Result<ParamVector> {
                        let g = spec.batch_grad(params, cfg.train.loss_fn, cfg.train.reduction, &batch)?.scaled(weights[owner]);
                        if !g.is_finite() {
                            return Err(FedError::NumericFailure {
                                round,
                                client: id,
                                detail: format!("non-finite gradient for model {owner}"),
                            });
                        }
                        Ok(g)
                    };
                    for (owner, params) in models {
                        transport.send(RoundMessage {
                            kind: MessageKind::GradientPayload,
                            from: id,
                            to: *owner,
                            round,
                            body: weighted_grad(*owner, params)?,
                        });
                    }
                    weighted_grad(id, &own)
                })
                .collect(),
        )?;
        first_error(
            nodes
                .par_iter_mut()
                .zip(own_grads)
                .map(|(node, own)| {
                    let msgs = transport.take(node.id, round, MessageKind::GradientPayload);
                    let senders: Vec<usize> = msgs.iter().map(|m| m.from).collect();
                    if senders != requesters[node.id] {
                        return Err(FedError::ProtocolIntegrity {
                            round,
                            detail: format!(
                                "client {} expected gradients from {:?}, received {senders:?}",
                                node.id, requesters[node.id]
                            ),
                        });
                    }
                    let mut own = Some(own);
                    let mut update = ParamVector::zeros(node.params.len());
                    for msg in &msgs {
                        if msg.from > node.id {
                            if let Some(g) = own.take() {
                                update.add_scaled(&g, 1.0);
                            }
                        }
                        update.add_scaled(&msg.body, 1.0);
                    }
                    if let Some(g) = own.take() {
                        update.add_scaled(&g, 1.0);
                    }
                    node.params = node
                        .opt
                        .step(&node.params, &update, cfg.train.optimizer.eta)
                        .map_err(|_| FedError::NumericFailure {
                            round,
                            client: node.id,
                            detail: "non-finite model update".into(),
                        })?;
                    Ok(())
                })
                .collect(),
        )?;
    }

    let pending = transport.pending(round);
    if pending != 0 {
        return Err(FedError::ProtocolIntegrity {
            round,
            detail: format!("{pending} messages left undelivered"),
        });
    }

    let d = nodes[0].params.wire_bytes();
    let mut comm = transport.round_bytes(round);
    comm.all_to_all_bytes = 2 * (k * (k - 1)) as u64 * d * cfg.train.local_steps as u64;
    Ok(RoundTrace {
        round,
        weights: nodes.iter().map(|n| n.mixture.weights.clone()).collect(),
        neighbors,
        weighted_loss: nodes
            .iter()
            .map(|n| {
                n.mixture
                    .weights
                    .iter()
                    .zip(&n.mixture.tracker.last_observed)
                    .map(|(w, l)| w * l)
                    .sum()
            })
            .collect(),
        comm,
    })
}

/// A set of clients plus their network, advanced one round at a time.
pub struct Federation {
    pub nodes: Vec<ClientNode>,
    pub cfg: ProtocolConfig,
    transport: Transport,
    round: usize,
}

impl Federation {
    pub fn new(nodes: Vec<ClientNode>, cfg: ProtocolConfig) -> Result<Self> {
        if nodes.is_empty() {
            return Err(FedError::config("clients", "need at least one client"));
        }
        validate_nodes(&nodes, &cfg)?;
        Ok(Federation {
            nodes,
            cfg,
            transport: Transport::new(),
            round: 0,
        })
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn step(&mut self) -> Result<RoundTrace> {
        let round = self.round + 1;
        let trace = run_round(&mut self.nodes, &self.transport, &self.cfg, round)?;
        self.round = round;
        Ok(trace)
    }

    pub fn weight_matrix(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.mixture.weights.clone()).collect()
    }

    pub fn models(&self) -> Vec<(&ModelSpec, &ParamVector)> {
        self.nodes.iter().map(|n| (&n.spec, &n.params)).collect()
    }
}
