//! Simulator for decentralized personalized federated learning. Each client
//! keeps a posterior over which peers' models explain its data, exchanges
//! models and weighted gradients with a few sampled neighbors per round, and
//! predicts with a mixture of peer models.

pub mod baselines;
pub mod data;
pub mod em_reference;
pub mod error;
pub mod harness;
pub mod mixture;
pub mod models;
pub mod optim;
pub mod protocol;
pub mod rng;

pub use error::{FedError, Result};
pub use harness::config::{parse_config, ExperimentConfig, Method, Recipe};
pub use harness::experiment::{run_experiment, ExperimentResult};
pub use mixture::{MixtureState, TrackerConfig, TrackerMode};
pub use models::{LossFn, ModelSpec, ParamVector};
pub use protocol::{ClientNode, Federation, ProtocolConfig, SamplerConfig, SelfLoss};
