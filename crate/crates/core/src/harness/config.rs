//! JSON experiment configuration.
//!
//! Every field has a default, so `{}` (or an empty file) is a valid config.
//! Unknown keys are rejected. Shorthand aliases are accepted for the common
//! symbols: `K`, `G`, `T` and `sampler.M`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::mixture::TrackerConfig;
use crate::models::{LossReduction, ModelSpec};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::protocol::{SamplerConfig, SelfLoss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Sine,
    #[default]
    Clusters,
    CsvPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Federico,
    LocalOnly,
    Fedavg,
    FedavgPlus,
    ReferenceEm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Federico => "federico",
            Method::LocalOnly => "local_only",
            Method::Fedavg => "fedavg",
            Method::FedavgPlus => "fedavg_plus",
            Method::ReferenceEm => "reference_em",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| FedError::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    #[default]
    Labels,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_per_client: usize,
    /// Sine recipe only.
    pub noise_std: f64,
    /// Clusters recipe only.
    pub dims: usize,
    pub classes_per_dist: usize,
    pub sep: f64,
    /// CSV pool recipe only.
    pub csv_path: Option<PathBuf>,
    pub partition: Partition,
    pub alpha: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_per_client: 50,
            noise_std: 0.1,
            dims: 8,
            classes_per_dist: 2,
            sep: 2.0,
            csv_path: None,
            partition: Partition::Labels,
            alpha: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub method: Method,
    #[serde(alias = "K")]
    pub clients: usize,
    #[serde(alias = "G")]
    pub groups: usize,
    #[serde(alias = "T")]
    pub rounds: usize,
    pub sampler: SamplerConfig,
    pub tracker: TrackerConfig,
    pub self_loss: SelfLoss,
    pub optimizer: OptimizerConfig,
    pub loss_reduction: LossReduction,
    pub local_steps: usize,
    pub batch_size: Option<usize>,
    pub fine_tune_epochs: usize,
    /// Fraction of each client's training data reserved for the weight losses.
    pub weight_holdout: Option<f64>,
    /// Seed for model initialization and sampling.
    pub seed: u64,
    /// Seed for data generation and splitting; follows `seed` when absent.
    pub data_seed: Option<u64>,
    pub eval_every: usize,
    pub output_dir: PathBuf,
    /// Overrides the recipe's default model.
    pub model: Option<ModelSpec>,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recipe: Recipe::default(),
            method: Method::default(),
            clients: 8,
            groups: 4,
            rounds: 150,
            sampler: SamplerConfig::default(),
            tracker: TrackerConfig::default(),
            self_loss: SelfLoss::default(),
            optimizer: OptimizerConfig::default(),
            loss_reduction: LossReduction::Sum,
            local_steps: 1,
            batch_size: None,
            fine_tune_epochs: 1,
            weight_holdout: None,
            seed: 0,
            data_seed: None,
            eval_every: 10,
            output_dir: PathBuf::from("runs"),
            model: None,
            data: DataConfig::default(),
        }
    }
}

fn check(ok: bool, key: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(FedError::config(key, message))
    }
}

impl ExperimentConfig {
    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.clients >= 2, "clients", "need at least 2 clients")?;
        match self.recipe {
            Recipe::Sine => {}
            Recipe::Clusters => check(
                self.groups >= 2 && self.groups <= self.clients,
                "groups",
                "clusters recipe needs 2 <= groups <= clients",
            )?,
            Recipe::CsvPool => check(
                self.groups >= 1 && self.groups <= self.clients,
                "groups",
                "need 1 <= groups <= clients",
            )?,
        }
        let eps = self.sampler.epsilon;
        check((0.0..=1.0).contains(&eps), "sampler.epsilon", format!("{eps} is outside [0, 1]"))?;
        let m = self.sampler.neighbors;
        check(
            m >= 1 && m < self.clients,
            "sampler.neighbors",
            format!("{m} is outside [1, {}]", self.clients - 1),
        )?;
        let beta = self.tracker.beta;
        check((0.0..1.0).contains(&beta), "tracker.beta", format!("{beta} is outside [0, 1)"))?;
        let opt = &self.optimizer;
        check(opt.eta > 0.0 && opt.eta.is_finite(), "optimizer.eta", "must be positive and finite")?;
        if opt.kind == OptimizerKind::Adam {
            check((0.0..1.0).contains(&opt.beta1), "optimizer.beta1", "must lie in [0, 1)")?;
            check((0.0..1.0).contains(&opt.beta2), "optimizer.beta2", "must lie in [0, 1)")?;
            check(opt.eps > 0.0, "optimizer.eps", "must be positive")?;
        }
        check(self.local_steps >= 1, "local_steps", "must be at least 1")?;
        check(self.batch_size != Some(0), "batch_size", "must be positive")?;
        check(self.fine_tune_epochs >= 1, "fine_tune_epochs", "must be at least 1")?;
        check(self.eval_every >= 1, "eval_every", "must be at least 1")?;
        if let Some(h) = self.weight_holdout {
            check(h > 0.0 && h < 1.0, "weight_holdout", "must lie in (0, 1)")?;
        }
        let d = &self.data;
        match self.recipe {
            Recipe::Sine => {
                check(d.n_per_client >= 4, "data.n_per_client", "must be at least 4")?;
                check(d.noise_std >= 0.0 && d.noise_std.is_finite(), "data.noise_std", "must be finite and non-negative")?;
            }
            Recipe::Clusters => {
                check(d.n_per_client >= 2, "data.n_per_client", "must be at least 2")?;
                check(d.dims >= 1, "data.dims", "must be positive")?;
                check(d.classes_per_dist >= 1, "data.classes_per_dist", "must be positive")?;
                check(d.sep > 0.0 && d.sep.is_finite(), "data.sep", "must be positive and finite")?;
            }
            Recipe::CsvPool => {
                check(d.csv_path.is_some(), "data.csv_path", "required by the csv_pool recipe")?;
                check(d.alpha > 0.0 && d.alpha.is_finite(), "data.alpha", "must be positive and finite")?;
            }
        }
        if let Some(model) = &self.model {
            model.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            FedError::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Returns a copy with the dotted `key` set to `raw`, which is read as
    /// JSON when possible and as a string otherwise.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let parsed: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            let part = match part {
                "K" => "clients",
                "G" => "groups",
                "T" => "rounds",
                "M" => "neighbors",
                other => other,
            };
            let obj = match slot {
                serde_json::Value::Object(map) => map,
                serde_json::Value::Null => {
                    *slot = serde_json::Value::Object(Default::default());
                    slot.as_object_mut().expect("just created")
                }
                _ => return Err(FedError::config(key, "cannot descend into a non-object value")),
            };
            slot = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
        }
        *slot = parsed;
        Self::from_json(&value.to_string())
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    ExperimentConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::TrackerMode;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = ExperimentConfig::from_json("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.sampler.neighbors, 3);
        assert_eq!(cfg.sampler.epsilon, 0.3);
        assert_eq!(cfg.tracker.beta, 0.6);
        assert_eq!(cfg.tracker.mode, TrackerMode::Ema);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(cfg.optimizer.eta, 0.01);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn out_of_range_epsilon_names_the_key() {
        let err = ExperimentConfig::from_json(r#"{"sampler": {"epsilon": 1.5}}"#).unwrap_err();
        match err {
            FedError::Config { key, .. } => assert_eq!(key, "sampler.epsilon"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"sampler": {"eps": 0.1}}"#).unwrap_err();
        assert!(matches!(err, FedError::Config { ref key, .. } if key.starts_with("sampler")), "{err}");
        let err = ExperimentConfig::from_json(r#"{"rounds": "many"}"#).unwrap_err();
        assert!(matches!(err, FedError::Config { ref key, .. } if key == "rounds"), "{err}");
        assert!(ExperimentConfig::from_json(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut custom = cfg.clone();
        custom.recipe = Recipe::Sine;
        custom.batch_size = Some(8);
        custom.model = Some(ModelSpec::LinearRegression {
            input_dim: 1,
            output_dim: 1,
        });
        assert_eq!(ExperimentConfig::from_json(&custom.to_json()).unwrap(), custom);
    }

    #[test]
    fn shorthand_aliases() {
        let cfg = ExperimentConfig::from_json(r#"{"K": 6, "G": 3, "T": 20, "sampler": {"M": 2}}"#).unwrap();
        assert_eq!((cfg.clients, cfg.groups, cfg.rounds, cfg.sampler.neighbors), (6, 3, 20, 2));
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.with_override("sampler.epsilon", "1.0").unwrap().sampler.epsilon, 1.0);
        assert_eq!(cfg.with_override("sampler.M", "5").unwrap().sampler.neighbors, 5);
        assert_eq!(cfg.with_override("T", "7").unwrap().rounds, 7);
        assert_eq!(cfg.with_override("tracker.mode", "accumulative").unwrap().tracker.mode, TrackerMode::Accumulative);
        assert_eq!(cfg.with_override("data_seed", "12").unwrap().data_seed, Some(12));
        assert!(cfg.with_override("sampler.epsilon", "2").is_err());
        assert!(cfg.with_override("sampler.nope", "2").is_err());
    }

    #[test]
    fn validation_catches_inconsistent_values() {
        assert!(ExperimentConfig::from_json(r#"{"K": 4, "sampler": {"M": 4}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"tracker": {"beta": 1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"optimizer": {"kind": "sgd", "eta": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"recipe": "csv_pool"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"weight_holdout": 1.0}"#).is_err());
    }
}
