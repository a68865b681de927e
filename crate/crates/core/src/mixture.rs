//! Client weights: loss tracking, posterior computation and mixture prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Target};
use crate::error::{FedError, Result};
use crate::models::{ModelSpec, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackerMode {
    /// `L <- L + l`; weights become the exact EM posterior under a uniform
    /// initial prior.
    Accumulative,
    /// `L <- (1 - beta) L + beta l`
    #[default]
    Ema,
}

fn default_beta() -> f64 {
    0.6
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    #[serde(default)]
    pub mode: TrackerMode,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            mode: TrackerMode::Ema,
            beta: default_beta(),
        }
    }
}

impl TrackerConfig {
    pub fn accumulative() -> Self {
        TrackerConfig {
            mode: TrackerMode::Accumulative,
            ..Default::default()
        }
    }

    pub fn ema(beta: f64) -> Self {
        TrackerConfig {
            mode: TrackerMode::Ema,
            beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixtureError {
    #[error("non-finite loss {value} reported for client {client}")]
    NonFiniteLoss { client: usize, value: f64 },
    #[error("loss reported for unknown client {0}")]
    UnknownClient(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTracker {
    pub mode: TrackerMode,
    pub beta: f64,
    /// Tracked totals `L_ij` (accumulative) or `L̂_ij` (EMA).
    pub values: Vec<f64>,
    /// Most recent raw loss per client, reused while a client is not sampled.
    pub last_observed: Vec<f64>,
}

impl LossTracker {
    pub fn new(k: usize, cfg: TrackerConfig) -> Self {
        LossTracker {
            mode: cfg.mode,
            beta: cfg.beta,
            values: vec![0.0; k],
            last_observed: vec![0.0; k],
        }
    }

    fn blend(&mut self) {
        for (v, l) in self.values.iter_mut().zip(&self.last_observed) {
            *v = match self.mode {
                TrackerMode::Accumulative => *v + l,
                TrackerMode::Ema => (1.0 - self.beta) * *v + self.beta * l,
            };
        }
    }
}

/// One client's row of mixture weights together with its loss tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureState {
    pub weights: Vec<f64>,
    pub prior: Vec<f64>,
    pub tracker: LossTracker,
}

impl MixtureState {
    /// Uniform weights, zero tracked losses.
    pub fn new(k: usize, cfg: TrackerConfig) -> Self {
        let uniform = vec![1.0 / k as f64; k];
        MixtureState {
            weights: uniform.clone(),
            prior: uniform,
            tracker: LossTracker::new(k, cfg),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Records this round's observed losses, blends every tracked entry
    /// (unobserved ones reuse their last loss) and recomputes the weights.
    pub fn observe_losses(&self, observed: &[(usize, f64)]) -> Result<MixtureState, MixtureError> {
        let mut next = self.clone();
        for &(client, value) in observed {
            if client >= next.len() {
                return Err(MixtureError::UnknownClient(client));
            }
            if !value.is_finite() {
                return Err(MixtureError::NonFiniteLoss { client, value });
            }
            next.tracker.last_observed[client] = value;
        }
        next.tracker.blend();
        next.weights = softmax_neg(&next.tracker.values);
        next.prior = next.weights.clone();
        Ok(next)
    }
}

/// `softmax(-values)` with the minimum subtracted first.
pub fn softmax_neg(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.iter().map(|v| (min - v).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Posterior `w_j ∝ prior_j * exp(-loss_j)`, computed in the log domain.
/// Entries with zero prior stay exactly zero.
pub fn posterior_from_scratch(prior: &[f64], losses: &[f64]) -> Result<Vec<f64>> {
    if prior.len() != losses.len() {
        return Err(FedError::Dimension(format!(
            "prior has {} entries, losses {}",
            prior.len(),
            losses.len()
        )));
    }
    let logits: Vec<f64> = prior
        .iter()
        .zip(losses)
        .map(|(&p, &l)| if p > 0.0 { p.ln() - l } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // Every supported entry has infinite loss; fall back to the prior.
        let total: f64 = prior.iter().sum();
        return Ok(prior.iter().map(|p| p / total).collect());
    }
    let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Convex combination `Σ_j w_j h_j(x)`; zero-weight models are skipped.
pub fn mixture_predict(weights: &[f64], models: &[(&ModelSpec, &ParamVector)], x: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != models.len() {
        return Err(FedError::Dimension(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    let out_dim = models
        .first()
        .map(|(spec, _)| spec.output_dim())
        .ok_or_else(|| FedError::Dimension("empty mixture".into()))?;
    let mut out = vec![0.0; out_dim];
    for (&w, (spec, params)) in weights.iter().zip(models) {
        if w == 0.0 {
            continue;
        }
        let y = spec.predict(params, x)?;
        if y.len() != out_dim {
            return Err(FedError::Dimension("mixture components disagree on output size".into()));
        }
        for (o, v) in out.iter_mut().zip(y) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mse,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of argmax predictions or mean squared error of the mixture.
pub fn evaluate(
    weights: &[f64],
    models: &[(&ModelSpec, &ParamVector)],
    test: &Dataset,
    metric: Metric,
) -> Result<f64> {
    if test.is_empty() {
        return Err(FedError::Data("cannot evaluate on an empty test set".into()));
    }
    let mut total = 0.0;
    for sample in test.samples() {
        let y_hat = mixture_predict(weights, models, &sample.x)?;
        total += match (metric, sample.y) {
            (Metric::Accuracy, Target::Class(c)) => f64::from(u8::from(argmax(&y_hat) == c)),
            (Metric::Accuracy, Target::Value(_)) => {
                return Err(FedError::config("metric", "accuracy needs class targets"))
            }
            (Metric::Mse, Target::Value(v)) => y_hat.iter().map(|p| (p - v) * (p - v)).sum(),
            (Metric::Mse, Target::Class(c)) => y_hat
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let t = if k == c { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum(),
        };
    }
    Ok(total / test.len() as f64)
}
