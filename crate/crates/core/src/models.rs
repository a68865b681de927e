//! Small differentiable predictors with hand-derived gradients.
//!
//! Parameters are stored as one flat [`ParamVector`] per model. For the
//! single-layer kinds the layout is `[W (output_dim x input_dim, row-major), b]`;
//! the one-hidden-layer MLP is `[W1, b1, W2, b2]` in the same convention.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Target};
use crate::error::{FedError, Result};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Flat parameter vector. The length is fixed by the owning [`ModelSpec`];
/// the slice deref deliberately exposes no way to resize it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &[f64], scale: f64) {
        debug_assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.0 {
            *v *= factor;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// Size of this vector on the wire, in bytes.
    pub fn wire_bytes(&self) -> u64 {
        (self.0.len() * std::mem::size_of::<f64>()) as u64
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the activation value.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How raw outputs (logits) are turned into predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Identity,
    Softmax,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearRegression {
        input_dim: usize,
        #[serde(default = "one")]
        output_dim: usize,
    },
    /// Multinomial logistic regression; `output_dim` is the number of classes.
    LogisticRegression { input_dim: usize, output_dim: usize },
    #[serde(rename = "mlp_1hidden")]
    Mlp1Hidden {
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        head: Head,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFn {
    /// `0.5 * ||y_hat - y||^2`
    Mse,
    /// `-ln y_hat[y]`, clamped at [`PROB_FLOOR`]
    CrossEntropy,
}

/// Whether per-sample losses and gradients are summed or averaged over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Sum,
    Mean,
}

impl LossReduction {
    pub fn factor(self, n: usize) -> f64 {
        match self {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}

struct Forward {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::LinearRegression { input_dim, .. }
            | ModelSpec::LogisticRegression { input_dim, .. }
            | ModelSpec::Mlp1Hidden { input_dim, .. } => input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            ModelSpec::LinearRegression { output_dim, .. }
            | ModelSpec::LogisticRegression { output_dim, .. }
            | ModelSpec::Mlp1Hidden { output_dim, .. } => output_dim,
        }
    }

    pub fn head(&self) -> Head {
        match *self {
            ModelSpec::LinearRegression { .. } => Head::Identity,
            ModelSpec::LogisticRegression { .. } => Head::Softmax,
            ModelSpec::Mlp1Hidden { head, .. } => head,
        }
    }

    /// Number of scalar parameters `d`.
    pub fn num_params(&self) -> usize {
        match *self {
            ModelSpec::LinearRegression {
                input_dim,
                output_dim,
            }
            | ModelSpec::LogisticRegression {
                input_dim,
                output_dim,
            } => output_dim * (input_dim + 1),
            ModelSpec::Mlp1Hidden {
                input_dim,
                hidden_dim,
                output_dim,
                ..
            } => hidden_dim * (input_dim + 1) + output_dim * (hidden_dim + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FedError::config("model", m.to_string()));
        if self.input_dim() == 0 {
            return bad("input_dim must be positive");
        }
        if self.output_dim() == 0 {
            return bad("output_dim must be positive");
        }
        if let ModelSpec::Mlp1Hidden { hidden_dim: 0, .. } = self {
            return bad("hidden_dim must be positive");
        }
        if let ModelSpec::LogisticRegression { output_dim: 1, .. } = self {
            return bad("logistic_regression needs at least 2 classes");
        }
        Ok(())
    }

    /// Checks that this model can be trained with `loss_fn`.
    pub fn check_loss(&self, loss_fn: LossFn) -> Result<()> {
        if loss_fn == LossFn::CrossEntropy && self.head() != Head::Softmax {
            return Err(FedError::config(
                "model",
                "cross_entropy needs a softmax head",
            ));
        }
        Ok(())
    }

    /// Uniform in `±1/sqrt(fan_in)` per layer, biases included.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.num_params());
        let mut layer = |fan_in: usize, count: usize, values: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..count).map(|_| rng.random_range(-bound..=bound)));
        };
        match *self {
            ModelSpec::LinearRegression {
                input_dim,
                output_dim,
            }
            | ModelSpec::LogisticRegression {
                input_dim,
                output_dim,
            } => layer(input_dim, output_dim * (input_dim + 1), &mut values),
            ModelSpec::Mlp1Hidden {
                input_dim,
                hidden_dim,
                output_dim,
                ..
            } => {
                layer(input_dim, hidden_dim * (input_dim + 1), &mut values);
                layer(hidden_dim, output_dim * (hidden_dim + 1), &mut values);
            }
        }
        ParamVector(values)
    }

    fn check_dims(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(FedError::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if x.len() != self.input_dim() {
            return Err(FedError::Dimension(format!(
                "expected input of length {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, p: &[f64], x: &[f64]) -> Forward {
        let affine = |w: &[f64], b: &[f64], input: &[f64]| -> Vec<f64> {
            let n_in = input.len();
            b.iter()
                .enumerate()
                .map(|(o, bias)| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>() + bias
                })
                .collect()
        };
        let (hidden_pre, hidden, logits) = match *self {
            ModelSpec::LinearRegression {
                input_dim,
                output_dim,
            }
            | ModelSpec::LogisticRegression {
                input_dim,
                output_dim,
            } => {
                let nw = output_dim * input_dim;
                let logits = affine(&p[..nw], &p[nw..nw + output_dim], x);
                (Vec::new(), Vec::new(), logits)
            }
            ModelSpec::Mlp1Hidden {
                input_dim,
                hidden_dim,
                output_dim,
                activation,
                ..
            } => {
                let nw1 = hidden_dim * input_dim;
                let nb1 = nw1 + hidden_dim;
                let nw2 = nb1 + output_dim * hidden_dim;
                let pre = affine(&p[..nw1], &p[nw1..nb1], x);
                let post: Vec<f64> = pre.iter().map(|&v| activation.apply(v)).collect();
                let logits = affine(&p[nb1..nw2], &p[nw2..nw2 + output_dim], &post);
                (pre, post, logits)
            }
        };
        let output = match self.head() {
            Head::Identity => logits.clone(),
            Head::Softmax => softmax(&logits),
        };
        Forward {
            hidden_pre,
            hidden,
            logits,
            output,
        }
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(params, x)?;
        Ok(self.forward(params, x).output)
    }

    /// Sum over `batch` of per-sample gradients.
    pub fn grad(&self, params: &[f64], loss_fn: LossFn, batch: &[Sample]) -> Result<ParamVector> {
        self.check_loss(loss_fn)?;
        let mut g = ParamVector::zeros(self.num_params());
        for sample in batch {
            self.check_dims(params, &sample.x)?;
            self.accumulate_grad(params, loss_fn, sample, &mut g)?;
        }
        Ok(g)
    }

    fn accumulate_grad(
        &self,
        p: &[f64],
        loss_fn: LossFn,
        sample: &Sample,
        g: &mut [f64],
    ) -> Result<()> {
        let fwd = self.forward(p, &sample.x);
        let dz = logit_grad(self.head(), loss_fn, &fwd, &sample.y)?;
        let outer = |g: &mut [f64], dz: &[f64], input: &[f64], w_off: usize, b_off: usize| {
            let n_in = input.len();
            for (o, d) in dz.iter().enumerate() {
                let row = &mut g[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (gw, v) in row.iter_mut().zip(input) {
                    *gw += d * v;
                }
                g[b_off + o] += d;
            }
        };
        match *self {
            ModelSpec::LinearRegression {
                input_dim,
                output_dim,
            }
            | ModelSpec::LogisticRegression {
                input_dim,
                output_dim,
            } => outer(g, &dz, &sample.x, 0, output_dim * input_dim),
            ModelSpec::Mlp1Hidden {
                input_dim,
                hidden_dim,
                output_dim,
                activation,
                ..
            } => {
                let nw1 = hidden_dim * input_dim;
                let nb1 = nw1 + hidden_dim;
                let nw2 = nb1 + output_dim * hidden_dim;
                outer(g, &dz, &fwd.hidden, nb1, nw2);
                let w2 = &p[nb1..nw2];
                let dpre: Vec<f64> = (0..hidden_dim)
                    .map(|h| {
                        let back: f64 = dz
                            .iter()
                            .enumerate()
                            .map(|(o, d)| w2[o * hidden_dim + h] * d)
                            .sum();
                        back * activation.derivative(fwd.hidden_pre[h], fwd.hidden[h])
                    })
                    .collect();
                outer(g, &dpre, &sample.x, 0, nw1);
            }
        }
        Ok(())
    }

    /// Sum of per-sample losses over `batch`.
    pub fn total_loss(&self, params: &[f64], loss_fn: LossFn, batch: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for sample in batch {
            let y_hat = self.predict(params, &sample.x)?;
            total += loss(loss_fn, &y_hat, &sample.y)?;
        }
        Ok(total)
    }

    /// Batch loss with the given reduction applied.
    pub fn batch_loss(
        &self,
        params: &[f64],
        loss_fn: LossFn,
        reduction: LossReduction,
        batch: &[Sample],
    ) -> Result<f64> {
        Ok(self.total_loss(params, loss_fn, batch)? * reduction.factor(batch.len()))
    }

    /// Batch gradient with the given reduction applied.
    pub fn batch_grad(
        &self,
        params: &[f64],
        loss_fn: LossFn,
        reduction: LossReduction,
        batch: &[Sample],
    ) -> Result<ParamVector> {
        let mut g = self.grad(params, loss_fn, batch)?;
        if reduction == LossReduction::Mean {
            g.scale(reduction.factor(batch.len()));
        }
        Ok(g)
    }
}

/// Gradient of the per-sample loss with respect to the pre-head outputs.
///
/// For softmax + cross-entropy this is `p - onehot(y)`, the gradient of the
/// unclamped negative log-likelihood.
fn logit_grad(head: Head, loss_fn: LossFn, fwd: &Forward, y: &Target) -> Result<Vec<f64>> {
    let out = &fwd.output;
    match (head, loss_fn) {
        (Head::Softmax, LossFn::CrossEntropy) => {
            let c = class_index(y, out.len())?;
            let mut dz = out.clone();
            dz[c] -= 1.0;
            Ok(dz)
        }
        (Head::Identity, LossFn::Mse) => {
            let t = target_vector(y, out.len())?;
            Ok(fwd.logits.iter().zip(&t).map(|(z, t)| z - t).collect())
        }
        (Head::Softmax, LossFn::Mse) => {
            let t = target_vector(y, out.len())?;
            let g: Vec<f64> = out.iter().zip(&t).map(|(p, t)| p - t).collect();
            let pg: f64 = out.iter().zip(&g).map(|(p, g)| p * g).sum();
            Ok(out.iter().zip(&g).map(|(p, g)| p * (g - pg)).collect())
        }
        (Head::Identity, LossFn::CrossEntropy) => Err(FedError::config(
            "model",
            "cross_entropy needs a softmax head",
        )),
    }
}

fn class_index(y: &Target, len: usize) -> Result<usize> {
    match *y {
        Target::Class(c) if c < len => Ok(c),
        Target::Class(c) => Err(FedError::Dimension(format!(
            "class {c} out of range for {len} outputs"
        ))),
        Target::Value(_) => Err(FedError::Dimension(
            "cross_entropy needs a class target".into(),
        )),
    }
}

fn target_vector(y: &Target, len: usize) -> Result<Vec<f64>> {
    match *y {
        Target::Value(v) if len == 1 => Ok(vec![v]),
        Target::Value(_) => Err(FedError::Dimension(format!(
            "scalar target against {len} outputs"
        ))),
        Target::Class(c) if c < len => {
            let mut t = vec![0.0; len];
            t[c] = 1.0;
            Ok(t)
        }
        Target::Class(c) => Err(FedError::Dimension(format!(
            "class {c} out of range for {len} outputs"
        ))),
    }
}

/// Per-sample loss of a prediction against its target.
pub fn loss(loss_fn: LossFn, y_hat: &[f64], y: &Target) -> Result<f64> {
    match loss_fn {
        LossFn::Mse => {
            let t = target_vector(y, y_hat.len())?;
            Ok(0.5 * y_hat.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        }
        LossFn::CrossEntropy => {
            let c = class_index(y, y_hat.len())?;
            Ok(-y_hat[c].max(PROB_FLOOR).ln())
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(x: &[f64], y: Target) -> Sample {
        Sample {
            x: x.to_vec(),
            y,
        }
    }

    fn linear() -> ModelSpec {
        ModelSpec::LinearRegression {
            input_dim: 1,
            output_dim: 1,
        }
    }

    #[test]
    fn linear_predictions() {
        let spec = linear();
        assert_eq!(spec.num_params(), 2);
        assert_eq!(spec.predict(&[0.0, 0.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(spec.predict(&[2.0, 1.0], &[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_logistic_is_uniform() {
        let spec = ModelSpec::LogisticRegression {
            input_dim: 4,
            output_dim: 3,
        };
        let p = spec.predict(&vec![0.0; spec.num_params()], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = linear();
        assert!(matches!(
            spec.predict(&[1.0, 2.0, 3.0], &[1.0]),
            Err(FedError::Dimension(_))
        ));
        assert!(matches!(
            spec.predict(&[1.0, 2.0], &[1.0, 2.0]),
            Err(FedError::Dimension(_))
        ));
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss(LossFn::Mse, &[1.0], &Target::Value(1.0)).unwrap(), 0.0);
        assert_eq!(loss(LossFn::Mse, &[3.0], &Target::Value(1.0)).unwrap(), 2.0);
        let third = 1.0 / 3.0;
        let ce = loss(LossFn::CrossEntropy, &[third, third, third], &Target::Class(0)).unwrap();
        // ln 3
        assert!((ce - 1.098_612_288_668_109_8).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_floor_keeps_loss_finite() {
        let ce = loss(LossFn::CrossEntropy, &[1.0, 0.0], &Target::Class(1)).unwrap();
        assert!(ce.is_finite());
        assert!((ce - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn linear_grad_examples() {
        let spec = linear();
        let g = spec
            .grad(&[0.0, 0.0], LossFn::Mse, &[s(&[1.0], Target::Value(0.0))])
            .unwrap();
        assert_eq!(&*g, &[0.0, 0.0]);
        let g = spec
            .grad(&[2.0, 1.0], LossFn::Mse, &[s(&[3.0], Target::Value(0.0))])
            .unwrap();
        assert_eq!(&*g, &[21.0, 7.0]);
    }

    #[test]
    fn identity_head_rejects_cross_entropy() {
        let spec = linear();
        assert!(spec
            .grad(&[0.0, 0.0], LossFn::CrossEntropy, &[s(&[1.0], Target::Class(0))])
            .is_err());
    }

    #[test]
    fn param_count_is_deterministic() {
        let spec = ModelSpec::Mlp1Hidden {
            input_dim: 3,
            hidden_dim: 5,
            output_dim: 2,
            activation: Activation::Relu,
            head: Head::Softmax,
        };
        assert_eq!(spec.num_params(), 5 * 4 + 2 * 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = spec.init_params(&mut rng);
        assert_eq!(p.len(), spec.num_params());
        let w1_bound = 1.0 / 3f64.sqrt();
        assert!(p[..20].iter().all(|v| v.abs() <= w1_bound));
        let w2_bound = 1.0 / 5f64.sqrt();
        assert!(p[20..].iter().all(|v| v.abs() <= w2_bound));
    }

    #[test]
    fn spec_json_shape() {
        let spec: ModelSpec =
            serde_json::from_str(r#"{"kind":"mlp_1hidden","input_dim":2,"hidden_dim":4,"output_dim":1}"#)
                .unwrap();
        assert_eq!(spec.head(), Head::Identity);
        assert!(serde_json::from_str::<ModelSpec>(
            r#"{"kind":"linear_regression","input_dim":2,"bogus":1}"#
        )
        .is_err());
    }

    #[test]
    fn mean_reduction_divides_by_batch_size() {
        let spec = linear();
        let batch = [s(&[3.0], Target::Value(0.0)), s(&[1.0], Target::Value(1.0))];
        let sum = spec
            .batch_grad(&[2.0, 1.0], LossFn::Mse, LossReduction::Sum, &batch)
            .unwrap();
        let mean = spec
            .batch_grad(&[2.0, 1.0], LossFn::Mse, LossReduction::Mean, &batch)
            .unwrap();
        for (a, b) in sum.iter().zip(mean.iter()) {
            assert!((a / 2.0 - b).abs() < 1e-15);
        }
    }
}
