#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use federico::data::{Dataset, Sample, Target};
use federico::models::{Activation, Head, LossFn, ModelSpec};
use federico::ExperimentConfig;
use rand::Rng;

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn shipped_config(name: &str) -> ExperimentConfig {
    federico::parse_config(&config_path(name)).expect("shipped config parses")
}

/// Every model kind paired with a loss it supports.
pub fn model_kinds() -> Vec<(&'static str, ModelSpec, LossFn)> {
    vec![
        (
            "linear",
            ModelSpec::LinearRegression { input_dim: 3, output_dim: 1 },
            LossFn::Mse,
        ),
        (
            "logistic",
            ModelSpec::LogisticRegression { input_dim: 3, output_dim: 4 },
            LossFn::CrossEntropy,
        ),
        (
            "mlp_tanh_regression",
            ModelSpec::Mlp1Hidden {
                input_dim: 3,
                hidden_dim: 5,
                output_dim: 1,
                activation: Activation::Tanh,
                head: Head::Identity,
            },
            LossFn::Mse,
        ),
        (
            "mlp_relu_classifier",
            ModelSpec::Mlp1Hidden {
                input_dim: 3,
                hidden_dim: 5,
                output_dim: 3,
                activation: Activation::Relu,
                head: Head::Softmax,
            },
            LossFn::CrossEntropy,
        ),
    ]
}

pub fn random_batch<R: Rng>(spec: &ModelSpec, loss_fn: LossFn, n: usize, rng: &mut R) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let x = (0..spec.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = match loss_fn {
                LossFn::CrossEntropy => Target::Class(rng.random_range(0..spec.output_dim())),
                LossFn::Mse => Target::Value(rng.random_range(-1.0..1.0)),
            };
            Sample { x, y }
        })
        .collect()
}

/// Central differences of the summed batch loss, step `h`.
pub fn numeric_grad(spec: &ModelSpec, params: &[f64], loss_fn: LossFn, batch: &[Sample], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let up = spec.total_loss(&p, loss_fn, batch).unwrap();
            p[k] = orig - h;
            let down = spec.total_loss(&p, loss_fn, batch).unwrap();
            p[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// `y = slope * x + intercept + noise` on `x ∈ [-1, 1]`.
pub fn line_data<R: Rng>(slope: f64, intercept: f64, noise: f64, n: usize, rng: &mut R) -> Dataset {
    let samples = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let e: f64 = rng.random_range(-noise..=noise);
            Sample {
                x: vec![x],
                y: Target::Value(slope * x + intercept + e),
            }
        })
        .collect();
    Dataset::new(samples).unwrap()
}

/// Reads `weights.csv` back into `round -> matrix`.
pub fn read_weights(path: &Path) -> BTreeMap<usize, Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let mut out: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for row in reader.deserialize::<(usize, usize, usize, f64)>() {
        let (t, i, j, w) = row.unwrap();
        let m = out.entry(t).or_default();
        if m.len() <= i {
            m.resize(i + 1, Vec::new());
        }
        if m[i].len() <= j {
            m[i].resize(j + 1, 0.0);
        }
        m[i][j] = w;
    }
    out
}
