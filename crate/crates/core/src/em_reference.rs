//! All-to-all expectation-maximization over client mixtures.
//!
//! Single-threaded and written for clarity: this is the oracle the
//! communication-efficient protocol is checked against.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, Target};
use crate::error::{FedError, Result};
use crate::mixture::posterior_from_scratch;
use crate::models::{LossFn, LossReduction, ModelSpec, ParamVector};

/// Ridge added to the normal equations of the exact linear M-step.
pub const RIDGE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub spec: ModelSpec,
    pub params: Vec<ParamVector>,
    /// Row-stochastic prior `Π`.
    pub prior: Vec<Vec<f64>>,
    pub round: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmLoss {
    pub loss_fn: LossFn,
    pub reduction: LossReduction,
}

impl Default for EmLoss {
    fn default() -> Self {
        EmLoss {
            loss_fn: LossFn::Mse,
            reduction: LossReduction::Sum,
        }
    }
}

impl GlobalState {
    /// Uniform prior over the given models.
    pub fn new(spec: ModelSpec, params: Vec<ParamVector>) -> Self {
        let k = params.len();
        GlobalState {
            spec,
            params,
            prior: vec![vec![1.0 / k as f64; k]; k],
            round: 0,
        }
    }

    pub fn clients(&self) -> usize {
        self.params.len()
    }

    fn check(&self, datasets: &[&Dataset]) -> Result<()> {
        let k = self.clients();
        if datasets.len() != k || self.prior.len() != k || self.prior.iter().any(|r| r.len() != k) {
            return Err(FedError::Dimension(format!(
                "{k} models, {} datasets, prior {}x?",
                datasets.len(),
                self.prior.len()
            )));
        }
        Ok(())
    }

    /// `ℓ_ij`: loss of model `j` over all of client `i`'s data.
    pub fn loss_matrix(&self, datasets: &[&Dataset], loss: EmLoss) -> Result<Vec<Vec<f64>>> {
        self.check(datasets)?;
        datasets
            .iter()
            .map(|d| {
                self.params
                    .iter()
                    .map(|p| self.spec.batch_loss(p, loss.loss_fn, loss.reduction, d.samples()))
                    .collect()
            })
            .collect()
    }
}

/// Posterior `W_ij ∝ Π_ij exp(-ℓ_ij)`, row by row.
pub fn e_step(state: &GlobalState, datasets: &[&Dataset], loss: EmLoss) -> Result<Vec<Vec<f64>>> {
    let losses = state.loss_matrix(datasets, loss)?;
    state
        .prior
        .iter()
        .zip(&losses)
        .map(|(prior, l)| posterior_from_scratch(prior, l))
        .collect()
}

/// The prior update is the posterior itself.
pub fn m_step_pi(w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    w.to_vec()
}

/// Per-model aggregated gradient `Σ_j w_ji ∇ℓ_j(φ_i)`, summed in ascending `j`.
pub fn aggregated_gradient(
    state: &GlobalState,
    w: &[Vec<f64>],
    datasets: &[&Dataset],
    loss: EmLoss,
) -> Result<Vec<ParamVector>> {
    state.check(datasets)?;
    let k = state.clients();
    (0..k)
        .map(|i| {
            let mut total = ParamVector::zeros(state.spec.num_params());
            for (j, data) in datasets.iter().enumerate() {
                let g = state
                    .spec
                    .batch_grad(&state.params[i], loss.loss_fn, loss.reduction, data.samples())?
                    .scaled(w[j][i]);
                total.add_scaled(&g, 1.0);
            }
            Ok(total)
        })
        .collect()
}

/// `Φ' = Φ - η Σ_j ∇L̂_{w,j}(Φ)`.
pub fn m_step_phi_gradient(
    state: &GlobalState,
    w: &[Vec<f64>],
    datasets: &[&Dataset],
    eta: f64,
    loss: EmLoss,
) -> Result<Vec<ParamVector>> {
    let grads = aggregated_gradient(state, w, datasets, loss)?;
    state
        .params
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(i, (p, g))| {
            let mut next = p.clone();
            next.add_scaled(&g, -eta);
            if next.is_finite() {
                Ok(next)
            } else {
                Err(FedError::NumericFailure {
                    round: state.round + 1,
                    client: i,
                    detail: "non-finite gradient M-step".into(),
                })
            }
        })
        .collect()
}

/// Exact M-step for single-output linear regression with squared loss:
/// model `j` solves `min Σ_i W_ij Σ_s ½(h(x) - y)²` through ridge-floored
/// normal equations.
pub fn m_step_phi_exact_linear(
    state: &GlobalState,
    w: &[Vec<f64>],
    datasets: &[&Dataset],
) -> Result<Vec<ParamVector>> {
    state.check(datasets)?;
    let input_dim = match state.spec {
        ModelSpec::LinearRegression {
            input_dim,
            output_dim: 1,
        } => input_dim,
        _ => {
            return Err(FedError::config(
                "model",
                "exact M-step needs single-output linear regression",
            ))
        }
    };
    let d = input_dim + 1;
    (0..state.clients())
        .map(|j| {
            let mut a = DMatrix::<f64>::identity(d, d) * RIDGE_FLOOR;
            let mut rhs = DVector::<f64>::zeros(d);
            for (i, data) in datasets.iter().enumerate() {
                let weight = w[i][j];
                if weight == 0.0 {
                    continue;
                }
                for s in data.samples() {
                    let y = match s.y {
                        Target::Value(v) => v,
                        Target::Class(_) => {
                            return Err(FedError::Data("exact M-step needs real-valued targets".into()))
                        }
                    };
                    let mut xt = s.x.clone();
                    xt.push(1.0);
                    let xv = DVector::from_vec(xt);
                    a += &xv * xv.transpose() * weight;
                    rhs += xv * (weight * y);
                }
            }
            let sol = match a.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => a.lu().solve(&rhs).ok_or_else(|| {
                    FedError::Dimension(format!("normal equations for model {j} are singular"))
                })?,
            };
            Ok(ParamVector::new(sol.iter().copied().collect()))
        })
        .collect()
}

/// Variational bound up to its additive constant:
/// `(1/n) Σ_i Σ_j W_ij [-ℓ_ij + ln Π_ij - ln W_ij]`, with `0·ln 0 = 0`.
pub fn variational_bound(
    state: &GlobalState,
    w: &[Vec<f64>],
    datasets: &[&Dataset],
    loss: EmLoss,
) -> Result<f64> {
    let losses = state.loss_matrix(datasets, loss)?;
    let n: usize = datasets.iter().map(|d| d.len()).sum();
    let mut total = 0.0;
    for i in 0..state.clients() {
        for j in 0..state.clients() {
            let wij = w[i][j];
            if wij == 0.0 {
                continue;
            }
            total += wij * (-losses[i][j] + state.prior[i][j].ln() - wij.ln());
        }
    }
    Ok(total / n as f64)
}

/// Which maximization is used for the model parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhiStep {
    Gradient { eta: f64 },
    ExactLinear,
}

/// One full iteration: E-step, prior update, parameter update. Returns the
/// posterior used.
pub fn em_iteration(
    state: &mut GlobalState,
    datasets: &[&Dataset],
    phi: PhiStep,
    loss: EmLoss,
) -> Result<Vec<Vec<f64>>> {
    let w = e_step(state, datasets, loss)?;
    let params = match phi {
        PhiStep::Gradient { eta } => m_step_phi_gradient(state, &w, datasets, eta, loss)?,
        PhiStep::ExactLinear => m_step_phi_exact_linear(state, &w, datasets)?,
    };
    state.prior = m_step_pi(&w);
    state.params = params;
    state.round += 1;
    Ok(w)
}
