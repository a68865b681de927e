use crate::data::{
    gen_cluster_classification, gen_sine_clients, partition_by_labels, partition_dirichlet, read_csv_pool,
    ClientData, ClusterSpec,
};
use crate::error::{FedError, Result};
use crate::harness::config::{ExperimentConfig, Partition, Recipe};
use crate::mixture::Metric;
use crate::models::{LossFn, ModelSpec};

/// Everything a method needs to run: per-client data, architecture, loss and
/// evaluation metric.
#[derive(Clone, Debug)]
pub struct Task {
    pub clients: Vec<ClientData>,
    pub spec: ModelSpec,
    pub loss_fn: LossFn,
    pub metric: Metric,
}

pub fn build_task(cfg: &ExperimentConfig) -> Result<Task> {
    let d = &cfg.data;
    let seed = cfg.data_seed();
    let (clients, default_spec, loss_fn, metric) = match cfg.recipe {
        Recipe::Sine => (
            gen_sine_clients(cfg.clients, d.n_per_client, d.noise_std, seed)?,
            ModelSpec::LinearRegression {
                input_dim: 1,
                output_dim: 1,
            },
            LossFn::Mse,
            Metric::Mse,
        ),
        Recipe::Clusters => {
            let spec = ClusterSpec {
                groups: cfg.groups,
                clients: cfg.clients,
                dims: d.dims,
                classes_per_dist: d.classes_per_dist,
                n_per_client: d.n_per_client,
                sep: d.sep,
            };
            (
                gen_cluster_classification(&spec, seed)?,
                ModelSpec::LogisticRegression {
                    input_dim: d.dims,
                    output_dim: cfg.groups * d.classes_per_dist,
                },
                LossFn::CrossEntropy,
                Metric::Accuracy,
            )
        }
        Recipe::CsvPool => {
            let path = d
                .csv_path
                .as_ref()
                .ok_or_else(|| FedError::config("data.csv_path", "required by the csv_pool recipe"))?;
            let pool = read_csv_pool(path)?;
            let classes = pool.labels().iter().max().map_or(0, |m| m + 1);
            let input_dim = pool.dim().unwrap_or(0);
            let clients = match d.partition {
                Partition::Labels => partition_by_labels(&pool, cfg.groups, cfg.clients, seed)?,
                Partition::Dirichlet => partition_dirichlet(&pool, cfg.groups, cfg.clients, d.alpha, seed)?,
            };
            (
                clients,
                ModelSpec::LogisticRegression {
                    input_dim,
                    output_dim: classes.max(2),
                },
                LossFn::CrossEntropy,
                Metric::Accuracy,
            )
        }
    };
    let spec = cfg.model.clone().unwrap_or(default_spec);
    spec.validate()?;
    spec.check_loss(loss_fn)?;
    if let Some(dim) = clients.first().and_then(|c| c.split.train.dim()) {
        if dim != spec.input_dim() {
            return Err(FedError::config(
                "model.input_dim",
                format!("data has {dim} features, model expects {}", spec.input_dim()),
            ));
        }
    }
    Ok(Task {
        clients,
        spec,
        loss_fn,
        metric,
    })
}
