mod common;

use federico::data::Dataset;
use federico::em_reference::{em_iteration, EmLoss, GlobalState, PhiStep};
use federico::models::{LossFn, LossReduction, ModelSpec};
use federico::optim::OptimizerConfig;
use federico::protocol::TrainConfig;
use federico::{ClientNode, Federation, ProtocolConfig, SamplerConfig, SelfLoss, TrackerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn federation(
    spec: &ModelSpec,
    data: &[Dataset],
    loss_fn: LossFn,
    sampler: SamplerConfig,
    tracker: TrackerConfig,
    opt: OptimizerConfig,
    self_loss: SelfLoss,
) -> Federation {
    let k = data.len();
    let nodes = (0..k)
        .map(|i| ClientNode::new(i, k, spec.clone(), data[i].clone(), tracker, &opt, 3))
        .collect();
    let cfg = ProtocolConfig {
        sampler,
        tracker,
        self_loss,
        train: TrainConfig {
            optimizer: opt,
            loss_fn,
            reduction: LossReduction::Sum,
            local_steps: 1,
            batch_size: None,
        },
    };
    Federation::new(nodes, cfg).unwrap()
}

fn max_gap_to_reference(spec: ModelSpec, data: Vec<Dataset>, loss_fn: LossFn, eta: f64, rounds: usize) -> f64 {
    let k = data.len();
    let full = SamplerConfig {
        neighbors: k - 1,
        epsilon: 1.0,
    };
    let mut fed = federation(
        &spec,
        &data,
        loss_fn,
        full,
        TrackerConfig::accumulative(),
        OptimizerConfig::sgd(eta),
        SelfLoss::Refresh,
    );
    let mut reference = GlobalState::new(spec, fed.nodes.iter().map(|n| n.params.clone()).collect());
    let refs: Vec<&Dataset> = data.iter().collect();
    let loss = EmLoss {
        loss_fn,
        reduction: LossReduction::Sum,
    };
    let mut gap = 0.0f64;
    for _ in 0..rounds {
        let trace = fed.step().unwrap();
        let w = em_iteration(&mut reference, &refs, PhiStep::Gradient { eta }, loss).unwrap();
        for i in 0..k {
            for j in 0..k {
                gap = gap.max((trace.weights[i][j] - w[i][j]).abs());
            }
            for (a, b) in fed.nodes[i].params.iter().zip(reference.params[i].iter()) {
                gap = gap.max((a - b).abs());
            }
        }
    }
    gap
}

#[test]
fn full_sampling_tracks_the_reference_for_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in [2, 3, 5] {
        let data: Vec<Dataset> = (0..k).map(|i| line_data(i as f64 - 1.0, 0.5, 0.2, 8, &mut rng)).collect();
        let spec = ModelSpec::LinearRegression {
            input_dim: 1,
            output_dim: 1,
        };
        let gap = max_gap_to_reference(spec, data, LossFn::Mse, 0.01, 25);
        assert!(gap <= 1e-9, "K={k}: {gap}");
    }
}

#[test]
fn full_sampling_tracks_the_reference_for_classifiers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (name, spec, loss_fn) in model_kinds() {
        let data: Vec<Dataset> = (0..4)
            .map(|_| Dataset::new(random_batch(&spec, loss_fn, 12, &mut rng)).unwrap())
            .collect();
        let gap = max_gap_to_reference(spec, data, loss_fn, 0.005, 20);
        assert!(gap <= 1e-9, "{name}: {gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rounds_keep_weights_on_the_simplex(
        k in 3usize..7,
        m_frac in 0.0f64..1.0,
        epsilon in 0.0f64..=1.0,
        seed in 0u64..1000,
        accumulative in any::<bool>(),
        fixed_self in any::<bool>(),
    ) {
        let m = 1 + ((k - 2) as f64 * m_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Dataset> = (0..k).map(|i| line_data(i as f64, 0.0, 0.3, 6, &mut rng)).collect();
        let spec = ModelSpec::LinearRegression { input_dim: 1, output_dim: 1 };
        let tracker = if accumulative { TrackerConfig::accumulative() } else { TrackerConfig::ema(0.6) };
        let self_loss = if fixed_self { SelfLoss::Fixed } else { SelfLoss::Refresh };
        let mut fed = federation(
            &spec,
            &data,
            LossFn::Mse,
            SamplerConfig { neighbors: m, epsilon },
            tracker,
            OptimizerConfig::adam(0.01),
            self_loss,
        );
        let d = spec.num_params() as u64 * 8;
        for _ in 0..8 {
            let trace = fed.step().unwrap();
            for (i, row) in trace.weights.iter().enumerate() {
                prop_assert!(row.iter().all(|w| *w >= 0.0 && w.is_finite()));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert_eq!(trace.neighbors[i].len(), m);
                prop_assert!(!trace.neighbors[i].contains(&i));
            }
            let edges = (k * m) as u64;
            prop_assert_eq!(trace.comm.model_bytes, edges * d);
            prop_assert_eq!(trace.comm.gradient_bytes, edges * d);
            prop_assert_eq!(trace.comm.all_to_all_bytes, 2 * (k * (k - 1)) as u64 * d);
        }
    }
}
