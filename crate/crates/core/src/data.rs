//! Per-client datasets: synthetic generators, non-IID partitioners and CSV
//! ingestion.
//!
//! Generators return [`ClientData`], which carries the generating
//! distribution's id next to the data. Learning code only ever receives the
//! inner [`SplitDataset`] / [`Dataset`], which have no notion of the tag.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng::{stream, Purpose};

/// Fraction of each client's local data used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Value(f64),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    /// All samples must share one feature dimension.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dim = first.x.len();
            if let Some(bad) = samples.iter().position(|s| s.x.len() != dim) {
                return Err(FedError::Dimension(format!(
                    "sample {bad} has {} features, expected {dim}",
                    samples[bad].x.len()
                )));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }

    pub fn labels(&self) -> BTreeSet<usize> {
        self.samples
            .iter()
            .filter_map(|s| match s.y {
                Target::Class(c) => Some(c),
                Target::Value(_) => None,
            })
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A client's data plus the id of the distribution that generated it.
/// The id is bookkeeping for verifying collaboration structure only.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub distribution_id: usize,
    pub split: SplitDataset,
}

/// Random disjoint split with `round(frac * n)` training samples.
pub fn train_test_split(d: &Dataset, frac: f64, seed: u64) -> Result<SplitDataset> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(FedError::config("train_fraction", "must lie in (0, 1)"));
    }
    let n = d.len();
    if n < 2 {
        return Err(FedError::Data(format!(
            "cannot split a dataset of {n} samples"
        )));
    }
    let n_train = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = idx.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitDataset {
        train: d.subset(train),
        test: d.subset(test),
    })
}

/// `k` clients on consecutive, equal-width segments of `[0, 2π]`, with
/// `y = sin(x) + N(0, noise_std²)`.
pub fn gen_sine_clients(
    k: usize,
    n_per_client: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if k < 2 {
        return Err(FedError::config("clients", "sine recipe needs at least 2 clients"));
    }
    if n_per_client < 4 {
        return Err(FedError::config("data.n_per_client", "must be at least 4"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(FedError::config("data.noise_std", "must be finite and non-negative"));
    }
    let width = 2.0 * PI / k as f64;
    (0..k)
        .map(|i| {
            let mut rng = stream(seed, Purpose::Data, i as u64);
            let lo = i as f64 * width;
            let noise = Normal::new(0.0, noise_std).expect("validated noise_std");
            let samples = (0..n_per_client)
                .map(|_| {
                    let x = rng.random_range(lo..lo + width);
                    let y = x.sin() + if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    Sample {
                        x: vec![x],
                        y: Target::Value(y),
                    }
                })
                .collect();
            let split = train_test_split(&Dataset::new(samples)?, TRAIN_FRACTION, rng.random())?;
            Ok(ClientData {
                distribution_id: i,
                split,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub groups: usize,
    pub clients: usize,
    pub dims: usize,
    pub classes_per_dist: usize,
    pub n_per_client: usize,
    /// Minimum pairwise distance between class centers, in units of the
    /// per-dimension noise standard deviation (which is 1).
    pub sep: f64,
}

/// Places `count` centers with pairwise distance at least `sep`. Centers are
/// drawn uniformly from a cube that grows only when placement keeps failing,
/// so they end up packed close to the minimum distance.
fn place_centers<R: Rng>(count: usize, dims: usize, sep: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let mut side = sep.max(f64::MIN_POSITIVE);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    while centers.len() < count {
        let mut placed = false;
        for _ in 0..200 {
            let c: Vec<f64> = (0..dims)
                .map(|_| rng.random_range(-side / 2.0..side / 2.0))
                .collect();
            let ok = centers.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= sep
            });
            if ok {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            side *= 1.1;
        }
    }
    centers
}

/// Gaussian-cluster classification. Distribution `g` owns classes
/// `g*classes_per_dist .. (g+1)*classes_per_dist`; client `i` draws from
/// distribution `i % groups` with balanced classes and unit isotropic noise.
pub fn gen_cluster_classification(spec: &ClusterSpec, seed: u64) -> Result<Vec<ClientData>> {
    let ClusterSpec {
        groups,
        clients,
        dims,
        classes_per_dist,
        n_per_client,
        sep,
    } = *spec;
    if groups < 2 {
        return Err(FedError::config("groups", "need at least 2 distributions"));
    }
    if clients < groups {
        return Err(FedError::config("clients", "need at least one client per distribution"));
    }
    if dims == 0 {
        return Err(FedError::config("data.dims", "must be positive"));
    }
    if classes_per_dist == 0 {
        return Err(FedError::config("data.classes_per_dist", "must be positive"));
    }
    if n_per_client < 2 {
        return Err(FedError::config("data.n_per_client", "must be at least 2"));
    }
    if !(sep > 0.0 && sep.is_finite()) {
        return Err(FedError::config("data.sep", "must be positive and finite"));
    }
    let centers = place_centers(
        groups * classes_per_dist,
        dims,
        sep,
        &mut stream(seed, Purpose::Centers, 0),
    );
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    (0..clients)
        .map(|i| {
            let dist = i % groups;
            let mut rng = stream(seed, Purpose::Data, i as u64);
            let samples = (0..n_per_client)
                .map(|s| {
                    let class = dist * classes_per_dist + s % classes_per_dist;
                    let x = centers[class]
                        .iter()
                        .map(|c| c + unit.sample(&mut rng))
                        .collect();
                    Sample {
                        x,
                        y: Target::Class(class),
                    }
                })
                .collect();
            let split = train_test_split(&Dataset::new(samples)?, TRAIN_FRACTION, rng.random())?;
            Ok(ClientData {
                distribution_id: dist,
                split,
            })
        })
        .collect()
}

/// Shuffles the distinct labels of `pool` and deals them into `groups`
/// near-equal disjoint groups. Returns the label groups and, per sample, its
/// group index.
fn group_labels<R: Rng>(pool: &Dataset, groups: usize, clients: usize, rng: &mut R) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if pool.samples.iter().any(|s| matches!(s.y, Target::Value(_))) {
        return Err(FedError::Data("label partitioning needs class targets".into()));
    }
    let mut labels: Vec<usize> = pool.labels().into_iter().collect();
    if groups == 0 || groups > labels.len() {
        return Err(FedError::config(
            "groups",
            format!("{groups} groups requested but the pool has {} labels", labels.len()),
        ));
    }
    if clients < groups {
        return Err(FedError::config("clients", "every label group needs at least one client"));
    }
    labels.shuffle(rng);
    let base = labels.len() / groups;
    let extra = labels.len() % groups;
    let mut label_groups = Vec::with_capacity(groups);
    let mut rest = labels.as_slice();
    for g in 0..groups {
        let take = base + usize::from(g < extra);
        let (head, tail) = rest.split_at(take);
        let mut group = head.to_vec();
        group.sort_unstable();
        label_groups.push(group);
        rest = tail;
    }
    let group_of = pool
        .samples
        .iter()
        .map(|s| match s.y {
            Target::Class(c) => label_groups.iter().position(|g| g.contains(&c)).expect("label is grouped"),
            Target::Value(_) => unreachable!(),
        })
        .collect();
    Ok((label_groups, group_of))
}

fn finish_clients(
    pool: &Dataset,
    assignments: Vec<Vec<usize>>,
    groups: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClientData>> {
    assignments
        .into_iter()
        .enumerate()
        .map(|(i, mut idx)| {
            if idx.len() < 2 {
                return Err(FedError::Data(format!(
                    "client {i} received {} samples; at least 2 are needed",
                    idx.len()
                )));
            }
            idx.sort_unstable();
            let split = train_test_split(&pool.subset(&idx), TRAIN_FRACTION, rng.random())?;
            Ok(ClientData {
                distribution_id: i % groups,
                split,
            })
        })
        .collect()
}

/// Disjoint label groups; client `i` gets an equal share of group `i % groups`.
pub fn partition_by_labels(pool: &Dataset, groups: usize, clients: usize, seed: u64) -> Result<Vec<ClientData>> {
    let mut rng = stream(seed, Purpose::Partition, 0);
    let (_, group_of) = group_labels(pool, groups, clients, &mut rng)?;
    let mut assignments = vec![Vec::new(); clients];
    for g in 0..groups {
        let mut idx: Vec<usize> = (0..pool.len()).filter(|&s| group_of[s] == g).collect();
        idx.shuffle(&mut rng);
        let members: Vec<usize> = (g..clients).step_by(groups).collect();
        let base = idx.len() / members.len();
        let extra = idx.len() % members.len();
        let mut rest = idx.as_slice();
        for (m, &client) in members.iter().enumerate() {
            let (head, tail) = rest.split_at(base + usize::from(m < extra));
            assignments[client].extend_from_slice(head);
            rest = tail;
        }
    }
    finish_clients(pool, assignments, groups, &mut rng)
}

/// Largest-remainder rounding of `props * n` to integers summing to `n`.
fn apportion(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

const DIRICHLET_RETRIES: usize = 100;

/// Labels grouped into `groups` clusters as in [`partition_by_labels`]; inside
/// each cluster, every label's samples are spread over the cluster's clients
/// with Dirichlet(`alpha`) proportions.
pub fn partition_dirichlet(
    pool: &Dataset,
    groups: usize,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::config("data.alpha", "must be positive and finite"));
    }
    let mut rng = stream(seed, Purpose::Partition, 0);
    let (label_groups, _) = group_labels(pool, groups, clients, &mut rng)?;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedError::config("data.alpha", e.to_string()))?;
    let mut assignments = vec![Vec::new(); clients];
    for (g, labels) in label_groups.iter().enumerate() {
        let members: Vec<usize> = (g..clients).step_by(groups).collect();
        let per_label: Vec<Vec<usize>> = labels
            .iter()
            .map(|&c| {
                let mut idx: Vec<usize> = (0..pool.len())
                    .filter(|&s| pool.samples[s].y == Target::Class(c))
                    .collect();
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        let mut attempt = 0;
        let shares = loop {
            if attempt == DIRICHLET_RETRIES {
                return Err(FedError::Data(format!(
                    "dirichlet partition left a client of cluster {g} with fewer than 2 samples after {DIRICHLET_RETRIES} draws"
                )));
            }
            attempt += 1;
            let mut shares = vec![Vec::new(); members.len()];
            let mut valid = true;
            for idx in &per_label {
                let draws: Vec<f64> = (0..members.len()).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                if !(total > 0.0 && total.is_finite()) {
                    valid = false;
                    break;
                }
                let props: Vec<f64> = draws.iter().map(|d| d / total).collect();
                let mut rest = idx.as_slice();
                for (m, count) in apportion(&props, idx.len()).into_iter().enumerate() {
                    let (head, tail) = rest.split_at(count);
                    shares[m].extend_from_slice(head);
                    rest = tail;
                }
            }
            if valid && shares.iter().all(|s| s.len() >= 2) {
                break shares;
            }
        };
        for (m, share) in members.iter().zip(shares) {
            assignments[*m] = share;
        }
    }
    finish_clients(pool, assignments, groups, &mut rng)
}

/// Reads a pool from CSV: header row, numeric feature columns, and an integer
/// class label in the last column.
pub fn read_csv_pool(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => FedError::Data(format!("cannot open {}: {e}", path.display())),
            _ => FedError::Csv(e),
        })?;
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(FedError::Data(format!(
                "row {}: need at least one feature and a label",
                row + 2
            )));
        }
        let (features, label) = (record.iter().take(record.len() - 1), &record[record.len() - 1]);
        let x = features
            .enumerate()
            .map(|(col, v)| {
                v.trim().parse::<f64>().map_err(|_| {
                    FedError::Data(format!("row {}, column {}: `{v}` is not a number", row + 2, col + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let y = label.trim().parse::<usize>().map_err(|_| {
            FedError::Data(format!("row {}: label `{label}` is not a non-negative integer", row + 2))
        })?;
        samples.push(Sample {
            x,
            y: Target::Class(y),
        });
    }
    if samples.is_empty() {
        return Err(FedError::Data(format!("{} contains no samples", path.display())));
    }
    Dataset::new(samples)
}
