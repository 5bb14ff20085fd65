//! Autoencoder pretraining, k-means initialization on the latent space, joint
//! network/centroid optimization with the small-cluster guard, and inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureField;
use crate::net::{sq_dist, LossBreakdown, Network, NetworkConfig, NetworkParams};
use crate::voxelgrid::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    Sgd,
    /// Adam; `momentum` is used as beta1.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Batch size of the reconstruction-only phase; `None` uses `batch_size`.
    pub pretrain_batch_size: Option<usize>,
    /// Clusters with fewer than `small_cluster_fraction * batch` members in a
    /// batch have their centroid replaced.
    pub small_cluster_fraction: f64,
    pub guard: bool,
    pub lambda: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub pretrain_lr: f64,
    pub joint_lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub n_parcels: usize,
    /// Samples drawn (without replacement) per epoch; `None` uses all.
    pub samples_per_epoch: Option<usize>,
    /// k-means++ restarts for the centroid initialization; the lowest
    /// objective wins.
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 3096,
            pretrain_batch_size: None,
            small_cluster_fraction: 1.0 / 80.0,
            guard: true,
            lambda: 3.3e-5,
            pretrain_epochs: 100,
            joint_epochs: 50,
            pretrain_lr: 1e-3,
            joint_lr: 1e-4,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            n_parcels: 9,
            samples_per_epoch: None,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.pretrain_batch_size == Some(0) {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.small_cluster_fraction > 0.0 && self.small_cluster_fraction < 1.0) {
            return bad(format!("small_cluster_fraction must be in (0, 1), got {}", self.small_cluster_fraction));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.pretrain_lr > 0.0 && self.joint_lr > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.n_parcels == 0 {
            return bad("n_parcels must be >= 1".into());
        }
        if self.samples_per_epoch == Some(0) {
            return bad("samples_per_epoch must be >= 1".into());
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be >= 1".into());
        }
        Ok(())
    }

    /// Member count below which a cluster is starved in a batch of `batch`.
    pub fn guard_threshold(&self, batch: usize) -> f64 {
        self.small_cluster_fraction * batch as f64
    }
}

/// First-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, n: usize) -> Self {
        let second = match kind {
            OptimizerKind::Adam => vec![0.0; n],
            OptimizerKind::Sgd => Vec::new(),
        };
        Self { kind, lr, momentum, first: vec![0.0; n], second, steps: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.steps = self.steps.saturating_add(1);
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - Self::BETA2.powi(self.steps);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Centroids, per-sample assignments and streaming-update counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansState {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub counts: Vec<u64>,
}

impl KMeansState {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Members per cluster under the current assignments.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        cluster_sizes(&self.assignments, self.n_clusters())
    }
}

pub fn cluster_sizes(assignments: &[usize], n: usize) -> Vec<usize> {
    let mut sizes = vec![0; n];
    for &a in assignments {
        sizes[a] += 1;
    }
    sizes
}

/// Nearest centroid per latent; ties go to the smallest index.
pub fn assign(latents: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    latents.iter().map(|z| nearest(z, centroids).0).collect()
}

fn nearest(z: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, m) in centroids.iter().enumerate() {
        let d = sq_dist(z, m);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Sum of squared distances from each latent to its assigned centroid.
pub fn kmeans_objective(latents: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    latents.iter().zip(assignments).map(|(z, &a)| sq_dist(z, &centroids[a])).sum()
}

const LLOYD_MAX_ITERS: usize = 300;

/// k-means++ seeding followed by Lloyd iterations until the assignments stop
/// changing (at most 300 iterations). With `restarts > 1` the run with the
/// lowest objective is kept. Counts start at the final cluster sizes.
pub fn init_centroids(latents: &[Vec<f64>], n: usize, seed: u64, restarts: usize) -> Result<KMeansState> {
    if n == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    let dim = latents.first().map_or(0, Vec::len);
    if latents.iter().any(|z| z.len() != dim) {
        return Err(Error::Shape("latents have differing dimensions".into()));
    }
    let mut distinct: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
    distinct.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < n {
        return Err(Error::InsufficientData(format!(
            "{} distinct points for {n} clusters",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, KMeansState)> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeans_plus_plus(latents, n, &mut rng);
        let (centroids, assignments) = lloyd(latents, seeds);
        let obj = kmeans_objective(latents, &centroids, &assignments);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            let counts = cluster_sizes(&assignments, n).into_iter().map(|c| c as u64).collect();
            best = Some((obj, KMeansState { centroids, assignments, counts }));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn kmeans_plus_plus(latents: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(n);
    centroids.push(latents[rng.random_range(0..latents.len())].clone());
    let mut d2: Vec<f64> = latents.iter().map(|z| sq_dist(z, &centroids[0])).collect();
    while centroids.len() < n {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        // total > 0 is guaranteed while fewer than n distinct points are chosen
        let chosen = latents[pick.expect("a point with positive distance")].clone();
        for (d, z) in d2.iter_mut().zip(latents) {
            *d = d.min(sq_dist(z, &chosen));
        }
        centroids.push(chosen);
    }
    centroids
}

fn lloyd(latents: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = centroids.len();
    let dim = centroids[0].len();
    let mut assignments = assign(latents, &centroids);
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0usize; n];
        for (z, &a) in latents.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(z) {
                *s += v;
            }
        }
        for k in 0..n {
            // an emptied cluster keeps its previous centroid
            if counts[k] > 0 {
                for (m, s) in centroids[k].iter_mut().zip(&sums[k]) {
                    *m = s / counts[k] as f64;
                }
            }
        }
        let next = assign(latents, &centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    (centroids, assignments)
}

/// What the guard did on one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuardOutcome {
    pub replaced: Vec<usize>,
    /// Every cluster was below threshold; nothing was changed.
    pub all_starved: bool,
}

/// Replaces the centroid of every cluster with fewer than
/// `fraction * batch_size` members in this batch by the mean of the
/// remaining centroids, and restarts its count at 1. Assignments are left
/// alone.
pub fn adaptive_guard(state: &mut KMeansState, batch_assignments: &[usize], batch_size: usize, fraction: f64) -> GuardOutcome {
    let n = state.n_clusters();
    let threshold = fraction * batch_size as f64;
    let sizes = cluster_sizes(batch_assignments, n);
    let starved: Vec<usize> = (0..n).filter(|&k| (sizes[k] as f64) < threshold).collect();
    if starved.is_empty() {
        return GuardOutcome::default();
    }
    if starved.len() == n {
        log::warn!("all {n} clusters below the guard threshold {threshold}; centroids kept");
        return GuardOutcome { replaced: Vec::new(), all_starved: true };
    }
    let dim = state.centroids[0].len();
    let healthy: Vec<usize> = (0..n).filter(|k| !starved.contains(k)).collect();
    let mut mean = vec![0.0; dim];
    for &k in &healthy {
        for (m, c) in mean.iter_mut().zip(&state.centroids[k]) {
            *m += c;
        }
    }
    for m in &mut mean {
        *m /= healthy.len() as f64;
    }
    for &k in &starved {
        state.centroids[k].clone_from(&mean);
        state.counts[k] = 1;
    }
    GuardOutcome { replaced: starved, all_starved: false }
}

/// Sample order for one epoch: a seeded shuffle, truncated to
/// `samples_per_epoch`. Depends only on (seed, epoch).
fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    if let Some(m) = cfg.samples_per_epoch {
        order.truncate(m);
    }
    order
}

/// Splits an epoch into `ceil(len / size)` contiguous batches whose sizes
/// differ by at most one, so no batch is a small remainder.
pub fn balanced_batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let count = order.len().div_ceil(size.max(1));
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let len = order.len() / count + usize::from(b < order.len() % count);
        out.push(&order[start..start + len]);
        start += len;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Cluster sizes over the whole training set after the epoch (joint phase).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cluster_sizes: Vec<usize>,
    #[serde(default)]
    pub guard_replacements: usize,
}

fn check_dataset(net: &Network, dataset: &[&[f64]]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let k = net.config().k;
    if let Some(i) = dataset.iter().position(|v| v.len() != k) {
        return Err(Error::Shape(format!("sample {i} has length {}, expected {k}", dataset[i].len())));
    }
    Ok(())
}

fn weighted(acc: &mut (f64, f64, f64), loss: &LossBreakdown, n: usize) {
    acc.0 += loss.reconstruction * n as f64;
    acc.1 += loss.centroid * n as f64;
    acc.2 += loss.total * n as f64;
}

fn epoch_loss(acc: (f64, f64, f64), n: usize, lambda: f64) -> LossBreakdown {
    let n = n as f64;
    LossBreakdown { reconstruction: acc.0 / n, centroid: acc.1 / n, total: acc.2 / n, lambda }
}

/// Mini-batch reconstruction-only training. Returns the trained parameters
/// and one log entry per epoch.
pub fn pretrain(net: &Network, params: NetworkParams, dataset: &[&[f64]], cfg: &TrainConfig) -> Result<(NetworkParams, Vec<EpochLog>)> {
    cfg.validate()?;
    check_dataset(net, dataset)?;
    let mut params = params;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr, cfg.momentum, net.n_params());
    let mut logs = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let order = epoch_order(dataset.len(), cfg, epoch);
        let mut acc = (0.0, 0.0, 0.0);
        for (b, batch) in balanced_batches(&order, cfg.pretrain_batch_size.unwrap_or(cfg.batch_size)).into_iter().enumerate() {
            let vectors: Vec<&[f64]> = batch.iter().map(|&i| dataset[i]).collect();
            let out = net
                .loss_and_gradients_vectors(&params, &vectors, &[], &[], 0.0)
                .map_err(|e| locate(e, "pretrain", epoch, b))?;
            weighted(&mut acc, &out.loss, batch.len());
            opt.step(&mut params.data, &out.params);
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("pretrain epoch {epoch} batch {b}: parameters")));
            }
        }
        let loss = epoch_loss(acc, order.len(), 0.0);
        log::info!("pretrain epoch {epoch}: mse {:.6e}", loss.reconstruction);
        logs.push(EpochLog { phase: "pretrain".into(), epoch, loss, cluster_sizes: Vec::new(), guard_replacements: 0 });
    }
    Ok((params, logs))
}

fn locate(e: Error, phase: &str, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{phase} epoch {epoch} batch {batch}: {what}")),
        other => other,
    }
}

/// Trained autoencoder plus clustering state.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepClusterModel {
    pub network: NetworkConfig,
    pub params: NetworkParams,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub train: TrainConfig,
}

impl DeepClusterModel {
    pub fn n_parcels(&self) -> usize {
        self.centroids.len()
    }
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub params: NetworkParams,
    /// Centroids and counts after the last batch; assignments are the final
    /// nearest-centroid labels of every training sample.
    pub kmeans: KMeansState,
    pub logs: Vec<EpochLog>,
}

/// Alternating optimization. Per batch: a gradient step on the joint loss with
/// assignments and centroids fixed, reassignment of the batch, streaming
/// centroid updates `m_k += (z - m_k) / c_k`, then the guard (if enabled).
pub fn joint_train(net: &Network, params: NetworkParams, dataset: &[&[f64]], kmeans: KMeansState, cfg: &TrainConfig) -> Result<JointOutcome> {
    cfg.validate()?;
    check_dataset(net, dataset)?;
    if kmeans.assignments.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "{} assignments for {} samples",
            kmeans.assignments.len(),
            dataset.len()
        )));
    }
    if kmeans.centroids.iter().any(|c| c.len() != net.config().latent_dim) {
        return Err(Error::Shape("centroid dimension differs from latent_dim".into()));
    }
    let mut params = params;
    let mut state = kmeans;
    let n_clusters = state.n_clusters();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.joint_lr, cfg.momentum, net.n_params());
    let mut logs = Vec::with_capacity(cfg.joint_epochs);

    for epoch in 0..cfg.joint_epochs {
        let order = epoch_order(dataset.len(), cfg, epoch);
        let mut acc = (0.0, 0.0, 0.0);
        let mut replacements = 0;
        for (b, batch) in balanced_batches(&order, cfg.batch_size).into_iter().enumerate() {
            let vectors: Vec<&[f64]> = batch.iter().map(|&i| dataset[i]).collect();
            let batch_assign: Vec<usize> = batch.iter().map(|&i| state.assignments[i]).collect();
            let out = net
                .loss_and_gradients_vectors(&params, &vectors, &state.centroids, &batch_assign, cfg.lambda)
                .map_err(|e| locate(e, "joint", epoch, b))?;
            weighted(&mut acc, &out.loss, batch.len());
            opt.step(&mut params.data, &out.params);
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("joint epoch {epoch} batch {b}: parameters")));
            }

            let latents = net.encode_vectors(&params, &vectors)?;
            let new_assign = assign(&latents, &state.centroids);
            for ((&i, &a), z) in batch.iter().zip(&new_assign).zip(&latents) {
                state.assignments[i] = a;
                state.counts[a] += 1;
                let step = 1.0 / state.counts[a] as f64;
                for (m, v) in state.centroids[a].iter_mut().zip(z) {
                    *m += step * (v - *m);
                }
            }
            if cfg.guard {
                let g = adaptive_guard(&mut state, &new_assign, batch.len(), cfg.small_cluster_fraction);
                replacements += g.replaced.len();
            }
            if state.centroids.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("joint epoch {epoch} batch {b}: centroids")));
            }
        }
        let loss = epoch_loss(acc, order.len(), cfg.lambda);
        let sizes = cluster_sizes(&state.assignments, n_clusters);
        log::info!(
            "joint epoch {epoch}: total {:.6e} (mse {:.6e}, centroid {:.6e}), sizes {sizes:?}, guard replaced {replacements}",
            loss.total,
            loss.reconstruction,
            loss.centroid
        );
        logs.push(EpochLog { phase: "joint".into(), epoch, loss, cluster_sizes: sizes, guard_replacements: replacements });
    }

    let latents = net.encode_vectors(&params, dataset)?;
    state.assignments = assign(&latents, &state.centroids);
    Ok(JointOutcome { params, kmeans: state, logs })
}

/// Result of the full training procedure.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DeepClusterModel,
    /// Final label of every training sample.
    pub assignments: Vec<usize>,
    pub logs: Vec<EpochLog>,
}

/// Pretraining, k-means initialization on the pretrained latents, and joint
/// training, starting from seeded random parameters.
pub fn train(network: &NetworkConfig, dataset: &[&[f64]], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = Network::new(network.clone())?;
    check_dataset(&net, dataset)?;
    let init = net.init_params(cfg.seed);
    let (params, mut logs) = pretrain(&net, init, dataset, cfg)?;
    let latents = net.encode_vectors(&params, dataset)?;
    let kmeans = init_centroids(&latents, cfg.n_parcels, cfg.seed ^ 0x6b6d_6561_6e73, cfg.kmeans_restarts)?;
    log::info!("initial cluster sizes {:?}", kmeans.cluster_sizes());
    let joint = joint_train(&net, params, dataset, kmeans, cfg)?;
    logs.extend(joint.logs);
    Ok(TrainOutcome {
        model: DeepClusterModel {
            network: network.clone(),
            params: joint.params,
            centroids: joint.kmeans.centroids,
            counts: joint.kmeans.counts,
            train: cfg.clone(),
        },
        assignments: joint.kmeans.assignments,
        logs,
    })
}

/// Per-voxel parcel labels for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Parcellation {
    pub mask: Mask,
    /// Aligned with the mask ordering; every label is `< n_parcels`.
    pub labels: Vec<u32>,
    pub n_parcels: usize,
    pub subject_id: String,
    pub model_id: String,
}

impl Parcellation {
    pub fn new(mask: Mask, labels: Vec<u32>, n_parcels: usize, subject_id: String, model_id: String) -> Result<Self> {
        if labels.len() != mask.len() {
            return Err(Error::Shape(format!("{} labels for {} mask voxels", labels.len(), mask.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_parcels) {
            return Err(Error::Shape(format!("label {bad} outside [0, {n_parcels})")));
        }
        Ok(Self { mask, labels, n_parcels, subject_id, model_id })
    }

    /// Linear indices carrying `label`.
    pub fn parcel(&self, label: u32) -> Vec<usize> {
        self.mask.voxels().iter().zip(&self.labels).filter(|(_, &l)| l == label).map(|(&v, _)| v).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_parcels];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Encodes every voxel's augmented feature vector and labels it with the
/// nearest centroid.
pub fn parcellate(model: &DeepClusterModel, features: &FeatureField, subject_id: &str, model_id: &str) -> Result<Parcellation> {
    if features.k() != model.network.k {
        return Err(Error::Shape(format!("features have K={}, model expects K={}", features.k(), model.network.k)));
    }
    let net = Network::new(model.network.clone())?;
    let vectors: Vec<&[f64]> = features.vectors().collect();
    let latents = net.encode_vectors(&model.params, &vectors)?;
    let labels = assign(&latents, &model.centroids).into_iter().map(|a| a as u32).collect();
    Parcellation::new(features.mask().clone(), labels, model.n_parcels(), subject_id.into(), model_id.into())
}
