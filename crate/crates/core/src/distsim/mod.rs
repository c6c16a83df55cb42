//! Deterministic in-process simulation of a data-parallel cluster.
//!
//! Workers run one after another in index order and every collective reduces
//! in that order, so a step produces bit-identical results on every run.
//! The training algorithms live behind [`DistAlgorithm`] and are looked up by
//! name through an [`AlgorithmRegistry`].

mod algorithms;
mod collective;
mod schedule;

pub use algorithms::{AlgorithmRegistry, DistAlgorithm, DpKfac, MpdKfac, MpdVariant, Ssgd};
pub use collective::{all_reduce_avg, all_reduce_avg_fused, broadcast, CollectiveLog, CommStage};
pub use schedule::{lr_schedule, LrSchedule};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kfac::{FactorState, KfacHyper};
use crate::model::{Batch, MomentumState, Network};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Ssgd,
    MpdKfacCo,
    MpdKfacMo,
    DpKfac,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 4] = [
        AlgorithmKind::Ssgd,
        AlgorithmKind::MpdKfacCo,
        AlgorithmKind::MpdKfacMo,
        AlgorithmKind::DpKfac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::Ssgd => "ssgd",
            AlgorithmKind::MpdKfacCo => "mpd_kfac_co",
            AlgorithmKind::MpdKfacMo => "mpd_kfac_mo",
            AlgorithmKind::DpKfac => "dp_kfac",
        }
    }

    pub fn uses_kfac(self) -> bool {
        self != AlgorithmKind::Ssgd
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown algorithm `{s}` (expected one of: ssgd, mpd_kfac_co, mpd_kfac_mo, dp_kfac)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardPolicy {
    /// Contiguous equal splits of the global batch.
    Disjoint,
    /// Every worker sees the whole batch.
    Replicate,
}

impl FromStr for ShardPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(ShardPolicy::Disjoint),
            "replicate" => Ok(ShardPolicy::Replicate),
            other => Err(Error::Argument(format!(
                "unknown shard policy `{other}` (expected disjoint or replicate)"
            ))),
        }
    }
}

impl fmt::Display for ShardPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShardPolicy::Disjoint => "disjoint",
            ShardPolicy::Replicate => "replicate",
        })
    }
}

/// Round-robin layer partition: worker `p` owns layers `p, p+P, p+2P, …`
/// (0-based).
pub fn assign_layers_round_robin(layers: usize, workers: usize) -> Vec<Vec<usize>> {
    let mut assignment = vec![Vec::new(); workers.max(1)];
    for l in 0..layers {
        assignment[l % workers.max(1)].push(l);
    }
    assignment
}

pub fn shard_batch(batch: &Batch, workers: usize, policy: ShardPolicy) -> Result<Vec<Batch>> {
    if workers == 0 {
        return Err(Error::Argument("cannot shard across zero workers".into()));
    }
    match policy {
        ShardPolicy::Replicate => Ok(vec![batch.clone(); workers]),
        ShardPolicy::Disjoint => {
            let b = batch.len();
            if !b.is_multiple_of(workers) {
                return Err(Error::Argument(format!(
                    "batch of {b} samples cannot be split evenly across {workers} workers"
                )));
            }
            let per = b / workers;
            Ok((0..workers).map(|p| batch.slice(p * per, per)).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub workers: usize,
    /// `assignment[p]` lists the layers worker `p` owns.
    pub assignment: Vec<Vec<usize>>,
    pub algorithm: AlgorithmKind,
}

impl ClusterConfig {
    pub fn round_robin(layers: usize, workers: usize, algorithm: AlgorithmKind) -> Self {
        Self {
            workers,
            assignment: assign_layers_round_robin(layers, workers),
            algorithm,
        }
    }

    /// Checks that the assignment partitions `0..layers` across `workers` sets.
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Argument("cluster needs at least one worker".into()));
        }
        if self.assignment.len() != self.workers {
            return Err(Error::Argument(format!(
                "assignment has {} sets for {} workers",
                self.assignment.len(),
                self.workers
            )));
        }
        let mut seen = vec![false; layers];
        for (p, set) in self.assignment.iter().enumerate() {
            for &l in set {
                if l >= layers {
                    return Err(Error::Argument(format!("worker {p} assigned unknown layer {l}")));
                }
                if std::mem::replace(&mut seen[l], true) {
                    return Err(Error::Argument(format!("layer {l} assigned to more than one worker")));
                }
            }
        }
        if let Some(l) = seen.iter().position(|&s| !s) {
            return Err(Error::Argument(format!("layer {l} is not assigned to any worker")));
        }
        Ok(())
    }

    pub fn owner(&self, layer: usize) -> usize {
        self.assignment
            .iter()
            .position(|s| s.contains(&layer))
            .expect("validated partition")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub replica: Network,
    /// Curvature state for the layers this worker tracks.
    pub factors: BTreeMap<usize, FactorState>,
    pub momentum: MomentumState,
}

/// Everything a step needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub t: u64,
    pub lr: f64,
    pub momentum: f64,
    pub hyper: KfacHyper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean of the workers' local batch losses.
    pub loss: f64,
    pub log: CollectiveLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub config: ClusterConfig,
    pub workers: Vec<WorkerState>,
    /// For the latest step: `trace[layer]` lists the workers that
    /// preconditioned that layer.
    #[serde(skip)]
    pub precondition_trace: Vec<Vec<usize>>,
}

impl Cluster {
    /// Replicates `net` onto every worker and allocates the factor state the
    /// algorithm keeps.
    pub fn new(net: &Network, config: ClusterConfig, algorithm: &dyn DistAlgorithm) -> Result<Self> {
        config.validate(net.num_layers())?;
        let workers = (0..config.workers)
            .map(|p| {
                let factors = algorithm
                    .tracked_layers(p, &config, net.num_layers())
                    .into_iter()
                    .map(|l| (l, FactorState::for_weights(&net.layers[l].weights)))
                    .collect();
                WorkerState {
                    replica: net.clone(),
                    factors,
                    momentum: MomentumState::zeros_like(net),
                }
            })
            .collect();
        Ok(Self {
            config,
            workers,
            precondition_trace: Vec::new(),
        })
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn num_layers(&self) -> usize {
        self.workers[0].replica.num_layers()
    }

    /// Worker 0's replica; all replicas agree after every completed step.
    pub fn network(&self) -> &Network {
        &self.workers[0].replica
    }

    /// Largest elementwise weight difference between any replica and worker 0.
    pub fn replica_divergence(&self) -> f64 {
        let reference = &self.workers[0].replica;
        self.workers[1..]
            .iter()
            .flat_map(|w| w.replica.layers.iter().zip(&reference.layers))
            .map(|(a, b)| a.weights.max_abs_diff(&b.weights).expect("same architecture"))
            .fold(0.0, f64::max)
    }

    /// Runs forward and backward on every worker's shard, returning the local
    /// losses and gradients.
    pub(crate) fn local_gradients(&mut self, shards: &[Batch]) -> Result<(Vec<f64>, Vec<Vec<Matrix>>)> {
        if shards.len() != self.workers.len() {
            return Err(Error::Argument(format!(
                "{} shards for {} workers",
                shards.len(),
                self.workers.len()
            )));
        }
        let mut losses = Vec::with_capacity(shards.len());
        let mut grads = Vec::with_capacity(shards.len());
        for (p, (worker, shard)) in self.workers.iter_mut().zip(shards).enumerate() {
            let loss = worker.replica.forward(shard).map_err(|e| e.at_worker(p))?;
            grads.push(worker.replica.backward(shard).map_err(|e| e.at_worker(p))?);
            losses.push(loss);
        }
        Ok((losses, grads))
    }

    /// Applies the same update on every worker.
    pub(crate) fn apply_update(&mut self, per_worker: &[Vec<Matrix>], params: &StepParams) -> Result<()> {
        for (worker, update) in self.workers.iter_mut().zip(per_worker) {
            crate::model::sgd_step(&mut worker.replica, update, params.lr, &mut worker.momentum, params.momentum)?;
        }
        Ok(())
    }
}

pub(crate) fn mean_loss(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Per-layer element counts `(N_g, N_f)` from a weight shape.
pub(crate) fn layer_elems(w: &Matrix) -> (u64, u64) {
    let (d_out, d_in) = (w.rows() as u64, w.cols() as u64);
    (d_out * d_in, d_in * d_in + d_out * d_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Targets;

    #[test]
    fn round_robin_examples() {
        assert_eq!(assign_layers_round_robin(4, 4), vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(assign_layers_round_robin(5, 2), vec![vec![0, 2, 4], vec![1, 3]]);
        assert_eq!(assign_layers_round_robin(3, 1), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn round_robin_is_balanced_partition() {
        for layers in 1..12 {
            for workers in 1..10 {
                let cfg = ClusterConfig::round_robin(layers, workers, AlgorithmKind::DpKfac);
                cfg.validate(layers).unwrap();
                let sizes: Vec<usize> = cfg.assignment.iter().map(Vec::len).collect();
                let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
                assert!(spread <= 1);
            }
        }
    }

    #[test]
    fn invalid_partitions_rejected() {
        let overlap = ClusterConfig {
            workers: 2,
            assignment: vec![vec![0, 1], vec![1]],
            algorithm: AlgorithmKind::DpKfac,
        };
        assert!(overlap.validate(2).is_err());
        let missing = ClusterConfig {
            workers: 2,
            assignment: vec![vec![0], vec![]],
            algorithm: AlgorithmKind::DpKfac,
        };
        assert!(missing.validate(2).is_err());
    }

    fn batch(b: usize) -> Batch {
        Batch::new(
            Matrix::from_fn(2, b, |i, j| (i * 100 + j) as f64),
            Targets::Classes((0..b).map(|j| j % 2).collect()),
        )
        .unwrap()
    }

    #[test]
    fn disjoint_shards_are_contiguous() {
        let shards = shard_batch(&batch(8), 2, ShardPolicy::Disjoint).unwrap();
        assert_eq!(shards[0], batch(8).slice(0, 4));
        assert_eq!(shards[1].inputs[(0, 0)], 4.0);
        assert!(matches!(shard_batch(&batch(7), 2, ShardPolicy::Disjoint), Err(Error::Argument(_))));
    }

    #[test]
    fn replicate_copies_everything() {
        let shards = shard_batch(&batch(5), 3, ShardPolicy::Replicate).unwrap();
        assert!(shards.iter().all(|s| s == &batch(5)));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for k in AlgorithmKind::ALL {
            assert_eq!(k.name().parse::<AlgorithmKind>().unwrap(), k);
        }
        assert!("kfac".parse::<AlgorithmKind>().is_err());
    }
}
