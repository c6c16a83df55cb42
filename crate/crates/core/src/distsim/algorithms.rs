use std::collections::BTreeMap;
use std::sync::Arc;

use super::collective::{all_reduce_avg_fused, broadcast, CollectiveLog, CommStage};
use super::{layer_elems, mean_loss, AlgorithmKind, Cluster, ClusterConfig, StepOutcome, StepParams};
use crate::error::{Error, Result};
use crate::kfac::{compute_factors, kfac_layer_step};
use crate::model::Batch;
use crate::numerics::Matrix;

/// A distributed training algorithm the cluster can execute.
pub trait DistAlgorithm: Send + Sync {
    fn kind(&self) -> AlgorithmKind;

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Layers whose factor state worker `p` keeps.
    fn tracked_layers(&self, worker: usize, config: &ClusterConfig, layers: usize) -> Vec<usize>;

    /// One synchronous iteration over the given per-worker shards.
    fn step(&self, cluster: &mut Cluster, shards: &[Batch], params: &StepParams) -> Result<StepOutcome>;
}

/// Name-keyed table of algorithm implementations.
#[derive(Clone, Default)]
pub struct AlgorithmRegistry {
    algorithms: BTreeMap<&'static str, Arc<dyn DistAlgorithm>>,
}

impl AlgorithmRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// S-SGD, both MPD-KFAC variants and DP-KFAC.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(Ssgd));
        r.register(Arc::new(MpdKfac::new(MpdVariant::CommOpt)));
        r.register(Arc::new(MpdKfac::new(MpdVariant::MemOpt)));
        r.register(Arc::new(DpKfac));
        r
    }

    pub fn register(&mut self, algorithm: Arc<dyn DistAlgorithm>) {
        self.algorithms.insert(algorithm.name(), algorithm);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn DistAlgorithm>> {
        self.algorithms.get(name).cloned().ok_or_else(|| {
            Error::Argument(format!(
                "no algorithm registered as `{name}` (available: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.algorithms.keys().copied().collect()
    }
}

/// Synchronous SGD: all-reduce the gradients, apply momentum SGD everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ssgd;

impl DistAlgorithm for Ssgd {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Ssgd
    }

    fn tracked_layers(&self, _: usize, _: &ClusterConfig, _: usize) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, cluster: &mut Cluster, shards: &[Batch], params: &StepParams) -> Result<StepOutcome> {
        let mut log = CollectiveLog::default();
        let (losses, grads) = cluster.local_gradients(shards)?;
        log.gradcomp = grad_elems(cluster);
        let agg = all_reduce_avg_fused(&grads, &mut log, CommStage::Grad)?;
        let p = cluster.num_workers();
        cluster.apply_update(&vec![agg; p], params)?;
        cluster.precondition_trace = vec![Vec::new(); cluster.num_layers()];
        Ok(StepOutcome {
            loss: mean_loss(&losses),
            log,
        })
    }
}

/// How MPD-KFAC hands preconditioning results around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpdVariant {
    /// Owners broadcast inverses; every worker preconditions every layer.
    CommOpt,
    /// Owners precondition and broadcast the preconditioned gradients.
    MemOpt,
}

/// K-FAC with globally all-reduced factors and inverse work split by layer.
#[derive(Debug, Clone, Copy)]
pub struct MpdKfac {
    pub variant: MpdVariant,
}

impl MpdKfac {
    pub fn new(variant: MpdVariant) -> Self {
        Self { variant }
    }
}

impl DistAlgorithm for MpdKfac {
    fn kind(&self) -> AlgorithmKind {
        match self.variant {
            MpdVariant::CommOpt => AlgorithmKind::MpdKfacCo,
            MpdVariant::MemOpt => AlgorithmKind::MpdKfacMo,
        }
    }

    fn tracked_layers(&self, _: usize, _: &ClusterConfig, layers: usize) -> Vec<usize> {
        (0..layers).collect()
    }

    fn step(&self, cluster: &mut Cluster, shards: &[Batch], params: &StepParams) -> Result<StepOutcome> {
        let hyper = &params.hyper;
        let t = params.t;
        let p_count = cluster.num_workers();
        let layers = cluster.num_layers();
        let mut log = CollectiveLog::default();

        let (losses, grads) = cluster.local_gradients(shards)?;
        log.gradcomp = grad_elems(cluster);
        let agg = all_reduce_avg_fused(&grads, &mut log, CommStage::Grad)?;

        if hyper.updates_factors_at(t) {
            // Every worker estimates factors for every layer; the raw batch
            // factors are averaged, then folded into the running average.
            let mut local = Vec::with_capacity(p_count);
            for (p, worker) in cluster.workers.iter().enumerate() {
                let mut mats = Vec::with_capacity(2 * layers);
                for (i, layer) in worker.replica.layers.iter().enumerate() {
                    let (a, g) = compute_factors(
                        layer.captured_input.as_ref().expect("forward ran"),
                        layer.captured_preact_grad.as_ref().expect("backward ran"),
                    )
                    .map_err(|e| e.at_worker(p).at_layer(i))?;
                    mats.push(a);
                    mats.push(g);
                }
                local.push(mats);
            }
            log.factorcomp = factor_elems(cluster, 0..layers);
            let global = all_reduce_avg_fused(&local, &mut log, CommStage::Factor)?;
            for worker in &mut cluster.workers {
                for (i, state) in worker.factors.iter_mut() {
                    state.update_running_average(&global[2 * i], &global[2 * i + 1], hyper.running_avg, t)?;
                }
            }
        }

        if hyper.updates_inverse_at(t) {
            let mut per_worker = vec![0u64; p_count];
            for i in 0..layers {
                let owner = cluster.config.owner(i);
                let state = cluster.workers[owner].factors.get_mut(&i).expect("mpd tracks all layers");
                state
                    .refresh_inverse(hyper, t)
                    .map_err(|e| e.at_worker(owner).at_layer(i))?;
                per_worker[owner] += state.a.len() as u64 + state.g.len() as u64;
                if self.variant == MpdVariant::CommOpt {
                    let fresh = state.clone();
                    let payload = fresh.inverse_payload(hyper.inv_type) as u64;
                    log.record(CommStage::Inverse, (p_count as u64 - 1) * payload);
                    for worker in &mut cluster.workers {
                        let s = worker.factors.get_mut(&i).expect("mpd tracks all layers");
                        s.a_eig = fresh.a_eig.clone();
                        s.g_eig = fresh.g_eig.clone();
                        s.a_damped_inv = fresh.a_damped_inv.clone();
                        s.g_damped_inv = fresh.g_damped_inv.clone();
                        s.last_inverse_update = fresh.last_inverse_update;
                    }
                }
            }
            log.inversecomp = per_worker.into_iter().max().unwrap_or(0);
        }

        let mut trace = vec![Vec::new(); layers];
        let updates: Vec<Vec<Matrix>> = match self.variant {
            MpdVariant::CommOpt => {
                let mut all = Vec::with_capacity(p_count);
                for (p, worker) in cluster.workers.iter().enumerate() {
                    let mut pre = Vec::with_capacity(layers);
                    for (i, g) in agg.iter().enumerate() {
                        let state = &worker.factors[&i];
                        pre.push(state.precondition(g, hyper).map_err(|e| e.at_worker(p).at_layer(i))?);
                        trace[i].push(p);
                    }
                    all.push(pre);
                }
                all
            }
            MpdVariant::MemOpt => {
                let mut all = vec![Vec::with_capacity(layers); p_count];
                for (i, g) in agg.iter().enumerate() {
                    let owner = cluster.config.owner(i);
                    let pre = cluster.workers[owner].factors[&i]
                        .precondition(g, hyper)
                        .map_err(|e| e.at_worker(owner).at_layer(i))?;
                    trace[i].push(owner);
                    for (dst, copy) in all.iter_mut().zip(broadcast(owner, &pre, p_count, &mut log, CommStage::Pred)?) {
                        dst.push(copy);
                    }
                }
                all
            }
        };
        cluster.apply_update(&updates, params)?;
        cluster.precondition_trace = trace;
        Ok(StepOutcome {
            loss: mean_loss(&losses),
            log,
        })
    }
}

/// Distributed preconditioning: each worker builds factors from its own
/// shard for the layers it owns, preconditions those layers' aggregated
/// gradients and broadcasts the results. Factors are never communicated.
#[derive(Debug, Clone, Copy, Default)]
pub struct DpKfac;

impl DistAlgorithm for DpKfac {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::DpKfac
    }

    fn tracked_layers(&self, worker: usize, config: &ClusterConfig, _: usize) -> Vec<usize> {
        config.assignment[worker].clone()
    }

    fn step(&self, cluster: &mut Cluster, shards: &[Batch], params: &StepParams) -> Result<StepOutcome> {
        let hyper = &params.hyper;
        let p_count = cluster.num_workers();
        let layers = cluster.num_layers();
        let mut log = CollectiveLog::default();

        let (losses, grads) = cluster.local_gradients(shards)?;
        log.gradcomp = grad_elems(cluster);
        let agg = all_reduce_avg_fused(&grads, &mut log, CommStage::Grad)?;

        let mut preconditioned: Vec<Option<(usize, Matrix)>> = vec![None; layers];
        let mut factor_work = vec![0u64; p_count];
        let mut inverse_work = vec![0u64; p_count];
        for (p, worker) in cluster.workers.iter_mut().enumerate() {
            for (&i, state) in worker.factors.iter_mut() {
                let layer = &worker.replica.layers[i];
                let stats = (
                    layer.captured_input.as_ref().expect("forward ran"),
                    layer.captured_preact_grad.as_ref().expect("backward ran"),
                );
                let (pre, report) = kfac_layer_step(state, stats, &agg[i], hyper, params.t)
                    .map_err(|e| e.at_worker(p).at_layer(i))?;
                let (_, nf) = layer_elems(&layer.weights);
                if report.factors_updated {
                    factor_work[p] += nf;
                }
                if report.inverse_updated {
                    inverse_work[p] += nf;
                }
                preconditioned[i] = Some((p, pre));
            }
        }
        log.factorcomp = factor_work.into_iter().max().unwrap_or(0);
        log.inversecomp = inverse_work.into_iter().max().unwrap_or(0);

        let mut updates = vec![Vec::with_capacity(layers); p_count];
        let mut trace = vec![Vec::new(); layers];
        for (i, slot) in preconditioned.into_iter().enumerate() {
            let (owner, pre) = slot.ok_or_else(|| Error::Argument(format!("layer {i} has no owner")))?;
            trace[i].push(owner);
            for (dst, copy) in updates.iter_mut().zip(broadcast(owner, &pre, p_count, &mut log, CommStage::Pred)?) {
                dst.push(copy);
            }
        }
        cluster.apply_update(&updates, params)?;
        cluster.precondition_trace = trace;
        Ok(StepOutcome {
            loss: mean_loss(&losses),
            log,
        })
    }
}

fn grad_elems(cluster: &Cluster) -> u64 {
    cluster.network().layers.iter().map(|l| layer_elems(&l.weights).0).sum()
}

fn factor_elems(cluster: &Cluster, layers: std::ops::Range<usize>) -> u64 {
    let net = cluster.network();
    layers.map(|i| layer_elems(&net.layers[i].weights).1).sum()
}
