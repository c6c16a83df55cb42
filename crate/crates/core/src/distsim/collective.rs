//! Simulated collectives with element-count accounting.
//!
//! Reductions run in worker-index order so results are reproducible bit for
//! bit. Volumes follow the usual ring costs: an all-reduce of `N` values over
//! `P` workers moves `2(P−1)·N` values and a broadcast moves `(P−1)·N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-step counters, all in element counts. Compute counters are the
/// maximum over workers; communication counters are total volume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveLog {
    pub gradcomp: u64,
    pub factorcomp: u64,
    pub inversecomp: u64,
    pub gradcomm: u64,
    pub factorcomm: u64,
    pub predcomm: u64,
    pub inversecomm: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommStage {
    Grad,
    Factor,
    Pred,
    Inverse,
}

impl CollectiveLog {
    pub fn record(&mut self, stage: CommStage, elems: u64) {
        let slot = match stage {
            CommStage::Grad => &mut self.gradcomm,
            CommStage::Factor => &mut self.factorcomm,
            CommStage::Pred => &mut self.predcomm,
            CommStage::Inverse => &mut self.inversecomm,
        };
        *slot += elems;
    }
}

/// Elementwise mean of one tensor per worker.
///
/// Computed as `x₀ + (Σ_{p≥1} (x_p − x₀)) / P` in worker order, so identical
/// inputs reduce to exactly the input.
pub fn all_reduce_avg(tensors: &[Matrix]) -> Result<Matrix> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Argument("all-reduce over zero workers".into()))?;
    for (p, t) in tensors.iter().enumerate().skip(1) {
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "all_reduce_avg",
                format!(
                    "worker {p} holds {}x{}, worker 0 holds {}x{}",
                    t.rows(),
                    t.cols(),
                    first.rows(),
                    first.cols()
                ),
            ));
        }
    }
    let p = tensors.len() as f64;
    let mut deviation = vec![0.0; first.len()];
    for t in &tensors[1..] {
        for ((d, &x), &x0) in deviation.iter_mut().zip(t.as_slice()).zip(first.as_slice()) {
            *d += x - x0;
        }
    }
    let data = first
        .as_slice()
        .iter()
        .zip(&deviation)
        .map(|(&x0, &d)| x0 + d / p)
        .collect();
    Matrix::from_vec(first.rows(), first.cols(), data)
}

/// All-reduce of a list of tensors per worker, fused into one collective.
/// Logs `2(P−1)·N` with `N` the total element count of one worker's list.
pub fn all_reduce_avg_fused(
    per_worker: &[Vec<Matrix>],
    log: &mut CollectiveLog,
    stage: CommStage,
) -> Result<Vec<Matrix>> {
    let workers = per_worker.len();
    let count = per_worker.first().map_or(0, Vec::len);
    if let Some(p) = per_worker.iter().position(|v| v.len() != count) {
        return Err(Error::shape(
            "all_reduce_avg",
            format!("worker {p} contributes {} tensors, worker 0 contributes {count}", per_worker[p].len()),
        ));
    }
    let mut out = Vec::with_capacity(count);
    let mut volume = 0u64;
    for k in 0..count {
        let slice: Vec<Matrix> = per_worker.iter().map(|v| v[k].clone()).collect();
        let reduced = all_reduce_avg(&slice)?;
        volume += reduced.len() as u64;
        out.push(reduced);
    }
    log.record(stage, 2 * (workers as u64).saturating_sub(1) * volume);
    Ok(out)
}

/// Copies `tensor` from `root` to all `workers`. Logs `(P−1)·N`.
pub fn broadcast(
    root: usize,
    tensor: &Matrix,
    workers: usize,
    log: &mut CollectiveLog,
    stage: CommStage,
) -> Result<Vec<Matrix>> {
    if root >= workers {
        return Err(Error::Argument(format!(
            "broadcast root {root} out of range for {workers} workers"
        )));
    }
    log.record(stage, (workers as u64 - 1) * tensor.len() as u64);
    Ok(vec![tensor.clone(); workers])
}
