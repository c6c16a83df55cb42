//! Binary checkpoints of a simulated cluster.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "DKFACKPT"
//! version    u32      currently 1
//! iteration  u64      next iteration to run
//! workers    u32
//! layers     u32
//! per worker:
//!   weights   layers × matrix
//!   momentum  layers × matrix
//!   count     u32
//!   count × (layer u32, factor state)
//! ```
//!
//! A matrix is `rows u32, cols u32` followed by row-major `f64` values.
//! Optional fields carry a one-byte presence tag.

use std::path::Path;

use crate::distsim::Cluster;
use crate::error::{Error, Result};
use crate::kfac::FactorState;
use crate::numerics::{EigenPair, Matrix};

pub const MAGIC: &[u8; 8] = b"DKFACKPT";
pub const VERSION: u32 = 1;

/// Cluster state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub workers: Vec<WorkerSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSnapshot {
    pub weights: Vec<Matrix>,
    pub momentum: Vec<Matrix>,
    pub factors: Vec<(usize, FactorState)>,
}

impl Checkpoint {
    pub fn capture(cluster: &Cluster, iteration: u64) -> Self {
        Self {
            iteration,
            workers: cluster
                .workers
                .iter()
                .map(|w| WorkerSnapshot {
                    weights: w.replica.weights(),
                    momentum: w.momentum.buffers.clone(),
                    factors: w.factors.iter().map(|(&l, s)| (l, s.clone())).collect(),
                })
                .collect(),
        }
    }

    /// Overwrites a freshly built cluster of the same shape with this state.
    pub fn restore(&self, cluster: &mut Cluster) -> Result<()> {
        if self.workers.len() != cluster.num_workers() {
            return Err(Error::Data(format!(
                "checkpoint holds {} workers, run has {}",
                self.workers.len(),
                cluster.num_workers()
            )));
        }
        for (p, (snap, worker)) in self.workers.iter().zip(&mut cluster.workers).enumerate() {
            if snap.weights.len() != worker.replica.num_layers() || snap.momentum.len() != snap.weights.len() {
                return Err(Error::Data(format!("worker {p}: checkpoint layer count differs from the network")));
            }
            worker.replica.set_weights(&snap.weights)?;
            for (buf, m) in worker.momentum.buffers.iter_mut().zip(&snap.momentum) {
                buf.check_same_shape(m, "restore momentum")?;
                *buf = m.clone();
            }
            let tracked: Vec<usize> = worker.factors.keys().copied().collect();
            let stored: Vec<usize> = snap.factors.iter().map(|(l, _)| *l).collect();
            if tracked != stored {
                return Err(Error::Data(format!(
                    "worker {p}: checkpoint tracks layers {stored:?}, algorithm expects {tracked:?}"
                )));
            }
            for (l, state) in &snap.factors {
                let slot = worker.factors.get_mut(l).expect("keys compared above");
                slot.a.check_same_shape(&state.a, "restore factors")?;
                slot.g.check_same_shape(&state.g, "restore factors")?;
                *slot = state.clone();
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.iteration);
        w.u32(self.workers.len() as u32);
        w.u32(self.workers.first().map_or(0, |s| s.weights.len()) as u32);
        for snap in &self.workers {
            snap.weights.iter().for_each(|m| w.matrix(m));
            snap.momentum.iter().for_each(|m| w.matrix(m));
            w.u32(snap.factors.len() as u32);
            for (l, s) in &snap.factors {
                w.u32(*l as u32);
                w.factor_state(s);
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err_at(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(8, format!("unsupported checkpoint version {version}")));
        }
        let iteration = r.u64()?;
        let workers = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let mut snaps = Vec::with_capacity(workers.min(1024));
        for _ in 0..workers {
            let weights = (0..layers).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
            let momentum = (0..layers).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
            let count = r.u32()? as usize;
            let mut factors = Vec::new();
            for _ in 0..count {
                let l = r.u32()? as usize;
                factors.push((l, r.factor_state()?));
            }
            snaps.push(WorkerSnapshot { weights, momentum, factors });
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { iteration, workers: snaps })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        self.f64s(m.as_slice());
    }
    fn opt<T>(&mut self, v: &Option<T>, f: impl FnOnce(&mut Self, &T)) {
        match v {
            Some(x) => {
                self.u8(1);
                f(self, x);
            }
            None => self.u8(0),
        }
    }
    fn eig(&mut self, e: &EigenPair) {
        self.matrix(&e.vectors);
        self.u32(e.values.len() as u32);
        self.f64s(&e.values);
    }
    fn factor_state(&mut self, s: &FactorState) {
        self.matrix(&s.a);
        self.matrix(&s.g);
        self.opt(&s.a_eig, Self::eig);
        self.opt(&s.g_eig, Self::eig);
        self.opt(&s.a_damped_inv, Self::matrix);
        self.opt(&s.g_damped_inv, Self::matrix);
        self.opt(&s.last_factor_update, |w, &t| w.u64(t));
        self.opt(&s.last_inverse_update, |w, &t| w.u64(t));
        self.u8(s.initialized as u8);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err_at(self.pos, format!("truncated checkpoint: need {n} more bytes"))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err_at(self.pos, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let at = self.pos;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| self.err_at(at, "matrix size overflow"))?;
        let data = self.f64s(n)?;
        Matrix::from_vec(rows, cols, data).map_err(|e| self.err_at(at, e.to_string()))
    }
    fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<Option<T>> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(None),
            1 => f(self).map(Some),
            t => Err(self.err_at(at, format!("bad presence tag {t}"))),
        }
    }
    fn eig(&mut self) -> Result<EigenPair> {
        let vectors = self.matrix()?;
        let n = self.u32()? as usize;
        Ok(EigenPair { vectors, values: self.f64s(n)? })
    }
    fn factor_state(&mut self) -> Result<FactorState> {
        Ok(FactorState {
            a: self.matrix()?,
            g: self.matrix()?,
            a_eig: self.opt(Self::eig)?,
            g_eig: self.opt(Self::eig)?,
            a_damped_inv: self.opt(Self::matrix)?,
            g_damped_inv: self.opt(Self::matrix)?,
            last_factor_update: self.opt(Self::u64)?,
            last_inverse_update: self.opt(Self::u64)?,
            initialized: self.u8()? != 0,
        })
    }
}
