//! K-FAC preconditioning: Kronecker factor estimation, running averages,
//! inverse-based and eigen-based damping, and the dense oracles they are
//! checked against.
//!
//! A layer gradient `∇L` has shape `d_out × d_in`. Its Fisher block is
//! approximated by `A ⊗ G` with `A = E[a aᵀ]` (`d_in × d_in`) and
//! `G = E[g gᵀ]` (`d_out × d_out`), acting on the column-stacked `vec(∇L)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sgd_step, Batch, MomentumState, Network};
use crate::numerics::{matmul, matmul_nt, sym_eig, sym_inverse, EigenPair, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvType {
    /// Damped factor inverses with the trace-ratio split `π`.
    Inverse,
    /// Eigendecompositions with damping added to the Kronecker spectrum.
    #[default]
    Eigen,
}

impl FromStr for InvType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(InvType::Inverse),
            "eigen" => Ok(InvType::Eigen),
            other => Err(Error::Argument(format!(
                "unknown inv_type `{other}` (expected inverse or eigen)"
            ))),
        }
    }
}

impl fmt::Display for InvType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvType::Inverse => "inverse",
            InvType::Eigen => "eigen",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KfacHyper {
    /// Tikhonov damping `γ`.
    pub damping: f64,
    /// Weight `ξ` of the newest factor estimate in the running average.
    pub running_avg: f64,
    pub inv_type: InvType,
    /// Factor-update interval in iterations.
    pub factor_freq: u64,
    /// Inverse / eigendecomposition recompute interval. `u64::MAX` means
    /// "only at t = 0".
    pub inverse_freq: u64,
}

impl Default for KfacHyper {
    fn default() -> Self {
        Self {
            damping: 0.03,
            running_avg: 0.95,
            inv_type: InvType::Eigen,
            factor_freq: 1,
            inverse_freq: 1,
        }
    }
}

impl KfacHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return Err(Error::Argument(format!("damping must be >= 0, got {}", self.damping)));
        }
        if !(self.running_avg > 0.0 && self.running_avg <= 1.0) {
            return Err(Error::Argument(format!(
                "running average weight must lie in (0, 1], got {}",
                self.running_avg
            )));
        }
        if self.factor_freq == 0 || self.inverse_freq == 0 {
            return Err(Error::Argument("factor and inverse frequencies must be >= 1".into()));
        }
        Ok(())
    }

    /// Iteration 0 always refreshes so an inverse exists before first use.
    pub fn updates_factors_at(&self, t: u64) -> bool {
        t.is_multiple_of(self.factor_freq)
    }

    pub fn updates_inverse_at(&self, t: u64) -> bool {
        t.is_multiple_of(self.inverse_freq)
    }
}

/// Per-layer curvature state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    pub a: Matrix,
    pub g: Matrix,
    pub a_eig: Option<EigenPair>,
    pub g_eig: Option<EigenPair>,
    pub a_damped_inv: Option<Matrix>,
    pub g_damped_inv: Option<Matrix>,
    pub last_factor_update: Option<u64>,
    pub last_inverse_update: Option<u64>,
    pub initialized: bool,
}

impl FactorState {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            a: Matrix::zeros(d_in, d_in),
            g: Matrix::zeros(d_out, d_out),
            a_eig: None,
            g_eig: None,
            a_damped_inv: None,
            g_damped_inv: None,
            last_factor_update: None,
            last_inverse_update: None,
            initialized: false,
        }
    }

    /// State sized for a weight matrix of shape `d_out × d_in`.
    pub fn for_weights(w: &Matrix) -> Self {
        Self::new(w.cols(), w.rows())
    }

    /// Folds freshly estimated factors into the running average.
    ///
    /// The first fold assigns; later folds compute `ξ·new + (1−ξ)·old`.
    pub fn update_running_average(&mut self, a_new: &Matrix, g_new: &Matrix, xi: f64, t: u64) -> Result<()> {
        self.a.check_same_shape(a_new, "update_running_average")?;
        self.g.check_same_shape(g_new, "update_running_average")?;
        if self.initialized {
            self.a = blend(&self.a, a_new, xi);
            self.g = blend(&self.g, g_new, xi);
        } else {
            self.a = a_new.clone();
            self.g = g_new.clone();
            self.initialized = true;
        }
        self.last_factor_update = Some(t);
        Ok(())
    }

    /// Recomputes the damped inverses or eigendecompositions from the current
    /// averaged factors.
    pub fn refresh_inverse(&mut self, hyper: &KfacHyper, t: u64) -> Result<()> {
        if !self.initialized {
            return Err(Error::Ordering(
                "inverse requested before any factor statistics were folded in".into(),
            ));
        }
        match hyper.inv_type {
            InvType::Inverse => {
                let (g_inv, a_inv) = damped_inverses(&self.a, &self.g, hyper.damping)?;
                self.g_damped_inv = Some(g_inv);
                self.a_damped_inv = Some(a_inv);
                self.a_eig = None;
                self.g_eig = None;
            }
            InvType::Eigen => {
                self.a_eig = Some(sym_eig(&self.a)?);
                self.g_eig = Some(sym_eig(&self.g)?);
                self.a_damped_inv = None;
                self.g_damped_inv = None;
            }
        }
        self.last_inverse_update = Some(t);
        Ok(())
    }

    /// Preconditions `grad` with the most recent inverses or eigenbases.
    pub fn precondition(&self, grad: &Matrix, hyper: &KfacHyper) -> Result<Matrix> {
        match hyper.inv_type {
            InvType::Inverse => match (&self.g_damped_inv, &self.a_damped_inv) {
                (Some(g_inv), Some(a_inv)) => apply_inverses(g_inv, a_inv, grad),
                _ => Err(Error::Ordering("no damped inverses computed yet".into())),
            },
            InvType::Eigen => match (&self.a_eig, &self.g_eig) {
                (Some(a_eig), Some(g_eig)) => precondition_eigen(a_eig, g_eig, grad, hyper.damping),
                _ => Err(Error::Ordering("no eigendecompositions computed yet".into())),
            },
        }
    }

    /// Number of values a worker must ship to hand this layer's inverse
    /// representation to another worker.
    pub fn inverse_payload(&self, inv_type: InvType) -> usize {
        let (da, dg) = (self.a.rows(), self.g.rows());
        match inv_type {
            InvType::Inverse => da * da + dg * dg,
            InvType::Eigen => da * da + dg * dg + da + dg,
        }
    }
}

fn blend(old: &Matrix, new: &Matrix, xi: f64) -> Matrix {
    old.zip_with(new, "blend", |o, n| xi * n + (1.0 - xi) * o)
        .expect("shapes checked by caller")
}

/// `A = (1/B) Σ a aᵀ`, `G = (1/B) Σ g gᵀ` over the batch columns.
pub fn compute_factors(inputs: &Matrix, preact_grads: &Matrix) -> Result<(Matrix, Matrix)> {
    let b = inputs.cols();
    if b == 0 || preact_grads.cols() == 0 {
        return Err(Error::Argument("factor estimation needs a nonempty batch".into()));
    }
    if preact_grads.cols() != b {
        return Err(Error::shape(
            "compute_factors",
            format!("{b} input columns but {} gradient columns", preact_grads.cols()),
        ));
    }
    let inv_b = 1.0 / b as f64;
    let a = matmul_nt(inputs, inputs)?.scale(inv_b);
    let g = matmul_nt(preact_grads, preact_grads)?.scale(inv_b);
    Ok((a, g))
}

/// `π = √(Tr(A)/dim A) / √(Tr(G)/dim G)`.
pub fn pi_scalar(a: &Matrix, g: &Matrix) -> Result<f64> {
    let ta = a.trace();
    let tg = g.trace();
    if !(ta > 0.0) || !(tg > 0.0) {
        return Err(Error::numeric(format!(
            "degenerate factor: Tr(A) = {ta:e}, Tr(G) = {tg:e}"
        )));
    }
    Ok((ta / a.rows() as f64).sqrt() / (tg / g.rows() as f64).sqrt())
}

/// `((G + (√γ/π)·I)⁻¹, (A + π√γ·I)⁻¹)`.
pub fn damped_inverses(a: &Matrix, g: &Matrix, gamma: f64) -> Result<(Matrix, Matrix)> {
    let pi = pi_scalar(a, g)?;
    let root = gamma.sqrt();
    let g_inv = sym_inverse(&g.add_diag(root / pi)?)
        .map_err(|e| relabel(e, "G factor"))?;
    let a_inv = sym_inverse(&a.add_diag(pi * root)?)
        .map_err(|e| relabel(e, "A factor"))?;
    Ok((g_inv, a_inv))
}

fn relabel(e: Error, which: &str) -> Error {
    match e {
        Error::Numeric { detail, site } => Error::Numeric {
            detail: format!("{which}: {detail}"),
            site,
        },
        other => other,
    }
}

fn apply_inverses(g_inv: &Matrix, a_inv: &Matrix, grad: &Matrix) -> Result<Matrix> {
    matmul(&matmul(g_inv, grad)?, a_inv)
}

/// `(G + (√γ/π)I)⁻¹ · grad · (A + π√γI)⁻¹`.
pub fn precondition_inverse(a: &Matrix, g: &Matrix, grad: &Matrix, gamma: f64) -> Result<Matrix> {
    check_grad_shape(a.rows(), g.rows(), grad)?;
    let (g_inv, a_inv) = damped_inverses(a, g, gamma)?;
    apply_inverses(&g_inv, &a_inv, grad)
}

/// `Q_G · [(Q_Gᵀ · grad · Q_A) ⊘ (v_G v_Aᵀ + γ)] · Q_Aᵀ` with eigenvalues
/// clamped at zero.
pub fn precondition_eigen(a_eig: &EigenPair, g_eig: &EigenPair, grad: &Matrix, gamma: f64) -> Result<Matrix> {
    check_grad_shape(a_eig.dim(), g_eig.dim(), grad)?;
    let va = a_eig.clamped_values();
    let vg = g_eig.clamped_values();
    let rotated = matmul(&matmul(&g_eig.vectors.transpose(), grad)?, &a_eig.vectors)?;
    let mut scaled = rotated;
    for k in 0..vg.len() {
        for l in 0..va.len() {
            let denom = vg[k] * va[l] + gamma;
            if !(denom > 0.0) {
                return Err(Error::numeric(format!(
                    "eigen damping denominator {denom:e} at ({k}, {l}) is not positive"
                )));
            }
            scaled[(k, l)] /= denom;
        }
    }
    matmul(&matmul(&g_eig.vectors, &scaled)?, &a_eig.vectors.transpose())
}

fn check_grad_shape(d_in: usize, d_out: usize, grad: &Matrix) -> Result<()> {
    if grad.shape() != (d_out, d_in) {
        return Err(Error::shape(
            "precondition",
            format!(
                "gradient is {}x{} but factors imply {d_out}x{d_in}",
                grad.rows(),
                grad.cols()
            ),
        ));
    }
    Ok(())
}

/// Which stages a layer step executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerStepReport {
    pub factors_updated: bool,
    pub inverse_updated: bool,
}

/// One K-FAC step for a single layer.
///
/// Folds new factors every `factor_freq` iterations, recomputes inverses every
/// `inverse_freq` iterations, and always preconditions with the latest
/// (possibly stale) inverses. `stats` is `(captured inputs, captured
/// pre-activation gradients)`; it is only read on factor-update iterations.
pub fn kfac_layer_step(
    state: &mut FactorState,
    stats: (&Matrix, &Matrix),
    grad: &Matrix,
    hyper: &KfacHyper,
    t: u64,
) -> Result<(Matrix, LayerStepReport)> {
    let mut report = LayerStepReport::default();
    if hyper.updates_factors_at(t) {
        let (a_new, g_new) = compute_factors(stats.0, stats.1)?;
        state.update_running_average(&a_new, &g_new, hyper.running_avg, t)?;
        report.factors_updated = true;
    }
    if hyper.updates_inverse_at(t) {
        state.refresh_inverse(hyper, t)?;
        report.inverse_updated = true;
    }
    let pre = state.precondition(grad, hyper)?;
    Ok((pre, report))
}

/// Single-process K-FAC with heavy-ball momentum on the preconditioned
/// gradient. The reference every distributed variant must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfacOptimizer {
    pub hyper: KfacHyper,
    pub states: Vec<FactorState>,
    pub momentum: MomentumState,
}

impl KfacOptimizer {
    pub fn new(net: &Network, hyper: KfacHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            states: net.layers.iter().map(|l| FactorState::for_weights(&l.weights)).collect(),
            momentum: MomentumState::zeros_like(net),
        })
    }

    /// Forward, backward, precondition, update. Returns the batch loss.
    pub fn step(&mut self, net: &mut Network, batch: &Batch, t: u64, lr: f64, mu: f64) -> Result<f64> {
        let loss = net.forward(batch)?;
        let grads = net.backward(batch)?;
        let mut pre = Vec::with_capacity(grads.len());
        for (i, (state, grad)) in self.states.iter_mut().zip(&grads).enumerate() {
            let layer = &net.layers[i];
            let stats = (
                layer.captured_input.as_ref().expect("forward ran"),
                layer.captured_preact_grad.as_ref().expect("backward ran"),
            );
            let (p, _) = kfac_layer_step(state, stats, grad, &self.hyper, t).map_err(|e| e.at_layer(i))?;
            pre.push(p);
        }
        sgd_step(net, &pre, lr, &mut self.momentum, mu)?;
        Ok(loss)
    }
}

/// Dense Kronecker oracles. These materialize `A ⊗ G` and are only meant for
/// small layers.
pub mod oracle {
    use super::*;
    use crate::numerics::{kron, solve, unvec, vec};

    /// `unvec((A⊗G + γI)⁻¹ vec(grad))` by a dense solve.
    pub fn exact_precondition(a: &Matrix, g: &Matrix, grad: &Matrix, gamma: f64) -> Result<Matrix> {
        check_grad_shape(a.rows(), g.rows(), grad)?;
        let f = kron(a, g)?.add_diag(gamma)?;
        let x = solve(&f, &vec(grad))?;
        unvec(&x, grad.rows(), grad.cols())
    }

    /// `unvec(((A+π√γI) ⊗ (G+(√γ/π)I))⁻¹ vec(grad))` by a dense solve.
    pub fn factored_damped_precondition(a: &Matrix, g: &Matrix, grad: &Matrix, gamma: f64) -> Result<Matrix> {
        check_grad_shape(a.rows(), g.rows(), grad)?;
        let pi = pi_scalar(a, g)?;
        let root = gamma.sqrt();
        let f = kron(&a.add_diag(pi * root)?, &g.add_diag(root / pi)?)?;
        let x = solve(&f, &vec(grad))?;
        unvec(&x, grad.rows(), grad.cols())
    }
}

pub use oracle::exact_precondition as exact_precondition_oracle;
