//! Self-check suites run by `dkfac verify`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costmodel::{algorithm_cost_with, parse_manifest, totals, verify_counters, CostOptions, LayerDims, RESNET50_MANIFEST};
use crate::distsim::{shard_batch, AlgorithmKind, AlgorithmRegistry, Cluster, ClusterConfig, ShardPolicy, StepParams};
use crate::error::{Error, Result};
use crate::kfac::{exact_precondition_oracle, oracle, precondition_eigen, precondition_inverse, KfacHyper, KfacOptimizer};
use crate::model::{sgd_step, Activation, Batch, BiasMode, LossKind, MomentumState, Network, NetworkSpec, Targets};
use crate::numerics::{kron, matmul, matmul_nt, solve, sym_eig, unvec, vec, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Grad,
    Dist,
    Cost,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Suite::Oracle),
            "grad" => Ok(Suite::Grad),
            "dist" => Ok(Suite::Dist),
            "cost" => Ok(Suite::Cost),
            "all" => Ok(Suite::All),
            other => Err(Error::Argument(format!(
                "unknown suite `{other}` (expected oracle, grad, dist, cost or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    /// Records an error raised while running a check as a failure.
    fn push_result(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.push(name, ok, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let failed = self.failed().len();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Vectorization pair the oracle suite checks against the Kronecker identity.
#[derive(Clone, Copy)]
pub struct VecConvention {
    pub vec: fn(&Matrix) -> Matrix,
    pub unvec: fn(&Matrix, usize, usize) -> Result<Matrix>,
}

impl Default for VecConvention {
    fn default() -> Self {
        Self { vec, unvec }
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> VerifyReport {
    run_suite_with(suite, seed, VecConvention::default())
}

pub fn run_suite_with(suite: Suite, seed: u64, conv: VecConvention) -> VerifyReport {
    let mut report = VerifyReport::default();
    let all = suite == Suite::All;
    if all || suite == Suite::Oracle {
        oracle_suite(&mut report, seed, conv);
    }
    if all || suite == Suite::Grad {
        grad_suite(&mut report, seed);
    }
    if all || suite == Suite::Dist {
        dist_suite(&mut report, seed);
    }
    if all || suite == Suite::Cost {
        cost_suite(&mut report, seed);
    }
    report
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `B Bᵀ + shift·I` with `B` of shape `n × (n+2)`.
pub fn random_spd(n: usize, shift: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let b = random(n, n + 2, rng);
    matmul_nt(&b, &b).expect("conformable").add_diag(shift).expect("square")
}

fn oracle_suite(report: &mut VerifyReport, seed: u64, conv: VecConvention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let r = (|| -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (m, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let a = random(n, n, &mut rng);
            let g = random(m, m, &mut rng);
            let x = random(m, n, &mut rng);
            let lhs = matmul(&kron(&a, &g)?, &(conv.vec)(&x))?;
            let rhs = (conv.vec)(&matmul(&matmul(&g, &x)?, &a.transpose())?);
            worst = worst.max(lhs.max_abs_diff(&rhs)?);
            let back = (conv.unvec)(&(conv.vec)(&x), m, n)?;
            worst = worst.max(back.max_abs_diff(&x)?);
        }
        Ok((worst <= 1e-12, format!("(A⊗G)vec(X) vs vec(G X Aᵀ), max deviation {worst:.3e}")))
    })();
    report.push_result("mixed-product", r);

    let r = (|| -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let a = random_spd(n, 0.1, &mut rng);
            let g = random_spd(m, 0.1, &mut rng);
            let grad = random(m, n, &mut rng);
            let gamma = [1e-3, 0.03, 1.0][rng.gen_range(0..3)];
            let got = precondition_eigen(&sym_eig(&a)?, &sym_eig(&g)?, &grad, gamma)?;
            let f = kron(&a, &g)?.add_diag(gamma)?;
            let want = (conv.unvec)(&solve(&f, &(conv.vec)(&grad))?, m, n)?;
            worst = worst.max(got.max_abs_diff(&want)? / grad.max_abs().max(f64::MIN_POSITIVE));
        }
        Ok((worst <= 1e-10, format!("eigen damping vs dense (A⊗G+γI)⁻¹, max relative deviation {worst:.3e}")))
    })();
    report.push_result("eigen-vs-exact", r);

    let r = (|| -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let a = random_spd(n, 0.1, &mut rng);
            let g = random_spd(m, 0.1, &mut rng);
            let grad = random(m, n, &mut rng);
            let gamma = [1e-3, 0.03, 1.0][rng.gen_range(0..3)];
            let got = precondition_inverse(&a, &g, &grad, gamma)?;
            let want = oracle::factored_damped_precondition(&a, &g, &grad, gamma)?;
            worst = worst.max(got.max_abs_diff(&want)? / grad.max_abs().max(f64::MIN_POSITIVE));
        }
        Ok((worst <= 1e-10, format!("inverse damping vs factored oracle, max relative deviation {worst:.3e}")))
    })();
    report.push_result("inverse-vs-factored", r);

    let r = (|| -> Result<(bool, String)> {
        // The factored damping differs from exact damping at first order in
        // √γ, so the gap must shrink tenfold per hundredfold drop in γ.
        let mut gaps = [0.0f64; 3];
        for _ in 0..50 {
            let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let a = random_spd(n, 1.0, &mut rng);
            let g = random_spd(m, 1.0, &mut rng);
            let grad = random(m, n, &mut rng);
            for (slot, gamma) in gaps.iter_mut().zip([1e-8, 1e-10, 1e-12]) {
                let got = precondition_inverse(&a, &g, &grad, gamma)?;
                let want = exact_precondition_oracle(&a, &g, &grad, gamma)?;
                *slot = slot.max(got.max_abs_diff(&want)?);
            }
        }
        let ok = gaps.windows(2).all(|w| (w[1] / w[0] - 0.1).abs() <= 0.01);
        Ok((
            ok,
            format!(
                "inverse vs exact damping gap at γ=1e-8,1e-10,1e-12: {:.3e}, {:.3e}, {:.3e}",
                gaps[0], gaps[1], gaps[2]
            ),
        ))
    })();
    report.push_result("inverse-damping-limit", r);
}

/// Random tanh network and batch for gradient and simulator checks.
pub fn random_tanh_problem(rng: &mut ChaCha8Rng, max_depth: usize, max_dim: usize, batch: usize) -> Result<(Network, Batch)> {
    let depth = rng.gen_range(1..=max_depth);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=max_dim)).collect();
    let classification = rng.gen_bool(0.5) && *dims.last().unwrap() >= 2;
    let loss = if classification { LossKind::SoftmaxCrossEntropy } else { LossKind::MeanSquaredError };
    let bias = if rng.gen_bool(0.5) { BiasMode::Homogeneous } else { BiasMode::None };
    let spec = NetworkSpec::new(dims.clone(), Activation::Tanh, loss).with_bias(bias);
    let net = Network::init(spec, rng.gen())?;
    let out = *dims.last().unwrap();
    let inputs = random(dims[0], batch, rng);
    let targets = if classification {
        Targets::Classes((0..batch).map(|_| rng.gen_range(0..out)).collect())
    } else {
        Targets::Values(random(out, batch, rng))
    };
    Ok((net, Batch::new(inputs, targets)?))
}

/// Largest `|x−y| / max(|x|, |y|, 1e-3)` between analytic and central
/// finite-difference gradients.
pub fn gradient_check(net: &Network, batch: &Batch, h: f64) -> Result<f64> {
    let mut probe = net.clone();
    probe.forward(batch)?;
    let analytic = probe.backward(batch)?;
    let numeric = net.finite_diff_grad(batch, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.as_slice().iter().zip(n.as_slice()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

fn grad_suite(report: &mut VerifyReport, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let r = (|| -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (net, batch) = random_tanh_problem(&mut rng, 3, 8, 5)?;
            worst = worst.max(gradient_check(&net, &batch, 1e-5)?);
        }
        Ok((worst <= 1e-5, format!("50 random tanh nets, max relative error {worst:.3e}")))
    })();
    report.push_result("finite-difference", r);
}

/// dp_kfac with replicated shards against single-worker K-FAC; returns the
/// largest weight difference after `steps` steps.
pub fn replicate_equivalence(net: &Network, batch: &Batch, workers: usize, steps: u64, hyper: KfacHyper) -> Result<f64> {
    let registry = AlgorithmRegistry::with_defaults();
    let dp = registry.get("dp_kfac")?;
    let cfg = ClusterConfig::round_robin(net.num_layers(), workers, AlgorithmKind::DpKfac);
    let mut cluster = Cluster::new(net, cfg, dp.as_ref())?;
    let shards = shard_batch(batch, workers, ShardPolicy::Replicate)?;
    let mut single = net.clone();
    let mut opt = KfacOptimizer::new(net, hyper)?;
    for t in 0..steps {
        let params = StepParams { t, lr: 0.05, momentum: 0.9, hyper };
        dp.step(&mut cluster, &shards, &params)?;
        opt.step(&mut single, batch, t, params.lr, params.momentum)?;
        if cluster.replica_divergence() != 0.0 {
            return Ok(f64::INFINITY);
        }
    }
    max_weight_diff(cluster.network(), &single)
}

pub fn max_weight_diff(a: &Network, b: &Network) -> Result<f64> {
    let mut worst = 0.0f64;
    for (x, y) in a.layers.iter().zip(&b.layers) {
        worst = worst.max(x.weights.max_abs_diff(&y.weights)?);
    }
    Ok(worst)
}

/// S-SGD over disjoint equal shards against single-worker momentum SGD on
/// the full batch.
pub fn ssgd_equivalence(net: &Network, batch: &Batch, workers: usize, steps: u64) -> Result<f64> {
    let registry = AlgorithmRegistry::with_defaults();
    let alg = registry.get("ssgd")?;
    let cfg = ClusterConfig::round_robin(net.num_layers(), workers, AlgorithmKind::Ssgd);
    let mut cluster = Cluster::new(net, cfg, alg.as_ref())?;
    let shards = shard_batch(batch, workers, ShardPolicy::Disjoint)?;
    let mut single = net.clone();
    let mut momentum = MomentumState::zeros_like(net);
    for t in 0..steps {
        let params = StepParams { t, lr: 0.05, momentum: 0.9, hyper: KfacHyper::default() };
        alg.step(&mut cluster, &shards, &params)?;
        single.forward(batch)?;
        let grads = single.backward(batch)?;
        sgd_step(&mut single, &grads, params.lr, &mut momentum, params.momentum)?;
    }
    max_weight_diff(cluster.network(), &single)
}

/// Final weights of the two MPD-KFAC variants on the same data.
pub fn mpd_variant_gap(net: &Network, batch: &Batch, workers: usize, steps: u64, hyper: KfacHyper) -> Result<f64> {
    let registry = AlgorithmRegistry::with_defaults();
    let shards = shard_batch(batch, workers, ShardPolicy::Disjoint)?;
    let mut finals = Vec::new();
    for kind in [AlgorithmKind::MpdKfacCo, AlgorithmKind::MpdKfacMo] {
        let alg = registry.get(kind.name())?;
        let cfg = ClusterConfig::round_robin(net.num_layers(), workers, kind);
        let mut cluster = Cluster::new(net, cfg, alg.as_ref())?;
        for t in 0..steps {
            alg.step(&mut cluster, &shards, &StepParams { t, lr: 0.05, momentum: 0.9, hyper })?;
        }
        finals.push(cluster.network().clone());
    }
    max_weight_diff(&finals[0], &finals[1])
}

fn dist_suite(report: &mut VerifyReport, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let r = (|| -> Result<(bool, String)> {
        let (net, batch) = random_tanh_problem(&mut rng, 3, 6, 16)?;
        let mut worst = 0.0f64;
        for p in [2, 4, 8] {
            worst = worst.max(replicate_equivalence(&net, &batch, p, 20, KfacHyper::default())?);
        }
        Ok((worst == 0.0, format!("dp_kfac replicate vs single-worker K-FAC, 20 steps, P=2,4,8, max diff {worst:.3e}")))
    })();
    report.push_result("replicate-equivalence", r);

    let r = (|| -> Result<(bool, String)> {
        let (net, batch) = random_tanh_problem(&mut rng, 3, 6, 16)?;
        let mut worst = 0.0f64;
        for p in [2, 4, 8] {
            worst = worst.max(ssgd_equivalence(&net, &batch, p, 20)?);
        }
        Ok((worst <= 1e-13, format!("ssgd disjoint vs full-batch SGD, max diff {worst:.3e}")))
    })();
    report.push_result("ssgd-equivalence", r);

    let r = (|| -> Result<(bool, String)> {
        let (net, batch) = random_tanh_problem(&mut rng, 3, 6, 16)?;
        let mut worst = 0.0f64;
        for p in [2, 4, 8] {
            worst = worst.max(mpd_variant_gap(&net, &batch, p, 20, KfacHyper::default())?);
        }
        Ok((worst <= 1e-14, format!("mpd co vs mo, max diff {worst:.3e}")))
    })();
    report.push_result("mpd-variants", r);
}

/// Runs every algorithm on random networks and compares each step's log with
/// the cost model. Returns the number of steps checked and any mismatches.
pub fn counter_sweep(seed: u64, workers: &[usize], nets: usize, steps: u64, hyper: KfacHyper) -> Result<(usize, Vec<String>)> {
    let registry = AlgorithmRegistry::with_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for _ in 0..nets {
        let (net, batch) = random_tanh_problem(&mut rng, 4, 7, 16)?;
        let dims = LayerDims::from_network(&net);
        for &p in workers {
            let shards = shard_batch(&batch, p, ShardPolicy::Replicate)?;
            for kind in AlgorithmKind::ALL {
                let alg = registry.get(kind.name())?;
                let cfg = ClusterConfig::round_robin(net.num_layers(), p, kind);
                let mut cluster = Cluster::new(&net, cfg, alg.as_ref())?;
                for t in 0..steps {
                    let log = alg.step(&mut cluster, &shards, &StepParams { t, lr: 0.01, momentum: 0.9, hyper })?.log;
                    let opts = CostOptions {
                        inv_type: hyper.inv_type,
                        factor_update: hyper.updates_factors_at(t),
                        inverse_update: hyper.updates_inverse_at(t),
                    };
                    if let Err(diff) = verify_counters(&algorithm_cost_with(&dims, p as u64, kind, opts), &log) {
                        mismatches.push(format!("t={t} {diff}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok((checked, mismatches))
}

fn cost_suite(report: &mut VerifyReport, seed: u64) {
    let r = (|| -> Result<(bool, String)> {
        let hyper = KfacHyper { factor_freq: 2, inverse_freq: 3, ..KfacHyper::default() };
        let (checked, mismatches) = counter_sweep(seed.wrapping_add(3), &[1, 2, 4, 8], 4, 6, hyper)?;
        let detail = match mismatches.first() {
            None => format!("{checked} simulated steps match the formulas"),
            Some(first) => format!("{} of {checked} steps differ, first: {first}", mismatches.len()),
        };
        Ok((mismatches.is_empty(), detail))
    })();
    report.push_result("counter-formulas", r);

    let r = (|| -> Result<(bool, String)> {
        let (g, f) = totals(&parse_manifest(RESNET50_MANIFEST)?);
        let ok = (g as f64 / 25.6e6 - 1.0).abs() <= 0.05 && (f as f64 / 153.9e6 - 1.0).abs() <= 0.05;
        Ok((ok, format!("ResNet-50 manifest N_g={g}, N_f={f}")))
    })();
    report.push_result("resnet50-totals", r);
}

/// Row-stacking vectorization, the wrong convention for the Kronecker
/// identity used here. Exposed for mutation tests of the oracle suite.
pub fn row_major_vec(m: &Matrix) -> Matrix {
    Matrix::from_vec(m.len(), 1, m.as_slice().to_vec()).expect("sizes agree")
}

pub fn row_major_unvec(v: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, v.as_slice().to_vec())
}
