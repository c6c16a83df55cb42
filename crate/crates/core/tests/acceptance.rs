//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL` line.

use std::time::Instant;

use dkfac_core::config::{parse_config, RunConfig};
use dkfac_core::costmodel::{algorithm_cost_with, parse_manifest, realized_share, totals, CostOptions, LayerDims, RESNET50_MANIFEST};
use dkfac_core::distsim::{shard_batch, AlgorithmKind, AlgorithmRegistry, Cluster, ClusterConfig, ShardPolicy, StepParams};
use dkfac_core::kfac::{exact_precondition_oracle, oracle, precondition_eigen, precondition_inverse, InvType, KfacHyper};
use dkfac_core::numerics::{sym_eig, Matrix};
use dkfac_core::runner::{cmd_train, run_training};
use dkfac_core::verify::{mpd_variant_gap, random_tanh_problem, replicate_equivalence, ssgd_equivalence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `B Bᵀ / (n+2) + shift·I`.
fn spd(n: usize, shift: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let b = random(n, n + 2, rng);
    Matrix::from_fn(n, n, |i, j| {
        let dot: f64 = (0..n + 2).map(|k| b[(i, k)] * b[(j, k)]).sum();
        dot / (n + 2) as f64 + if i == j { shift } else { 0.0 }
    })
}

/// Dense `(A ⊗ G + γI) x = vec(grad)` solved by Gaussian elimination with
/// partial pivoting, column-stacking `vec`. Written independently of the
/// library's linear algebra.
fn dense_exact(a: &Matrix, g: &Matrix, grad: &Matrix, gamma: f64) -> Matrix {
    dense_kron_solve(a, g, grad, 0.0, 0.0, gamma)
}

fn dense_kron_solve(a: &Matrix, g: &Matrix, grad: &Matrix, shift_a: f64, shift_g: f64, gamma: f64) -> Matrix {
    let (m, n) = (g.rows(), a.rows());
    let dim = m * n;
    let mut f = vec![vec![0.0; dim + 1]; dim];
    for i in 0..dim {
        for j in 0..dim {
            let (ai, gi) = (i / m, i % m);
            let (aj, gj) = (j / m, j % m);
            let av = a[(ai, aj)] + if ai == aj { shift_a } else { 0.0 };
            let gv = g[(gi, gj)] + if gi == gj { shift_g } else { 0.0 };
            f[i][j] = av * gv + if i == j { gamma } else { 0.0 };
        }
        f[i][dim] = grad[(i % m, i / m)];
    }
    for col in 0..dim {
        let piv = (col..dim).max_by(|&x, &y| f[x][col].abs().total_cmp(&f[y][col].abs())).unwrap();
        f.swap(col, piv);
        for row in col + 1..dim {
            let factor = f[row][col] / f[col][col];
            for k in col..=dim {
                f[row][k] -= factor * f[col][k];
            }
        }
    }
    let mut x = vec![0.0; dim];
    for i in (0..dim).rev() {
        let s: f64 = (i + 1..dim).map(|k| f[i][k] * x[k]).sum();
        x[i] = (f[i][dim] - s) / f[i][i];
    }
    Matrix::from_fn(m, n, |r, c| x[c * m + r])
}

fn rel_dev(got: &Matrix, want: &Matrix, grad: &Matrix) -> f64 {
    got.max_abs_diff(want).unwrap() / grad.max_abs()
}

#[test]
fn criterion_1_eigen_damping_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_indep = 0.0f64;
    let pairs = 1000;
    for _ in 0..pairs {
        let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = spd(n, rng.gen_range(1e-3..1.0), &mut rng);
        let g = spd(m, rng.gen_range(1e-3..1.0), &mut rng);
        let grad = random(m, n, &mut rng);
        let (ea, eg) = (sym_eig(&a).unwrap(), sym_eig(&g).unwrap());
        for gamma in [1e-3, 0.03, 1.0] {
            let got = precondition_eigen(&ea, &eg, &grad, gamma).unwrap();
            worst = worst.max(rel_dev(&got, &exact_precondition_oracle(&a, &g, &grad, gamma).unwrap(), &grad));
            worst_indep = worst_indep.max(rel_dev(&got, &dense_exact(&a, &g, &grad, gamma), &grad));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst <= 1e-10 && worst_indep <= 1e-10 && secs < 10.0,
        format!("{pairs} SPD pairs x 3 damping values: max dev/‖grad‖ {worst:.2e} (library oracle), {worst_indep:.2e} (test oracle), {secs:.2}s"),
    );
}

#[test]
fn criterion_2_inverse_damping_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut worst_indep = 0.0f64;
    for _ in 0..1000 {
        let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = spd(n, rng.gen_range(1e-3..1.0), &mut rng);
        let g = spd(m, rng.gen_range(1e-3..1.0), &mut rng);
        let grad = random(m, n, &mut rng);
        let pi = ((a.trace() / n as f64) / (g.trace() / m as f64)).sqrt();
        for gamma in [1e-3, 0.03, 1.0] {
            let got = precondition_inverse(&a, &g, &grad, gamma).unwrap();
            let want = oracle::factored_damped_precondition(&a, &g, &grad, gamma).unwrap();
            worst = worst.max(rel_dev(&got, &want, &grad));
            let indep = dense_kron_solve(&a, &g, &grad, pi * gamma.sqrt(), gamma.sqrt() / pi, 0.0);
            worst_indep = worst_indep.max(rel_dev(&got, &indep, &grad));
        }
    }

    // Well-conditioned factors: eigenvalues in [1, 2].
    let mut limit_gap = 0.0f64;
    for _ in 0..200 {
        let (m, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = spd(n, 1.0, &mut rng);
        let g = spd(m, 1.0, &mut rng);
        let grad = random(m, n, &mut rng);
        let got = precondition_inverse(&a, &g, &grad, 1e-12).unwrap();
        limit_gap = limit_gap.max(got.max_abs_diff(&dense_exact(&a, &g, &grad, 1e-12)).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        worst <= 1e-10 && worst_indep <= 1e-10 && limit_gap <= 1e-8 && secs < 10.0,
        format!(
            "factored oracle max dev/‖grad‖ {worst:.2e} (library), {worst_indep:.2e} (test); \
             exact oracle at γ=1e-12 max dev {limit_gap:.2e} (tolerance 1e-8); {secs:.2}s"
        ),
    );
}

#[test]
fn criterion_3_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (net, batch) = random_tanh_problem(&mut rng, 3, 8, 6).unwrap();
        let mut probe = net.clone();
        probe.forward(&batch).unwrap();
        let analytic = probe.backward(&batch).unwrap();
        let weights = net.weights();
        for (l, w) in weights.iter().enumerate() {
            for idx in 0..w.len() {
                let eval = |delta: f64| {
                    let mut ws = weights.clone();
                    ws[l].as_mut_slice()[idx] += delta;
                    let mut n = net.clone();
                    n.set_weights(&ws).unwrap();
                    n.loss(&batch).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[l].as_slice()[idx];
                worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-3));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(3, worst <= 1e-5 && secs < 30.0, format!("50 tanh nets, max relative error {worst:.2e}, {secs:.2}s"));
}

#[test]
fn criterion_4_distributed_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hyper = KfacHyper::default();
    let mut dp_worst = 0.0f64;
    let mut ssgd_worst = 0.0f64;
    let mut mpd_worst = 0.0f64;
    for _ in 0..3 {
        let (net, batch) = random_tanh_problem(&mut rng, 3, 8, 16).unwrap();
        for p in [2, 4, 8] {
            dp_worst = dp_worst.max(replicate_equivalence(&net, &batch, p, 20, hyper).unwrap());
            ssgd_worst = ssgd_worst.max(ssgd_equivalence(&net, &batch, p, 20).unwrap());
            mpd_worst = mpd_worst.max(mpd_variant_gap(&net, &batch, p, 20, hyper).unwrap());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        dp_worst == 0.0 && ssgd_worst <= 1e-13 && mpd_worst <= 1e-14 && secs < 60.0,
        format!(
            "dp replicate vs single-worker max diff {dp_worst:e}, ssgd vs full batch {ssgd_worst:.2e}, \
             mpd co vs mo {mpd_worst:.2e}, {secs:.2}s"
        ),
    );
}

/// Complexity table written out directly from the per-layer dimensions.
fn table_row(dims: &[LayerDims], p: u64, kind: AlgorithmKind, factor_iter: bool, inverse_iter: bool) -> [u64; 7] {
    let n_g: u64 = dims.iter().map(|d| d.d_in * d.d_out).sum();
    let n_f: u64 = dims.iter().map(|d| d.d_in * d.d_in + d.d_out * d.d_out).sum();
    let share = (0..p)
        .map(|w| {
            dims.iter()
                .enumerate()
                .filter(|(l, _)| *l as u64 % p == w)
                .map(|(_, d)| d.d_in * d.d_in + d.d_out * d.d_out)
                .sum::<u64>()
        })
        .max()
        .unwrap();
    let on = |b: bool, v: u64| if b { v } else { 0 };
    let eig_payload: u64 = dims.iter().map(|d| d.d_in * d.d_in + d.d_out * d.d_out + d.d_in + d.d_out).sum();
    // [gradcomp, factorcomp, inversecomp, gradcomm, factorcomm, predcomm, inversecomm]
    match kind {
        AlgorithmKind::Ssgd => [n_g, 0, 0, 2 * (p - 1) * n_g, 0, 0, 0],
        AlgorithmKind::MpdKfacMo => [
            n_g,
            on(factor_iter, n_f),
            on(inverse_iter, share),
            2 * (p - 1) * n_g,
            on(factor_iter, 2 * (p - 1) * n_f),
            (p - 1) * n_g,
            0,
        ],
        AlgorithmKind::MpdKfacCo => [
            n_g,
            on(factor_iter, n_f),
            on(inverse_iter, share),
            2 * (p - 1) * n_g,
            on(factor_iter, 2 * (p - 1) * n_f),
            0,
            on(inverse_iter, (p - 1) * eig_payload),
        ],
        AlgorithmKind::DpKfac => [
            n_g,
            on(factor_iter, share),
            on(inverse_iter, share),
            2 * (p - 1) * n_g,
            0,
            (p - 1) * n_g,
            0,
        ],
    }
}

#[test]
fn criterion_5_complexity_table() {
    let start = Instant::now();
    let registry = AlgorithmRegistry::with_defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hyper = KfacHyper { factor_freq: 2, inverse_freq: 3, ..KfacHyper::default() };
    let mut checked = 0;
    let mut mismatches = Vec::new();
    let mut dp_factorcomm_nonzero = 0;
    let mut ratio_bad = Vec::new();
    for _ in 0..3 {
        let (net, batch) = random_tanh_problem(&mut rng, 4, 8, 128).unwrap();
        let dims = LayerDims::from_network(&net);
        let n_f: u64 = totals(&dims).1;
        for p in [1usize, 2, 4, 8, 64] {
            let shards = shard_batch(&batch, p, ShardPolicy::Disjoint).unwrap();
            for kind in AlgorithmKind::ALL {
                let alg = registry.get(kind.name()).unwrap();
                let cfg = ClusterConfig::round_robin(net.num_layers(), p, kind);
                let mut cluster = Cluster::new(&net, cfg, alg.as_ref()).unwrap();
                for t in 0..6 {
                    let log = alg.step(&mut cluster, &shards, &StepParams { t, lr: 0.01, momentum: 0.9, hyper }).unwrap().log;
                    let (fi, ii) = (hyper.updates_factors_at(t), hyper.updates_inverse_at(t));
                    let sim = [log.gradcomp, log.factorcomp, log.inversecomp, log.gradcomm, log.factorcomm, log.predcomm, log.inversecomm];
                    let expected = table_row(&dims, p as u64, kind, fi, ii);
                    let model = algorithm_cost_with(&dims, p as u64, kind, CostOptions { inv_type: InvType::Eigen, factor_update: fi, inverse_update: ii });
                    let model_row = [model.gradcomp, model.factorcomp, model.inversecomp, model.gradcomm, model.factorcomm, model.predcomm, model.inversecomm];
                    if sim != expected || model_row != expected {
                        mismatches.push(format!("{kind} P={p} t={t}: sim {sim:?} table {expected:?} model {model_row:?}"));
                    }
                    if kind == AlgorithmKind::DpKfac && log.factorcomm != 0 {
                        dp_factorcomm_nonzero += 1;
                    }
                    checked += 1;
                }
            }
            let mpd = algorithm_cost_with(&dims, p as u64, AlgorithmKind::MpdKfacMo, CostOptions::default());
            let dp = algorithm_cost_with(&dims, p as u64, AlgorithmKind::DpKfac, CostOptions::default());
            let ratio = mpd.factorcomp as f64 / dp.factorcomp as f64;
            let realized = n_f as f64 / realized_share(&dims, p as u64) as f64;
            if ratio != realized || ratio > p as f64 || ratio < 1.0 || dp.factorcomm != 0 {
                ratio_bad.push(format!("P={p}: factorcomp ratio {ratio} vs realized {realized}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let first = mismatches.first().cloned().unwrap_or_default();
    report(
        5,
        mismatches.is_empty() && dp_factorcomm_nonzero == 0 && ratio_bad.is_empty() && secs < 60.0,
        format!(
            "{checked} simulated steps, {} mismatches {first}; dp factorcomm nonzero on {dp_factorcomm_nonzero} steps; \
             factorcomm mpd/dp eliminated; factorcomp ratio issues {ratio_bad:?}; {secs:.2}s",
            mismatches.len()
        ),
    );
}

#[test]
fn criterion_6_resnet_totals() {
    let start = Instant::now();
    let layers = parse_manifest(RESNET50_MANIFEST).unwrap();
    let (n_g, n_f) = totals(&layers);
    let g_dev = n_g as f64 / 25.6e6 - 1.0;
    let f_dev = n_f as f64 / 153.9e6 - 1.0;
    let mut dp_le_mpd = true;
    for p in [1u64, 2, 4, 8, 16, 32, 64] {
        let mpd = algorithm_cost_with(&layers, p, AlgorithmKind::MpdKfacMo, CostOptions::default());
        let dp = algorithm_cost_with(&layers, p, AlgorithmKind::DpKfac, CostOptions::default());
        dp_le_mpd &= dp.memory <= mpd.memory && dp.memory_ideal <= mpd.memory_ideal;
    }
    let mpd = algorithm_cost_with(&layers, 64, AlgorithmKind::MpdKfacMo, CostOptions::default());
    let dp = algorithm_cost_with(&layers, 64, AlgorithmKind::DpKfac, CostOptions::default());
    let ratio = dp.memory_ideal / mpd.memory_ideal;
    let published_ratio = (25.6e6 + 153.9e6 / 64.0) / (25.6e6 + 153.9e6);
    let realized = dp.memory as f64 / mpd.memory as f64;
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        g_dev.abs() <= 0.05 && f_dev.abs() <= 0.05 && dp_le_mpd && (ratio - published_ratio).abs() <= 0.005 && secs < 1.0,
        format!(
            "N_g {n_g} ({:+.2}%), N_f {n_f} ({:+.2}%); P=64 memory ratio dp/mpd {ratio:.4} with N_f/P \
             (published totals give {published_ratio:.4}; round-robin realized {realized:.4}); {secs:.3}s",
            100.0 * g_dev,
            100.0 * f_dev
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "[network]\nlayers = 8, 16, 4\n[data]\nsamples = 400\ndim = 8\nclasses = 4\n\
         [train]\nalgorithm = dp_kfac\nworkers = 4\nbatch_size = 32\nepochs = 2\nlr = 0.01\n\
         [kfac]\nfactor_freq = 3\ninverse_freq = 5\n[run]\nseed = 17\nout_dir = {}\n",
        dir.path().join("a").display()
    );
    let cfg = parse_config(&text, &[] as &[&str]).unwrap();
    let first = cmd_train(&cfg).unwrap();
    let again = cmd_train(&cfg).unwrap();
    let csv_a = std::fs::read(&first.metrics).unwrap();
    let csv_b = std::fs::read(&again.metrics).unwrap();

    let manifest = std::fs::read_to_string(&first.manifest).unwrap();
    let out_c = dir.path().join("c");
    let from_manifest = parse_config(&manifest, &[format!("run.out_dir={}", out_c.display())]).unwrap();
    let replay = cmd_train(&from_manifest).unwrap();
    let csv_c = std::fs::read(&replay.metrics).unwrap();
    let rows = csv_a.iter().filter(|&&b| b == b'\n').count() - 1;
    report(
        9,
        csv_a == csv_b && csv_a == csv_c && rows > 0,
        format!("{rows} metric rows; repeat identical: {}; replay from run manifest identical: {}", csv_a == csv_b, csv_a == csv_c),
    );
}

const BLOBS: &str = include_str!("../../../configs/blobs.ini");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Median iterations-to-target over the evaluation seeds. Runs that never
/// reach the target count as `u64::MAX`.
fn median_iterations(overrides: &[&str]) -> (u64, Vec<u64>) {
    let registry = AlgorithmRegistry::with_defaults();
    let mut its: Vec<u64> = SEEDS
        .iter()
        .map(|seed| {
            let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
            o.push(format!("run.seed={seed}"));
            let cfg: RunConfig = parse_config(BLOBS, &o).unwrap();
            let out = run_training(&cfg, &registry, None, &mut |_| {}).unwrap();
            out.iterations_to_target.unwrap_or(u64::MAX)
        })
        .collect();
    let per_seed = its.clone();
    its.sort_unstable();
    (its[its.len() / 2], per_seed)
}

#[test]
fn criterion_7_convergence_ordering() {
    let start = Instant::now();
    let (dp, dp_runs) = median_iterations(&["train.algorithm=dp_kfac"]);
    let (mpd, mpd_runs) = median_iterations(&["train.algorithm=mpd_kfac_mo"]);
    let (ssgd, ssgd_runs) = median_iterations(&["train.algorithm=ssgd", "train.lr=0.5"]);
    let secs = start.elapsed().as_secs_f64();
    report(
        7,
        (dp as f64) <= mpd as f64 * 1.05 && dp < ssgd && secs < 300.0,
        format!(
            "median iterations to target: dp_kfac {dp} {dp_runs:?}, mpd_kfac_mo {mpd} {mpd_runs:?}, \
             ssgd {ssgd} {ssgd_runs:?}; {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_8_stale_factors() {
    let start = Instant::now();
    let (fresh, fresh_runs) = median_iterations(&["train.algorithm=dp_kfac"]);
    let (stale, stale_runs) =
        median_iterations(&["train.algorithm=dp_kfac", "kfac.factor_freq=10", "kfac.inverse_freq=50"]);
    let secs = start.elapsed().as_secs_f64();
    report(
        8,
        stale != u64::MAX && (stale as f64) <= 1.5 * fresh as f64 && secs < 300.0,
        format!("median iterations to target: F=K=1 {fresh} {fresh_runs:?}, F=10 K=50 {stale} {stale_runs:?}; {secs:.1}s"),
    );
}
