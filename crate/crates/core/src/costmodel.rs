//! Element-count model of per-iteration computation, communication and
//! memory for S-SGD, MPD-KFAC and DP-KFAC.
//!
//! Counts are for an iteration that refreshes both factors and inverses.
//! "Per worker" compute quantities such as `N_f / P` are reported twice: the
//! idealized fraction, and the realized maximum over workers under the
//! round-robin layer assignment, which is what the simulator measures.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distsim::{assign_layers_round_robin, AlgorithmKind, CollectiveLog};
use crate::error::{Error, Result};
use crate::kfac::InvType;
use crate::model::Network;

/// Bundled layer manifest for ResNet-50.
pub const RESNET50_MANIFEST: &str = include_str!("../data/resnet50.manifest");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    /// Input dimension, including the homogeneous coordinate if present.
    pub d_in: u64,
    pub d_out: u64,
}

impl LayerDims {
    pub fn new(d_in: u64, d_out: u64) -> Self {
        Self { d_in, d_out }
    }

    pub fn from_network(net: &Network) -> Vec<LayerDims> {
        net.layers
            .iter()
            .map(|l| LayerDims::new(l.weights.cols() as u64, l.weights.rows() as u64))
            .collect()
    }
}

/// `(N_g^i, N_f^i) = (d_out·d_in, d_in² + d_out²)`.
pub fn layer_counts(dims: LayerDims) -> (u64, u64) {
    (dims.d_in * dims.d_out, dims.d_in * dims.d_in + dims.d_out * dims.d_out)
}

pub fn totals(layers: &[LayerDims]) -> (u64, u64) {
    layers.iter().fold((0, 0), |(g, f), &d| {
        let (lg, lf) = layer_counts(d);
        (g + lg, f + lf)
    })
}

/// Parses `d_in d_out` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<LayerDims>> {
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::config(
                Some(line_no),
                None,
                format!("expected `d_in d_out`, found {} fields", fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<u64> {
            match s.parse::<u64>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(Error::config(
                    Some(line_no),
                    None,
                    format!("`{s}` is not a positive integer"),
                )),
            }
        };
        layers.push(LayerDims::new(parse(fields[0])?, parse(fields[1])?));
    }
    if layers.is_empty() {
        return Err(Error::config(None, None, "manifest lists no layers"));
    }
    Ok(layers)
}

pub fn load_manifest(path: &Path) -> Result<Vec<LayerDims>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

/// Which second-order stages run in the modeled iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostOptions {
    pub inv_type: InvType,
    pub factor_update: bool,
    pub inverse_update: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            inv_type: InvType::Eigen,
            factor_update: true,
            inverse_update: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmCost {
    pub algorithm: AlgorithmKind,
    pub workers: u64,
    pub gradcomp: u64,
    pub factorcomp: u64,
    pub inversecomp: u64,
    pub gradcomm: u64,
    pub factorcomm: u64,
    pub predcomm: u64,
    pub inversecomm: u64,
    pub memory: u64,
    /// `N_f / P` variants of the per-worker quantities.
    pub factorcomp_ideal: f64,
    pub inversecomp_ideal: f64,
    pub memory_ideal: f64,
}

/// Per-iteration cost with the default options (eigen damping, factor and
/// inverse refresh).
pub fn algorithm_cost(layers: &[LayerDims], workers: u64, algorithm: AlgorithmKind) -> AlgorithmCost {
    algorithm_cost_with(layers, workers, algorithm, CostOptions::default())
}

pub fn algorithm_cost_with(
    layers: &[LayerDims],
    workers: u64,
    algorithm: AlgorithmKind,
    opts: CostOptions,
) -> AlgorithmCost {
    let p = workers.max(1);
    let (n_g, n_f) = totals(layers);
    let share = realized_share(layers, p);
    let ideal_share = n_f as f64 / p as f64;
    let gradcomm = 2 * (p - 1) * n_g;
    let base = AlgorithmCost {
        algorithm,
        workers: p,
        gradcomp: n_g,
        factorcomp: 0,
        inversecomp: 0,
        gradcomm,
        factorcomm: 0,
        predcomm: 0,
        inversecomm: 0,
        memory: n_g,
        factorcomp_ideal: 0.0,
        inversecomp_ideal: 0.0,
        memory_ideal: n_g as f64,
    };
    let when = |on: bool, v: u64| if on { v } else { 0 };
    let when_f = |on: bool, v: f64| if on { v } else { 0.0 };
    match algorithm {
        AlgorithmKind::Ssgd => base,
        AlgorithmKind::MpdKfacCo | AlgorithmKind::MpdKfacMo => {
            let co = algorithm == AlgorithmKind::MpdKfacCo;
            let payload: u64 = layers
                .iter()
                .map(|&d| {
                    let (_, nf) = layer_counts(d);
                    match opts.inv_type {
                        InvType::Inverse => nf,
                        InvType::Eigen => nf + d.d_in + d.d_out,
                    }
                })
                .sum();
            AlgorithmCost {
                factorcomp: when(opts.factor_update, n_f),
                factorcomp_ideal: when_f(opts.factor_update, n_f as f64),
                inversecomp: when(opts.inverse_update, share),
                inversecomp_ideal: when_f(opts.inverse_update, ideal_share),
                factorcomm: when(opts.factor_update, 2 * (p - 1) * n_f),
                predcomm: if co { 0 } else { (p - 1) * n_g },
                inversecomm: if co { when(opts.inverse_update, (p - 1) * payload) } else { 0 },
                memory: 2 * (n_g + n_f),
                memory_ideal: 2.0 * (n_g + n_f) as f64,
                ..base
            }
        }
        AlgorithmKind::DpKfac => AlgorithmCost {
            factorcomp: when(opts.factor_update, share),
            factorcomp_ideal: when_f(opts.factor_update, ideal_share),
            inversecomp: when(opts.inverse_update, share),
            inversecomp_ideal: when_f(opts.inverse_update, ideal_share),
            predcomm: (p - 1) * n_g,
            memory: 2 * (n_g + share),
            memory_ideal: 2.0 * (n_g as f64 + ideal_share),
            ..base
        },
    }
}

/// Largest per-worker `Σ N_f^i` under the round-robin assignment.
pub fn realized_share(layers: &[LayerDims], workers: u64) -> u64 {
    assign_layers_round_robin(layers.len(), workers.max(1) as usize)
        .iter()
        .map(|set| set.iter().map(|&l| layer_counts(layers[l]).1).sum::<u64>())
        .max()
        .unwrap_or(0)
}

/// Second-order stages averaged over their refresh intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizedCost {
    pub algorithm: AlgorithmKind,
    pub workers: u64,
    pub factor_freq: u64,
    pub inverse_freq: u64,
    pub factorcomp: f64,
    pub inversecomp: f64,
    pub factorcomm: f64,
    pub inversecomm: f64,
}

pub fn amortize(cost: &AlgorithmCost, factor_freq: u64, inverse_freq: u64) -> AmortizedCost {
    let f = factor_freq.max(1) as f64;
    let k = inverse_freq.max(1) as f64;
    AmortizedCost {
        algorithm: cost.algorithm,
        workers: cost.workers,
        factor_freq,
        inverse_freq,
        factorcomp: cost.factorcomp as f64 / f,
        inversecomp: cost.inversecomp as f64 / k,
        factorcomm: cost.factorcomm as f64 / f,
        inversecomm: cost.inversecomm as f64 / k,
    }
}

/// DP-KFAC relative to MPD-KFAC at one worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub workers: u64,
    /// `None` when DP-KFAC sends no factors at all.
    pub factorcomm_ratio: Option<f64>,
    pub factorcomm_eliminated: bool,
    pub factorcomp_ratio: f64,
    pub memory_ratio: f64,
    /// Same ratio with `N_f / P` in place of the realized share.
    pub memory_ratio_ideal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: usize,
    pub n_g: u64,
    pub n_f: u64,
    pub nf_over_ng: f64,
    pub inv_type: InvType,
    pub costs: Vec<AlgorithmCost>,
    pub reductions: Vec<Reduction>,
    pub notes: Vec<String>,
}

pub fn cost_report(
    layers: &[LayerDims],
    worker_counts: &[u64],
    algorithms: &[AlgorithmKind],
    inv_type: InvType,
) -> CostReport {
    let (n_g, n_f) = totals(layers);
    let opts = CostOptions { inv_type, ..CostOptions::default() };
    let mut costs = Vec::new();
    let mut reductions = Vec::new();
    for &p in worker_counts {
        for &alg in algorithms {
            costs.push(algorithm_cost_with(layers, p, alg, opts));
        }
        let mpd = algorithm_cost_with(layers, p, AlgorithmKind::MpdKfacMo, opts);
        let dp = algorithm_cost_with(layers, p, AlgorithmKind::DpKfac, opts);
        reductions.push(Reduction {
            workers: p,
            factorcomm_ratio: (dp.factorcomm > 0).then(|| mpd.factorcomm as f64 / dp.factorcomm as f64),
            factorcomm_eliminated: dp.factorcomm == 0 && mpd.factorcomm > 0,
            factorcomp_ratio: mpd.factorcomp as f64 / dp.factorcomp.max(1) as f64,
            memory_ratio: dp.memory as f64 / mpd.memory as f64,
            memory_ratio_ideal: dp.memory_ideal / mpd.memory_ideal,
        });
    }
    CostReport {
        layers: layers.len(),
        n_g,
        n_f,
        nf_over_ng: n_f as f64 / n_g as f64,
        inv_type,
        costs,
        reductions,
        notes: vec![
            "counts are elements, not FLOPs; eigendecomposition and inversion scale as d^3".into(),
            "inversecomm for mpd_kfac_co is a model extension: eigenbasis plus eigenvalues (or inverse) broadcast by each layer owner".into(),
            "per-worker compute and dp memory use the realized round-robin maximum; *_ideal fields hold N_f/P".into(),
        ],
    }
}

impl CostReport {
    /// Fixed-width text table, one column per (algorithm, P).
    pub fn render_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "layers {}  N_g {}  N_f {}  N_f/N_g {:.3}  inv_type {}",
            self.layers, self.n_g, self.n_f, self.nf_over_ng, self.inv_type
        );
        let _ = write!(out, "{:<12}", "stage");
        for c in &self.costs {
            let _ = write!(out, "{:>18}", format!("{}@P={}", c.algorithm, c.workers));
        }
        out.push('\n');
        let rows: [(&str, fn(&AlgorithmCost) -> u64); 8] = [
            ("GradComp", |c| c.gradcomp),
            ("FactorComp", |c| c.factorcomp),
            ("InverseComp", |c| c.inversecomp),
            ("GradComm", |c| c.gradcomm),
            ("FactorComm", |c| c.factorcomm),
            ("PredComm", |c| c.predcomm),
            ("InverseComm", |c| c.inversecomm),
            ("Memory", |c| c.memory),
        ];
        for (label, get) in rows {
            let _ = write!(out, "{label:<12}");
            for c in &self.costs {
                let _ = write!(out, "{:>18}", get(c));
            }
            out.push('\n');
        }
        for r in &self.reductions {
            let comm = if r.factorcomm_eliminated {
                "eliminated".to_string()
            } else {
                r.factorcomm_ratio.map_or("n/a".into(), |x| format!("{x:.2}x"))
            };
            let _ = writeln!(
                out,
                "P={}: dp vs mpd  factorcomm {comm}  factorcomp {:.2}x fewer  memory ratio {:.4} (ideal {:.4})",
                r.workers, r.factorcomp_ratio, r.memory_ratio, r.memory_ratio_ideal
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// One disagreeing stage between the model and a simulated log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMismatch {
    pub stage: &'static str,
    pub analytic: u64,
    pub simulated: u64,
}

impl StageMismatch {
    pub fn delta(&self) -> i128 {
        self.simulated as i128 - self.analytic as i128
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterDiff {
    pub algorithm: AlgorithmKind,
    pub workers: u64,
    pub mismatches: Vec<StageMismatch>,
}

impl fmt::Display for CounterDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at P={}:", self.algorithm, self.workers)?;
        for m in &self.mismatches {
            write!(
                f,
                " {} analytic {} simulated {} (delta {:+})",
                m.stage,
                m.analytic,
                m.simulated,
                m.delta()
            )?;
        }
        Ok(())
    }
}

impl std::error::Error for CounterDiff {}

/// Compares a simulated step log against the model, stage by stage. All
/// stages must match exactly; compute stages are compared against the
/// realized round-robin maximum.
pub fn verify_counters(expected: &AlgorithmCost, log: &CollectiveLog) -> std::result::Result<(), CounterDiff> {
    let pairs = [
        ("gradcomp", expected.gradcomp, log.gradcomp),
        ("factorcomp", expected.factorcomp, log.factorcomp),
        ("inversecomp", expected.inversecomp, log.inversecomp),
        ("gradcomm", expected.gradcomm, log.gradcomm),
        ("factorcomm", expected.factorcomm, log.factorcomm),
        ("predcomm", expected.predcomm, log.predcomm),
        ("inversecomm", expected.inversecomm, log.inversecomm),
    ];
    let mismatches: Vec<StageMismatch> = pairs
        .into_iter()
        .filter(|(_, a, s)| a != s)
        .map(|(stage, analytic, simulated)| StageMismatch { stage, analytic, simulated })
        .collect();
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CounterDiff {
            algorithm: expected.algorithm,
            workers: expected.workers,
            mismatches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_layer_counts() {
        assert_eq!(layer_counts(LayerDims::new(4, 3)), (12, 25));
        let (g, f) = layer_counts(LayerDims::new(7, 7));
        assert_eq!(f, 2 * g);
    }

    #[test]
    fn single_layer_dp_cost() {
        let c = algorithm_cost(&[LayerDims::new(4, 3)], 2, AlgorithmKind::DpKfac);
        assert_eq!(c.factorcomm, 0);
        assert_eq!(c.predcomm, 12);
        assert_eq!(c.gradcomm, 24);
    }

    #[test]
    fn resnet50_totals_near_published() {
        let layers = parse_manifest(RESNET50_MANIFEST).unwrap();
        let (g, f) = totals(&layers);
        assert!(((g as f64) / 25.6e6 - 1.0).abs() <= 0.05, "N_g {g}");
        assert!(((f as f64) / 153.9e6 - 1.0).abs() <= 0.05, "N_f {f}");
        let mpd = algorithm_cost(&layers, 64, AlgorithmKind::MpdKfacMo);
        assert_eq!(mpd.factorcomm, 2 * 63 * f);
        assert_eq!(algorithm_cost(&layers, 64, AlgorithmKind::DpKfac).factorcomm, 0);
    }

    #[test]
    fn degenerate_single_worker() {
        let layers = [LayerDims::new(5, 4), LayerDims::new(4, 3)];
        let mpd = algorithm_cost(&layers, 1, AlgorithmKind::MpdKfacMo);
        let dp = algorithm_cost(&layers, 1, AlgorithmKind::DpKfac);
        assert_eq!(
            (mpd.gradcomp, mpd.factorcomp, mpd.inversecomp, mpd.gradcomm, mpd.factorcomm, mpd.predcomm),
            (dp.gradcomp, dp.factorcomp, dp.inversecomp, dp.gradcomm, dp.factorcomm, dp.predcomm)
        );
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let err = parse_manifest("# header\n4 3\n5 x\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(3), .. }), "{err}");
        assert!(parse_manifest("4 3 2\n").is_err());
        assert!(parse_manifest("# nothing\n").is_err());
        assert_eq!(parse_manifest("4 3 # toy\n\n").unwrap(), vec![LayerDims::new(4, 3)]);
    }

    #[test]
    fn verify_reports_stage_and_delta() {
        let layers = [LayerDims::new(4, 3)];
        let expected = algorithm_cost(&layers, 4, AlgorithmKind::MpdKfacMo);
        let log = CollectiveLog {
            gradcomp: 12,
            factorcomp: 25,
            inversecomp: 25,
            gradcomm: 72,
            factorcomm: 150,
            predcomm: 36,
            inversecomm: 0,
        };
        assert!(verify_counters(&expected, &log).is_ok());
        let bad = CollectiveLog { factorcomm: 140, ..log };
        let diff = verify_counters(&expected, &bad).unwrap_err();
        assert_eq!(diff.mismatches[0].stage, "factorcomm");
        assert_eq!(diff.mismatches[0].delta(), -10);
        assert!(diff.to_string().contains("factorcomm"));
    }

    #[test]
    fn report_json_round_trip() {
        let layers = parse_manifest("4 3\n8 8\n").unwrap();
        let report = cost_report(&layers, &[1, 2], &AlgorithmKind::ALL, InvType::Eigen);
        let json = serde_json::to_string(&report).unwrap();
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.render_table().contains("FactorComm"));
    }

    #[test]
    fn amortized_divides_second_order_stages() {
        let c = algorithm_cost(&[LayerDims::new(4, 3)], 4, AlgorithmKind::MpdKfacCo);
        let a = amortize(&c, 10, 50);
        assert_eq!(a.factorcomm, c.factorcomm as f64 / 10.0);
        assert_eq!(a.inversecomp, c.inversecomp as f64 / 50.0);
    }

    proptest! {
        #[test]
        fn factor_to_gradient_ratio(d_in in 1u64..5000, d_out in 1u64..5000) {
            let (g, f) = layer_counts(LayerDims::new(d_in, d_out));
            prop_assert!(f >= 2 * g);
            prop_assert_eq!(f == 2 * g, d_in == d_out);
        }

        #[test]
        fn model_invariants(
            dims in prop::collection::vec((1u64..300, 1u64..300), 1..12),
            p in 1u64..70,
        ) {
            let layers: Vec<LayerDims> = dims.iter().map(|&(a, b)| LayerDims::new(a, b)).collect();
            let (n_g, n_f) = totals(&layers);
            let per_layer: u64 = layers.iter().map(|&d| layer_counts(d).0).sum();
            prop_assert_eq!(per_layer, n_g);

            let share = realized_share(&layers, p);
            prop_assert!(share <= n_f);
            prop_assert!(share as f64 >= n_f as f64 / p as f64);

            let dp = algorithm_cost(&layers, p, AlgorithmKind::DpKfac);
            let mpd = algorithm_cost(&layers, p, AlgorithmKind::MpdKfacMo);
            prop_assert!(dp.memory <= mpd.memory);
            if p > 1 && layers.len() > 1 {
                prop_assert!(dp.memory < mpd.memory);
            }
            prop_assert_eq!(dp.factorcomm, 0);
        }
    }
}
