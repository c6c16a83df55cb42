//! Training loop and the file-producing commands behind the CLI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig, RunManifest};
use crate::costmodel::{cost_report, parse_manifest, CostReport, RESNET50_MANIFEST};
use crate::data::{gen_synthetic, load_idx, permutation, save_idx, train_eval_split, SyntheticParams};
use crate::distsim::{shard_batch, AlgorithmKind, AlgorithmRegistry, Cluster, ClusterConfig, CollectiveLog, LrSchedule, StepParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kfac::InvType;
use crate::model::{Batch, Network};

pub const METRICS_HEADER: &str = "iteration,epoch,lr,train_loss,eval_loss,eval_accuracy,\
gradcomp,factorcomp,inversecomp,gradcomm,factorcomm,predcomm,inversecomm";

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// One iteration of training output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Present on the last iteration of each epoch when an eval split exists.
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub log: CollectiveLog,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let l = &self.log;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.eval_loss),
            opt(self.eval_accuracy),
            l.gradcomp,
            l.factorcomp,
            l.inversecomp,
            l.gradcomm,
            l.factorcomm,
            l.predcomm,
            l.inversecomm
        )
    }
}

/// Independent seed streams derived from the run seed (splitmix64 mixing).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Builds the train and eval splits a config describes.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Batch, Option<Batch>)> {
    let all = match &cfg.data {
        DataSource::Synthetic { params, seed } => gen_synthetic(params, seed.unwrap_or(cfg.seed))?,
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
    };
    if all.inputs.rows() != cfg.network.layer_dims[0] {
        return Err(Error::Data(format!(
            "samples have {} features, network expects {}",
            all.inputs.rows(),
            cfg.network.layer_dims[0]
        )));
    }
    train_eval_split(&all, cfg.eval_fraction, derive_seed(cfg.seed, STREAM_SPLIT, 0))
}

/// What a training run produced besides its metric rows.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub iterations: u64,
    pub final_train_loss: Option<f64>,
    /// First checked iteration count at which the full training loss was at
    /// or below the target.
    pub iterations_to_target: Option<u64>,
    /// `(iterations completed, full training loss)` at every target check.
    pub target_checks: Vec<(u64, f64)>,
    pub network: Network,
    pub checkpoint: Checkpoint,
}

/// Runs training in memory, handing every row to `sink`.
///
/// On error the rows emitted so far have already reached `sink`.
pub fn run_training(
    cfg: &RunConfig,
    registry: &AlgorithmRegistry,
    resume: Option<&Checkpoint>,
    sink: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, eval) = load_dataset(cfg)?;
    let iters_per_epoch = (train.len() / cfg.batch_size) as u64;
    if iters_per_epoch == 0 {
        return Err(Error::Data(format!(
            "training split of {} samples is smaller than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let net = Network::init(cfg.network.clone(), derive_seed(cfg.seed, STREAM_INIT, 0))?;
    let alg = registry.get(cfg.algorithm.name())?;
    let cluster_cfg = ClusterConfig::round_robin(net.num_layers(), cfg.workers, cfg.algorithm);
    let mut cluster = Cluster::new(&net, cluster_cfg, alg.as_ref())?;
    let schedule = LrSchedule::new(cfg.lr, cfg.workers, cfg.warmup_iters, cfg.decay_epochs.clone());

    let mut t = 0;
    if let Some(ckpt) = resume {
        ckpt.restore(&mut cluster)?;
        t = ckpt.iteration;
    }
    let mut end = cfg.epochs.saturating_mul(iters_per_epoch);
    if let Some(m) = cfg.max_iterations {
        end = end.min(m);
    }

    let b = cfg.batch_size;
    let mut perm_epoch = u64::MAX;
    let mut perm = Vec::new();
    let mut last_loss = None;
    let mut to_target = None;
    let mut checks = Vec::new();
    while t < end {
        let epoch = t / iters_per_epoch;
        let pos = (t % iters_per_epoch) as usize;
        if epoch != perm_epoch {
            perm = permutation(train.len(), derive_seed(cfg.seed, STREAM_SHUFFLE, epoch));
            perm_epoch = epoch;
        }
        let batch = train.select(&perm[pos * b..(pos + 1) * b]);
        let shards = shard_batch(&batch, cfg.workers, cfg.shard)?;
        let lr = schedule.lr(t, epoch);
        let params = StepParams {
            t,
            lr,
            momentum: cfg.momentum,
            hyper: cfg.hyper,
        };
        let out = alg.step(&mut cluster, &shards, &params)?;
        if !out.loss.is_finite() {
            return Err(Error::Numeric {
                detail: format!("training loss became {} at iteration {t}", out.loss),
                site: Default::default(),
            });
        }
        let mut row = MetricsRow {
            iteration: t,
            epoch,
            lr,
            train_loss: out.loss,
            eval_loss: None,
            eval_accuracy: None,
            log: out.log,
        };
        if pos as u64 == iters_per_epoch - 1 {
            if let Some(ev) = &eval {
                row.eval_loss = Some(cluster.network().loss(ev)?);
                row.eval_accuracy = cluster.network().accuracy(ev)?;
            }
        }
        sink(&row);
        last_loss = Some(out.loss);
        t += 1;
        if let Some(target) = cfg.target_loss {
            if t % cfg.target_check_every == 0 {
                let full = cluster.network().loss(&train)?;
                checks.push((t, full));
                if to_target.is_none() && full <= target {
                    to_target = Some(t);
                    if cfg.stop_at_target {
                        break;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        iterations: t,
        final_train_loss: last_loss,
        iterations_to_target: to_target,
        target_checks: checks,
        network: cluster.network().clone(),
        checkpoint: Checkpoint::capture(&cluster, t),
    })
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainFiles {
    pub metrics: PathBuf,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains per `cfg`, writing the metrics CSV, run manifest and final
/// checkpoint into `cfg.out_dir`. A failed run still writes the rows it
/// produced before the error.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainFiles> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let metrics = dir.join(METRICS_FILE);
    let manifest = dir.join(MANIFEST_FILE);
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let manifest_json = serde_json::to_string_pretty(&RunManifest::new(cfg)).expect("config serializes") + "\n";
    write_atomic(&manifest, manifest_json.as_bytes())?;

    let resume = cfg.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let result = run_training(cfg, &AlgorithmRegistry::with_defaults(), resume.as_ref(), &mut |row| {
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
    });
    write_atomic(&metrics, csv.as_bytes())?;
    let outcome = result?;
    outcome.checkpoint.save(&checkpoint)?;
    Ok(TrainFiles {
        metrics,
        manifest,
        checkpoint,
        outcome,
    })
}

/// Arguments of the `cost` command.
#[derive(Debug, Clone)]
pub struct CostArgs {
    /// `None` selects the bundled ResNet-50 manifest.
    pub manifest: Option<PathBuf>,
    pub workers: Vec<u64>,
    pub algorithms: Vec<AlgorithmKind>,
    pub inv_type: InvType,
    pub out_dir: Option<PathBuf>,
}

/// Builds the cost report; writes `cost.json` and `cost.txt` when an output
/// directory is given. Returns the report and its text table.
pub fn cmd_cost(args: &CostArgs) -> Result<(CostReport, String)> {
    let text = match &args.manifest {
        Some(p) if p.as_os_str() != "resnet50" => std::fs::read_to_string(p)
            .map_err(|e| Error::config(None, None, format!("cannot read manifest {}: {e}", p.display())))?,
        _ => RESNET50_MANIFEST.to_string(),
    };
    let layers = parse_manifest(&text)?;
    if args.workers.contains(&0) {
        return Err(Error::Argument("worker counts must be >= 1".into()));
    }
    let report = cost_report(&layers, &args.workers, &args.algorithms, args.inv_type);
    let table = report.render_table();
    if let Some(dir) = &args.out_dir {
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_atomic(&dir.join("cost.json"), json.as_bytes())?;
        write_atomic(&dir.join("cost.txt"), table.as_bytes())?;
    }
    Ok((report, table))
}

/// Generates a synthetic dataset and writes it as an IDX pair
/// (`<prefix>-images.idx`, `<prefix>-labels.idx`) in `out_dir`.
pub fn cmd_gen_data(params: &SyntheticParams, seed: u64, out_dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let data = gen_synthetic(params, seed)?;
    let images = out_dir.join(format!("{prefix}-images.idx"));
    let labels = out_dir.join(format!("{prefix}-labels.idx"));
    save_idx(&data, &images, &labels)?;
    Ok((images, labels))
}

/// Human-readable one-line summary of a finished run.
pub fn summarize(outcome: &TrainOutcome) -> String {
    let mut s = format!("iterations {}", outcome.iterations);
    if let Some(l) = outcome.final_train_loss {
        let _ = write!(s, ", last train loss {l:.6}");
    }
    if let Some(k) = outcome.iterations_to_target {
        let _ = write!(s, ", target reached after {k} iterations");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    const TOY: &str = "\
[network]
layers = 4, 6, 3
[data]
samples = 120
dim = 4
classes = 3
[train]
algorithm = dp_kfac
workers = 2
batch_size = 20
epochs = 2
lr = 0.05
";

    fn toy(overrides: &[&str]) -> RunConfig {
        parse_config(TOY, overrides).unwrap()
    }

    fn rows(cfg: &RunConfig, resume: Option<&Checkpoint>) -> (Vec<MetricsRow>, TrainOutcome) {
        let mut rows = Vec::new();
        let out = run_training(cfg, &AlgorithmRegistry::with_defaults(), resume, &mut |r| rows.push(r.clone())).unwrap();
        (rows, out)
    }

    #[test]
    fn epochs_iterations_and_eval_cadence() {
        let (rows, out) = rows(&toy(&[]), None);
        // 120 samples, 12 eval, 108 train, batch 20 -> 5 iterations per epoch.
        assert_eq!(out.iterations, 10);
        assert_eq!(rows.len(), 10);
        let evals: Vec<u64> = rows.iter().filter(|r| r.eval_loss.is_some()).map(|r| r.iteration).collect();
        assert_eq!(evals, vec![4, 9]);
        assert!(rows.iter().all(|r| r.log.factorcomm == 0));
    }

    #[test]
    fn resume_continues_exactly() {
        let cfg = toy(&["kfac.factor_freq=3", "kfac.inverse_freq=4"]);
        let (full, full_out) = rows(&cfg, None);
        let mut first = cfg.clone();
        first.max_iterations = Some(6);
        let (_, part) = rows(&first, None);
        let ckpt = Checkpoint::decode(&part.checkpoint.encode()).unwrap();
        let (rest, rest_out) = rows(&cfg, Some(&ckpt));
        assert_eq!(rest, full[6..].to_vec());
        assert_eq!(rest_out.network.weights(), full_out.network.weights());
    }

    #[test]
    fn target_stops_run() {
        let cfg = toy(&["train.target_loss=10", "train.target_check_every=2", "train.stop_at_target=true"]);
        let (rows, out) = rows(&cfg, None);
        assert_eq!(out.iterations_to_target, Some(2));
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn csv_line_has_all_columns() {
        let (rows, _) = rows(&toy(&[]), None);
        let cols = METRICS_HEADER.split(',').count();
        for r in &rows {
            assert_eq!(r.to_csv_line().split(',').count(), cols);
        }
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 3, 0), derive_seed(0, 3, 1));
        assert_eq!(derive_seed(5, 3, 7), derive_seed(5, 3, 7));
    }
}
