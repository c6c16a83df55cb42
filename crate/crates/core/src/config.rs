//! Run configuration: a sectioned `key = value` text format plus overrides.
//!
//! ```text
//! # comments start with '#'
//! [network]
//! layers = 64, 64, 10
//! activation = tanh
//!
//! [train]
//! algorithm = dp_kfac
//! workers = 4
//! ```
//!
//! Overrides use `section.key=value` and win over the file. A run-manifest
//! JSON written by a previous run is accepted in place of the text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticKind, SyntheticParams};
use crate::distsim::{AlgorithmKind, ShardPolicy};
use crate::error::{Error, Result};
use crate::kfac::KfacHyper;
use crate::model::{Activation, BiasMode, LossKind, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        params: SyntheticParams,
        /// Seed for the generator; the run seed when absent.
        seed: Option<u64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub data: DataSource,
    pub eval_fraction: f64,
    pub algorithm: AlgorithmKind,
    pub workers: usize,
    pub shard: ShardPolicy,
    pub hyper: KfacHyper,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_iters: u64,
    pub decay_epochs: Vec<u64>,
    pub epochs: u64,
    pub batch_size: usize,
    /// Hard cap on iterations across all epochs.
    pub max_iterations: Option<u64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Full-training-set loss to reach; checked every `target_check_every`
    /// iterations.
    pub target_loss: Option<f64>,
    pub target_check_every: u64,
    pub stop_at_target: bool,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkSpec::new(vec![64, 64, 10], Activation::Tanh, LossKind::SoftmaxCrossEntropy)
                .with_bias(BiasMode::Homogeneous),
            data: DataSource::Synthetic {
                params: SyntheticParams::default(),
                seed: None,
            },
            eval_fraction: 0.1,
            algorithm: AlgorithmKind::DpKfac,
            workers: 4,
            shard: ShardPolicy::Disjoint,
            hyper: KfacHyper::default(),
            lr: 0.1,
            momentum: 0.9,
            warmup_iters: 0,
            decay_epochs: Vec::new(),
            epochs: 1,
            batch_size: 128,
            max_iterations: None,
            seed: 0,
            out_dir: PathBuf::from("out"),
            target_loss: None,
            target_check_every: 10,
            stop_at_target: false,
            resume: None,
        }
    }
}

/// One `key = value` entry; `line` is `None` for overrides.
#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: Option<usize>,
}

/// Raw sectioned entries keyed by `section.key`.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(Some(line_no), None, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(
                        Some(line_no),
                        None,
                        format!("unknown section [{name}] (expected one of {})", SECTIONS.join(", ")),
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(line_no), None, "expected `key = value`"))?;
            let key = key.trim();
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::config(Some(line_no), Some(key), "key appears before any [section]"))?;
            let full = format!("{sec}.{key}");
            if entries.contains_key(&full) {
                return Err(Error::config(Some(line_no), Some(&full), "duplicate key"));
            }
            entries.insert(
                full,
                Entry {
                    value: value.trim().to_string(),
                    line: Some(line_no),
                },
            );
        }
        Ok(Self { entries })
    }

    /// Applies `section.key=value` overrides. `seed` and `out-dir`/`out_dir`
    /// are shorthands for `run.seed` and `run.out_dir`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(None, Some(o), "override must look like section.key=value"))?;
            let key = match key {
                "seed" => "run.seed".to_string(),
                "out-dir" | "out_dir" => "run.out_dir".to_string(),
                k => k.replace('-', "_"),
            };
            if !key.contains('.') {
                return Err(Error::config(None, Some(&key), "override key needs a section prefix"));
            }
            self.entries.insert(
                key,
                Entry {
                    value: value.to_string(),
                    line: None,
                },
            );
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut b = Builder {
            raw: self,
            used: Vec::new(),
        };
        let mut cfg = RunConfig::default();

        if let Some(v) = b.parse::<LayerList>("network.layers")? {
            cfg.network.layer_dims = v.0;
        }
        b.set(&mut cfg.network.activation, "network.activation")?;
        b.set(&mut cfg.network.loss, "network.loss")?;
        b.set(&mut cfg.network.bias, "network.bias")?;

        let kind = b.get("data.kind").map(|(v, _)| v.to_string());
        match kind.as_deref() {
            Some("idx") => {
                let images = b.path("data.images")?.ok_or_else(|| Error::config(None, Some("data.images"), "required for kind = idx"))?;
                let labels = b.path("data.labels")?.ok_or_else(|| Error::config(None, Some("data.labels"), "required for kind = idx"))?;
                cfg.data = DataSource::Idx { images, labels };
            }
            other => {
                let mut params = SyntheticParams::default();
                if let Some(k) = other {
                    let line = b.get("data.kind").and_then(|(_, l)| l);
                    params.kind = SyntheticKind::from_str(k)
                        .map_err(|_| Error::config(line, Some("data.kind"), format!("unknown kind `{k}` (expected gaussian_blobs, deep_linear_regression or idx)")))?;
                }
                b.set(&mut params.samples, "data.samples")?;
                b.set(&mut params.dim, "data.dim")?;
                b.set(&mut params.classes, "data.classes")?;
                b.set(&mut params.outputs, "data.outputs")?;
                b.set(&mut params.noise, "data.noise")?;
                b.set(&mut params.radius, "data.radius")?;
                b.set(&mut params.condition, "data.condition")?;
                let seed = b.parse::<u64>("data.seed")?;
                cfg.data = DataSource::Synthetic { params, seed };
            }
        }
        b.set(&mut cfg.eval_fraction, "data.eval_fraction")?;

        b.set(&mut cfg.algorithm, "train.algorithm")?;
        b.set(&mut cfg.workers, "train.workers")?;
        b.set(&mut cfg.shard, "train.shard")?;
        b.set(&mut cfg.lr, "train.lr")?;
        b.set(&mut cfg.momentum, "train.momentum")?;
        b.set(&mut cfg.warmup_iters, "train.warmup_iters")?;
        if let Some(v) = b.parse::<U64List>("train.decay_epochs")? {
            cfg.decay_epochs = v.0;
        }
        b.set(&mut cfg.epochs, "train.epochs")?;
        b.set(&mut cfg.batch_size, "train.batch_size")?;
        cfg.max_iterations = b.parse("train.max_iterations")?;
        cfg.target_loss = b.parse("train.target_loss")?;
        b.set(&mut cfg.target_check_every, "train.target_check_every")?;
        b.set(&mut cfg.stop_at_target, "train.stop_at_target")?;

        b.set(&mut cfg.hyper.damping, "kfac.damping")?;
        b.set(&mut cfg.hyper.running_avg, "kfac.running_avg")?;
        b.set(&mut cfg.hyper.inv_type, "kfac.inv_type")?;
        b.set(&mut cfg.hyper.factor_freq, "kfac.factor_freq")?;
        if let Some(v) = b.parse::<Freq>("kfac.inverse_freq")? {
            cfg.hyper.inverse_freq = v.0;
        }

        b.set(&mut cfg.seed, "run.seed")?;
        if let Some(p) = b.path("run.out_dir")? {
            cfg.out_dir = p;
        }
        cfg.resume = b.path("run.resume")?;

        if let Some((key, entry)) = self.entries.iter().find(|(k, _)| !b.used.contains(k)) {
            return Err(Error::config(entry.line, Some(key), "unknown key"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const SECTIONS: [&str; 5] = ["network", "data", "train", "kfac", "run"];

struct Builder<'a> {
    raw: &'a RawConfig,
    used: Vec<&'a String>,
}

impl<'a> Builder<'a> {
    fn get(&mut self, key: &str) -> Option<(&'a str, Option<usize>)> {
        let (k, e) = self.raw.entries.get_key_value(key)?;
        self.used.push(k);
        Some((e.value.as_str(), e.line))
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::config(line, Some(key), format!("invalid value `{v}`: {e}"))),
        }
    }

    fn set<T: FromStr>(&mut self, slot: &mut T, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parse(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        match self.get(key) {
            Some((v, line)) if v.is_empty() => Err(Error::config(line, Some(key), "empty path")),
            Some((v, _)) => Ok(Some(PathBuf::from(v))),
            None => Ok(None),
        }
    }
}

struct LayerList(Vec<usize>);

impl FromStr for LayerList {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{}`: {e}", t.trim())))
            .collect::<std::result::Result<_, _>>()
            .map(LayerList)
    }
}

struct U64List(Vec<u64>);

impl FromStr for U64List {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(U64List(Vec::new()));
        }
        s.split(',')
            .map(|t| t.trim().parse::<u64>().map_err(|e| format!("`{}`: {e}", t.trim())))
            .collect::<std::result::Result<_, _>>()
            .map(U64List)
    }
}

/// An iteration interval where `inf` means "never again after t = 0".
struct Freq(u64);

impl FromStr for Freq {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inf" | "never" => Ok(Freq(u64::MAX)),
            _ => s.parse().map(Freq).map_err(|e: std::num::ParseIntError| e.to_string()),
        }
    }
}

impl RunConfig {
    /// Checks cross-field constraints and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let key_err = |key: &str, msg: String| Error::config(None, Some(key), msg);
        self.network.validate().map_err(|e| key_err("network.layers", e.to_string()))?;
        self.hyper.validate().map_err(|e| key_err("kfac", e.to_string()))?;
        if self.workers == 0 {
            return Err(key_err("train.workers", "must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(key_err("train.batch_size", "must be >= 1".into()));
        }
        if self.shard == ShardPolicy::Disjoint && !self.batch_size.is_multiple_of(self.workers) {
            return Err(key_err(
                "train.batch_size",
                format!("{} is not divisible by {} workers under disjoint sharding", self.batch_size, self.workers),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(key_err("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(key_err("train.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(key_err("data.eval_fraction", format!("must lie in [0, 1), got {}", self.eval_fraction)));
        }
        if self.target_check_every == 0 {
            return Err(key_err("train.target_check_every", "must be >= 1".into()));
        }
        let dims = &self.network.layer_dims;
        match &self.data {
            DataSource::Synthetic { params, .. } => {
                params.validate().map_err(|e| key_err("data", e.to_string()))?;
                if dims[0] != params.dim {
                    return Err(key_err(
                        "network.layers",
                        format!("input width {} does not match data.dim {}", dims[0], params.dim),
                    ));
                }
                let (want, loss) = match params.kind {
                    SyntheticKind::GaussianBlobs => (params.classes, LossKind::SoftmaxCrossEntropy),
                    SyntheticKind::DeepLinearRegression => (params.outputs, LossKind::MeanSquaredError),
                };
                if *dims.last().unwrap() != want {
                    return Err(key_err(
                        "network.layers",
                        format!("output width {} does not match the {want} targets of {}", dims.last().unwrap(), params.kind),
                    ));
                }
                if self.network.loss != loss {
                    return Err(key_err("network.loss", format!("{} data needs loss = {loss}", params.kind)));
                }
            }
            DataSource::Idx { images, labels } => {
                for (key, p) in [("data.images", images), ("data.labels", labels)] {
                    if !p.is_file() {
                        return Err(key_err(key, format!("file {} does not exist", p.display())));
                    }
                }
            }
        }
        if let Some(r) = &self.resume {
            if !r.is_file() {
                return Err(key_err("run.resume", format!("checkpoint {} does not exist", r.display())));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let _ = writeln!(s, "[network]");
        let _ = writeln!(s, "layers = {}", join(&self.network.layer_dims));
        let _ = writeln!(s, "activation = {}", self.network.activation);
        let _ = writeln!(s, "loss = {}", self.network.loss);
        let _ = writeln!(s, "bias = {}", self.network.bias);
        let _ = writeln!(s, "\n[data]");
        match &self.data {
            DataSource::Synthetic { params, seed } => {
                let _ = writeln!(s, "kind = {}", params.kind);
                let _ = writeln!(s, "samples = {}", params.samples);
                let _ = writeln!(s, "dim = {}", params.dim);
                let _ = writeln!(s, "classes = {}", params.classes);
                let _ = writeln!(s, "outputs = {}", params.outputs);
                let _ = writeln!(s, "noise = {:?}", params.noise);
                let _ = writeln!(s, "radius = {:?}", params.radius);
                let _ = writeln!(s, "condition = {:?}", params.condition);
                if let Some(seed) = seed {
                    let _ = writeln!(s, "seed = {seed}");
                }
            }
            DataSource::Idx { images, labels } => {
                let _ = writeln!(s, "kind = idx");
                let _ = writeln!(s, "images = {}", images.display());
                let _ = writeln!(s, "labels = {}", labels.display());
            }
        }
        let _ = writeln!(s, "eval_fraction = {:?}", self.eval_fraction);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "algorithm = {}", self.algorithm);
        let _ = writeln!(s, "workers = {}", self.workers);
        let _ = writeln!(s, "shard = {}", self.shard);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "momentum = {:?}", self.momentum);
        let _ = writeln!(s, "warmup_iters = {}", self.warmup_iters);
        let decay: Vec<String> = self.decay_epochs.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(s, "decay_epochs = {}", decay.join(", "));
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        if let Some(m) = self.max_iterations {
            let _ = writeln!(s, "max_iterations = {m}");
        }
        if let Some(t) = self.target_loss {
            let _ = writeln!(s, "target_loss = {t:?}");
        }
        let _ = writeln!(s, "target_check_every = {}", self.target_check_every);
        let _ = writeln!(s, "stop_at_target = {}", self.stop_at_target);
        let _ = writeln!(s, "\n[kfac]");
        let _ = writeln!(s, "damping = {:?}", self.hyper.damping);
        let _ = writeln!(s, "running_avg = {:?}", self.hyper.running_avg);
        let _ = writeln!(s, "inv_type = {}", self.hyper.inv_type);
        let _ = writeln!(s, "factor_freq = {}", self.hyper.factor_freq);
        if self.hyper.inverse_freq == u64::MAX {
            let _ = writeln!(s, "inverse_freq = inf");
        } else {
            let _ = writeln!(s, "inverse_freq = {}", self.hyper.inverse_freq);
        }
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        if let Some(r) = &self.resume {
            let _ = writeln!(s, "resume = {}", r.display());
        }
        s
    }
}

/// JSON written next to a run's outputs. Loading it as a config reproduces
/// the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

pub const MANIFEST_FORMAT: &str = "dkfac-run-manifest/1";

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: crate::VERSION.into(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

/// Parses a text config or run-manifest JSON, then applies overrides.
pub fn parse_config<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<RunConfig> {
    if text.trim_start().starts_with('{') {
        let manifest: RunManifest = serde_json::from_str(text).map_err(|e| {
            Error::config(Some(e.line()), None, format!("invalid run manifest: {e}"))
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::config(None, Some("format"), format!("unsupported manifest format `{}`", manifest.format)));
        }
        if overrides.is_empty() {
            manifest.config.validate()?;
            return Ok(manifest.config);
        }
        let mut raw = RawConfig::parse(&manifest.config.to_text())?;
        raw.apply_overrides(overrides)?;
        return raw.resolve();
    }
    let mut raw = RawConfig::parse(text)?;
    raw.apply_overrides(overrides)?;
    raw.resolve()
}

pub fn load_config<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(None, None, format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kfac::InvType;

    const SAMPLE: &str = "\
# toy run
[network]
layers = 4, 8, 3
activation = tanh

[data]
kind = gaussian_blobs
samples = 60
dim = 4
classes = 3

[train]
algorithm = mpd_kfac_mo
workers = 2
batch_size = 10
decay_epochs = 3, 5

[kfac]
inverse_freq = inf
inv_type = inverse
";

    const NONE: &[&str] = &[];

    #[test]
    fn parses_sample() {
        let cfg = parse_config(SAMPLE, NONE).unwrap();
        assert_eq!(cfg.network.layer_dims, vec![4, 8, 3]);
        assert_eq!(cfg.algorithm, AlgorithmKind::MpdKfacMo);
        assert_eq!(cfg.hyper.inverse_freq, u64::MAX);
        assert_eq!(cfg.hyper.inv_type, InvType::Inverse);
        assert_eq!(cfg.decay_epochs, vec![3, 5]);
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn overrides_win() {
        let cfg = parse_config(SAMPLE, &["--train.workers=5", "seed=9", "--out-dir=/tmp/x", "train.batch_size=15"]).unwrap();
        assert_eq!(cfg.workers, 5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = parse_config("[train]\nworkers = two\n", NONE).unwrap_err();
        match err {
            Error::Config { line, key, .. } => {
                assert_eq!(line, Some(2));
                assert_eq!(key.as_deref(), Some("train.workers"));
            }
            other => panic!("{other}"),
        }
        let err = parse_config("[train]\nworkerz = 2\n", NONE).unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(2), .. }), "{err}");
        assert!(matches!(parse_config("[bogus]\n", NONE), Err(Error::Config { line: Some(1), .. })));
        assert!(matches!(parse_config("x = 1\n", NONE), Err(Error::Config { line: Some(1), .. })));
    }

    #[test]
    fn indivisible_batch_rejected() {
        let err = parse_config(SAMPLE, &["train.batch_size=11"]).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        assert!(parse_config(SAMPLE, &["train.batch_size=11", "train.shard=replicate"]).is_ok());
    }

    #[test]
    fn text_and_manifest_round_trip() {
        let cfg = parse_config(SAMPLE, &["train.lr=0.123456789012345678", "train.target_loss=0.3"]).unwrap();
        assert_eq!(parse_config(&cfg.to_text(), NONE).unwrap(), cfg);
        let json = serde_json::to_string_pretty(&RunManifest::new(&cfg)).unwrap();
        assert_eq!(parse_config(&json, NONE).unwrap(), cfg);
        let bumped = parse_config(&json, &["seed=3"]).unwrap();
        assert_eq!(bumped.seed, 3);
        assert_eq!(bumped.lr, cfg.lr);
    }

    #[test]
    fn missing_idx_files_rejected() {
        let err = parse_config(
            "[network]\nlayers = 4, 2\n[data]\nkind = idx\nimages = /nonexistent/a\nlabels = /nonexistent/b\n",
            NONE,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("does not exist"));
    }
}
