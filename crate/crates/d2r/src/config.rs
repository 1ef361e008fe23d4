//! TOML run configuration.
//!
//! ```toml
//! [run]
//! id = "moons-cag"          # run identifier written to every metrics row
//! seed = 0                  # base seed; D2R_SEED overrides it
//!
//! [dataset]
//! kind = "two_moons"        # two_moons | blobs | idx
//! n = 2000                  # two_moons, blobs: sample count
//! noise = 0.1               # two_moons: Gaussian noise sigma
//! # centers = [[0.2, 0.2], [0.8, 0.8]]   blobs: cluster centers in [0, 1]^d
//! # sigma = 0.05                         blobs: cluster spread
//! # images = "train-images-idx3-ubyte"   idx: image file
//! # labels = "train-labels-idx1-ubyte"   idx: label file
//! # per_class_limit = 100                idx: samples kept per class
//! test_fraction = 0.2       # share of samples held out for evaluation
//! # seed = 0                # synthesis and split seed, defaults to run.seed
//!
//! [guide]
//! layers = [2, 32, 2]       # input width first, class count last
//! # init_seed = 1           # defaults to a seed derived from run.seed
//!
//! [target]
//! layers = [2, 128, 128, 2]
//!
//! [train]
//! epochs = 40
//! batch_size = 128
//! lr = 0.1
//! momentum = 0.9
//! # lr_schedule = [[20, 0.1], [30, 0.1]]   (epoch, multiplier); default x0.1 at 1/2 and 3/4
//! lambda = 1.0
//! alpha = 30.0
//! beta = 20.0
//! generator = "cag"         # pgd | trades | cag
//! objective = "d2r"         # d2r | pgd_at
//! monitor_iterations = 20   # PGD iterations of the per-epoch robustness probe
//!
//! [train.attack]
//! epsilon = 0.031
//! eta = 0.007
//! iterations = 10
//! init = "uniform"          # uniform | zero
//! # seed = 0
//! # low = 0.0
//! # high = 1.0
//!
//! [[eval]]                  # zero or more; none means clean accuracy only
//! generator = "pgd"         # clean | fgsm | pgd | trades
//! epsilon = 0.031
//! eta = 0.007
//! iterations = 20
//! init = "zero"
//!
//! [output]
//! dir = "runs/moons-cag"    # D2R_OUTPUT_DIR overrides it
//! # metrics = "metrics.csv"  relative to dir
//! # checkpoints = "."        relative to dir
//! ```
//!
//! Relative paths are resolved against the directory holding the
//! configuration file.

use std::path::{Path, PathBuf};

use d2r_core::data::{make_blobs, make_two_moons};
use d2r_core::{
    derive_seed, AttackConfig, Dataset, EvalAttack, Generator, InitMode, InputBounds, LossWeights, ModelSpec,
    Objective, TrainConfig,
};
use serde::Deserialize;
use thiserror::Error;

use crate::idx::{load_idx_subset, DEFAULT_PER_CLASS_LIMIT};

pub const SEED_ENV: &str = "D2R_SEED";
pub const OUTPUT_DIR_ENV: &str = "D2R_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run: RawRun,
    dataset: RawDataset,
    guide: RawModel,
    target: RawModel,
    train: RawTrain,
    #[serde(default)]
    eval: Vec<RawAttack>,
    output: RawOutput,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    id: String,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    kind: String,
    n: Option<usize>,
    noise: Option<f64>,
    centers: Option<Vec<Vec<f64>>>,
    sigma: Option<f64>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    per_class_limit: Option<usize>,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    seed: Option<u64>,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    layers: Vec<usize>,
    init_seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: usize,
    batch_size: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    lr_schedule: Option<Vec<(usize, f64)>>,
    lambda: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    generator: Option<String>,
    objective: Option<String>,
    monitor_iterations: Option<usize>,
    attack: Option<RawAttack>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    generator: Option<String>,
    epsilon: Option<f64>,
    eta: Option<f64>,
    iterations: Option<usize>,
    init: Option<String>,
    seed: Option<u64>,
    low: Option<f64>,
    high: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: PathBuf,
    metrics: Option<PathBuf>,
    checkpoints: Option<PathBuf>,
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    TwoMoons { n: usize, noise: f64 },
    Blobs { n: usize, centers: Vec<Vec<f64>>, sigma: f64 },
    Idx { images: PathBuf, labels: PathBuf, per_class_limit: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub test_fraction: f64,
    pub seed: u64,
}

impl DatasetConfig {
    /// Builds the dataset with its train/test split.
    pub fn load(&self) -> Result<Dataset, String> {
        let dataset = match &self.source {
            DatasetSource::TwoMoons { n, noise } => make_two_moons(*n, *noise, self.seed).map_err(|e| e.to_string())?,
            DatasetSource::Blobs { n, centers, sigma } => {
                make_blobs(*n, centers, *sigma, self.seed).map_err(|e| e.to_string())?
            }
            DatasetSource::Idx {
                images,
                labels,
                per_class_limit,
            } => load_idx_subset(images, labels, *per_class_limit).map_err(|e| e.to_string())?,
        };
        dataset
            .split_holdout(self.test_fraction, derive_seed(self.seed, 7))
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub guide: ModelSpec,
    pub target: ModelSpec,
    pub train: TrainConfig,
    pub eval: Vec<EvalAttack>,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Reads, validates and resolves the configuration at `path`, applying
    /// the `D2R_SEED` and `D2R_OUTPUT_DIR` overrides from the environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let seed = std::env::var(SEED_ENV).ok();
        let output_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, path, base, seed.as_deref(), output_dir)
    }

    /// As [`RunConfig::load`] with the text and overrides supplied directly.
    pub fn from_toml(
        text: &str,
        path: &Path,
        base: &Path,
        seed_override: Option<&str>,
        output_override: Option<PathBuf>,
    ) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let seed = match seed_override {
            Some(s) => s
                .trim()
                .parse()
                .map_err(|_| invalid(SEED_ENV, format!("'{s}' is not an unsigned integer")))?,
            None => raw.run.seed,
        };
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let run_id = raw.run.id.clone();
        if run_id.is_empty() || run_id.contains([',', '\n', '\r', '"', '/', '\\']) {
            return Err(invalid(
                "run.id",
                "must be non-empty without commas, quotes, slashes or line breaks",
            ));
        }

        let dataset = dataset_config(&raw.dataset, seed, &resolve)?;
        let guide = model_spec("guide", &raw.guide, derive_seed(seed, 10))?;
        let target = model_spec("target", &raw.target, derive_seed(seed, 11))?;
        if guide.input_dim() != target.input_dim() || guide.class_count() != target.class_count() {
            return Err(invalid("target.layers", "input and class widths must match the guide"));
        }
        let train = train_config(&raw.train, seed)?;
        let eval = raw
            .eval
            .iter()
            .enumerate()
            .map(|(i, a)| eval_attack(&format!("eval[{i}]"), a))
            .collect::<Result<Vec<_>, _>>()?;

        let dir = output_override.unwrap_or_else(|| resolve(&raw.output.dir));
        let metrics = dir.join(raw.output.metrics.as_deref().unwrap_or(Path::new("metrics.csv")));
        let checkpoints = dir.join(raw.output.checkpoints.as_deref().unwrap_or(Path::new(".")));
        Ok(Self {
            run_id,
            seed,
            dataset,
            guide,
            target,
            train,
            eval,
            output: OutputConfig {
                dir,
                metrics,
                checkpoints,
            },
        })
    }
}

fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T, ConfigError> {
    value.clone().ok_or_else(|| invalid(key, "missing"))
}

fn unused(present: bool, key: &str, kind: &str) -> Result<(), ConfigError> {
    if present {
        return Err(invalid(key, format!("not used by dataset kind '{kind}'")));
    }
    Ok(())
}

fn dataset_config(raw: &RawDataset, seed: u64, resolve: &dyn Fn(&Path) -> PathBuf) -> Result<DatasetConfig, ConfigError> {
    let kind = raw.kind.as_str();
    let source = match kind {
        "two_moons" => {
            unused(raw.centers.is_some(), "dataset.centers", kind)?;
            unused(raw.sigma.is_some(), "dataset.sigma", kind)?;
            DatasetSource::TwoMoons {
                n: require(&raw.n, "dataset.n")?,
                noise: raw.noise.unwrap_or(0.1),
            }
        }
        "blobs" => {
            unused(raw.noise.is_some(), "dataset.noise", kind)?;
            DatasetSource::Blobs {
                n: require(&raw.n, "dataset.n")?,
                centers: require(&raw.centers, "dataset.centers")?,
                sigma: raw.sigma.unwrap_or(0.05),
            }
        }
        "idx" => {
            for (present, key) in [
                (raw.n.is_some(), "dataset.n"),
                (raw.noise.is_some(), "dataset.noise"),
                (raw.centers.is_some(), "dataset.centers"),
                (raw.sigma.is_some(), "dataset.sigma"),
            ] {
                unused(present, key, kind)?;
            }
            let images = resolve(&require(&raw.images, "dataset.images")?);
            let labels = resolve(&require(&raw.labels, "dataset.labels")?);
            for (p, key) in [(&images, "dataset.images"), (&labels, "dataset.labels")] {
                if !p.is_file() {
                    return Err(invalid(key, format!("{} does not exist", p.display())));
                }
            }
            DatasetSource::Idx {
                images,
                labels,
                per_class_limit: raw.per_class_limit.unwrap_or(DEFAULT_PER_CLASS_LIMIT),
            }
        }
        other => {
            return Err(invalid(
                "dataset.kind",
                format!("unknown kind '{other}', expected two_moons, blobs or idx"),
            ))
        }
    };
    if kind != "idx" {
        unused(raw.images.is_some(), "dataset.images", kind)?;
        unused(raw.labels.is_some(), "dataset.labels", kind)?;
        unused(raw.per_class_limit.is_some(), "dataset.per_class_limit", kind)?;
    }
    if !(0.0..1.0).contains(&raw.test_fraction) {
        return Err(invalid("dataset.test_fraction", "must lie in [0, 1)"));
    }
    Ok(DatasetConfig {
        source,
        test_fraction: raw.test_fraction,
        seed: raw.seed.unwrap_or(seed),
    })
}

fn model_spec(section: &str, raw: &RawModel, default_seed: u64) -> Result<ModelSpec, ConfigError> {
    ModelSpec::new(raw.layers.clone(), raw.init_seed.unwrap_or(default_seed))
        .map_err(|e| invalid(format!("{section}.layers"), e.to_string()))
}

fn attack_config(key: &str, raw: &RawAttack, defaults: AttackConfig) -> Result<AttackConfig, ConfigError> {
    let init = match raw.init.as_deref() {
        None => defaults.init,
        Some(name) => InitMode::from_name(name)
            .ok_or_else(|| invalid(format!("{key}.init"), format!("unknown init '{name}', expected uniform or zero")))?,
    };
    let cfg = AttackConfig {
        epsilon: raw.epsilon.unwrap_or(defaults.epsilon),
        eta: raw.eta.unwrap_or(defaults.eta),
        iterations: raw.iterations.unwrap_or(defaults.iterations),
        init,
        bounds: InputBounds {
            low: raw.low.unwrap_or(defaults.bounds.low),
            high: raw.high.unwrap_or(defaults.bounds.high),
        },
        seed: raw.seed.unwrap_or(defaults.seed),
    };
    cfg.validate().map_err(|e| invalid(key, e.to_string()))?;
    Ok(cfg)
}

fn train_config(raw: &RawTrain, seed: u64) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::new(raw.epochs);
    cfg.seed = seed;
    if let Some(v) = raw.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = raw.lr {
        cfg.lr = v;
    }
    if let Some(v) = raw.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = &raw.lr_schedule {
        cfg.lr_schedule = v.clone();
    }
    let defaults = LossWeights::default();
    cfg.weights = LossWeights {
        lambda: raw.lambda.unwrap_or(defaults.lambda),
        alpha: raw.alpha.unwrap_or(defaults.alpha),
        beta: raw.beta.unwrap_or(defaults.beta),
    };
    cfg.weights.validate().map_err(|e| invalid("train", e.to_string()))?;
    if let Some(name) = &raw.generator {
        cfg.generator = match Generator::from_name(name) {
            Some(g) if g != Generator::Fgsm => g,
            _ => {
                return Err(invalid(
                    "train.generator",
                    format!("unknown generator '{name}', expected pgd, trades or cag"),
                ))
            }
        };
    }
    if let Some(name) = &raw.objective {
        cfg.objective = Objective::from_name(name)
            .ok_or_else(|| invalid("train.objective", format!("unknown objective '{name}', expected d2r or pgd_at")))?;
    }
    let raw_attack = raw.attack.clone().unwrap_or_default();
    if raw_attack.generator.is_some() {
        return Err(invalid("train.attack.generator", "set the training generator in train.generator"));
    }
    cfg.attack = attack_config("train.attack", &raw_attack, AttackConfig::default())?;
    let mut monitor = EvalAttack::pgd20(cfg.attack.epsilon, cfg.attack.eta);
    if let (Some(n), EvalAttack::Pgd(c)) = (raw.monitor_iterations, &mut monitor) {
        c.iterations = n;
    }
    cfg.monitor = monitor;
    cfg.validate().map_err(|e| invalid("train", e.to_string()))?;
    Ok(cfg)
}

fn eval_attack(key: &str, raw: &RawAttack) -> Result<EvalAttack, ConfigError> {
    let name = require(&raw.generator, &format!("{key}.generator"))?;
    let defaults = AttackConfig {
        iterations: 20,
        init: InitMode::Zero,
        ..AttackConfig::default()
    };
    Ok(match name.as_str() {
        "clean" => EvalAttack::Clean,
        "fgsm" => {
            let mut cfg = attack_config(key, raw, defaults)?;
            cfg.eta = cfg.epsilon;
            cfg.iterations = 1;
            EvalAttack::Fgsm(cfg)
        }
        "pgd" => EvalAttack::Pgd(attack_config(key, raw, defaults)?),
        "trades" => EvalAttack::Trades(attack_config(
            key,
            raw,
            AttackConfig {
                init: InitMode::UniformBall,
                ..defaults
            },
        )?),
        other => {
            return Err(invalid(
                format!("{key}.generator"),
                format!("unknown generator '{other}', expected clean, fgsm, pgd or trades"),
            ))
        }
    })
}
