//! Run configuration: defaults, a flat `key = value` file, and overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rotq::dataset::SplitSpec;
use rotq::featstore::NormMode;
use rotq::imgops::AngleDeg;
use rotq::nn::TrainConfig;
use rotq::pipeline::SelectionMode;
use rotq::qlearn::QConfig;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const DEFAULT_IMAGES: &str = "data/mnist/train-images-idx3-ubyte";
pub const DEFAULT_LABELS: &str = "data/mnist/train-labels-idx1-ubyte";

/// Where the labelled image pool comes from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    pub split: u64,
    pub train: u64,
    pub rl: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            split: seed,
            train: seed,
            rl: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataSource,
    /// Output locations stay out of the echo so reruns elsewhere compare equal.
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip)]
    pub store: Option<PathBuf>,
    #[serde(skip)]
    pub out: PathBuf,
    pub seeds: Seeds,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub qlearn: QConfig,
    pub selection: SelectionMode,
    pub norm: NormMode,
    /// Seeds swept by `bench`.
    pub bench_seeds: Vec<u64>,
    /// Norm modes swept by `bench`.
    pub bench_norms: Vec<NormMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Idx {
                images: DEFAULT_IMAGES.into(),
                labels: DEFAULT_LABELS.into(),
            },
            checkpoint: None,
            store: None,
            out: "out".into(),
            seeds: Seeds::all(1),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            qlearn: QConfig::default(),
            selection: SelectionMode::Oracle,
            norm: NormMode::Raw,
            bench_seeds: vec![1, 2, 3],
            bench_norms: vec![NormMode::Raw, NormMode::UnitL2],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    /// Defaults overlaid with the entries of a config file.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!(
                    "line {}: expected key = value, got '{line}'",
                    n + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "data.images" | "data.labels" => {
                let (mut images, mut labels) = match &self.data {
                    DataSource::Idx { images, labels } => (images.clone(), labels.clone()),
                    DataSource::Csv { .. } => (DEFAULT_IMAGES.into(), DEFAULT_LABELS.into()),
                };
                if key == "data.images" {
                    images = value.into();
                } else {
                    labels = value.into();
                }
                self.data = DataSource::Idx { images, labels };
            }
            "data.csv" => self.data = DataSource::Csv { path: value.into() },
            "checkpoint" => self.checkpoint = Some(value.into()),
            "store" => self.store = Some(value.into()),
            "out" => self.out = value.into(),
            "seed" => self.seeds = Seeds::all(parse(key, value)?),
            "seed.split" => self.seeds.split = parse(key, value)?,
            "seed.train" => self.seeds.train = parse(key, value)?,
            "seed.rl" => self.seeds.rl = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.validation_frequency" => self.train.validation_frequency = parse(key, value)?,
            "split.n_train" => self.split.n_train = parse(key, value)?,
            "split.n_val" => self.split.n_val = parse(key, value)?,
            "split.n_test" => self.split.n_test = parse(key, value)?,
            "split.stratified" => self.split.stratified = parse(key, value)?,
            "q.alpha" => self.qlearn.alpha = parse(key, value)?,
            "q.gamma" => self.qlearn.gamma = parse(key, value)?,
            "q.delta" => self.qlearn.delta = parse(key, value)?,
            "q.m" => self.qlearn.m = parse(key, value)?,
            "q.actions" => {
                self.qlearn.actions = parse_list::<f64>(key, value)?
                    .into_iter()
                    .map(AngleDeg)
                    .collect()
            }
            "selection" => {
                self.selection = value
                    .parse()
                    .map_err(|e| CliError::config(format!("{key}: {e}")))?
            }
            "selection.tau" => {
                self.selection = SelectionMode::Margin {
                    tau: parse(key, value)?,
                }
            }
            "norm" => {
                self.norm = value
                    .parse()
                    .map_err(|e| CliError::config(format!("{key}: {e}")))?
            }
            "bench.seeds" => self.bench_seeds = parse_list(key, value)?,
            "bench.norms" => self.bench_norms = parse_list(key, value)?,
            other => return Err(CliError::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Copy the seed triple into the component configs.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.split.rng_seed = self.seeds.split;
        cfg.train.rng_seed = self.seeds.train;
        cfg.qlearn.rng_seed = self.seeds.rl;
        cfg
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.rqm"))
    }

    pub fn store_path(&self) -> PathBuf {
        self.store
            .clone()
            .unwrap_or_else(|| self.out.join(format!("store-{}.rqf", self.norm.name())))
    }

    /// Hyperparameter checks and input-path existence.
    pub fn validate(&self) -> CliResult<()> {
        let wrap = |e: rotq::Error| CliError::config(e.to_string());
        self.train.validate().map_err(wrap)?;
        self.qlearn.validate().map_err(wrap)?;
        self.selection.validate().map_err(wrap)?;
        if self.bench_seeds.is_empty() {
            return Err(CliError::config("bench.seeds is empty"));
        }
        if self.bench_norms.is_empty() {
            return Err(CliError::config("bench.norms is empty"));
        }
        let paths: Vec<&Path> = match &self.data {
            DataSource::Idx { images, labels } => vec![images, labels],
            DataSource::Csv { path } => vec![path],
        };
        for p in paths {
            if !p.is_file() {
                return Err(CliError::config(format!(
                    "dataset file not found: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}
