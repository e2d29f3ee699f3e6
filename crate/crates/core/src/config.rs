//! Flat `key = value` run configuration covering every tunable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::interaction::LogFormat;
use crate::model::ModelConfig;
use crate::network::{NetworkConfig, DEFAULT_FUTURE_CAP};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Top-level seed; every random stream is derived from it.
    pub seed: u64,
    pub split_fraction: f64,
    pub delimiter: char,
    pub network: NetworkConfig,
    /// Most interactions taken from any one neighbor's future.
    pub future_cap: usize,
    pub model: ModelConfig,
    /// `None` uses the time span of the training split.
    pub time_scale: Option<f64>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Evaluate after every epoch as well as at the end.
    pub validate_each_epoch: bool,
    pub log: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            split_fraction: 0.8,
            delimiter: ',',
            network: NetworkConfig::default(),
            future_cap: DEFAULT_FUTURE_CAP,
            model: ModelConfig::default(),
            time_scale: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            validate_each_epoch: false,
            log: None,
            out: None,
        }
    }
}

/// Every accepted key, in the order they are written out.
pub const KEYS: &[&str] = &[
    "seed",
    "split_fraction",
    "delimiter",
    "query_items",
    "candidate_cap",
    "similarity_threshold",
    "max_neighbors",
    "similarity",
    "future_cap",
    "dim",
    "trends",
    "time_power",
    "time_scale",
    "neg_weight",
    "learning_rate",
    "batch_size",
    "l2_reg",
    "epochs",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "neg_ratio",
    "eval_n",
    "pool_size",
    "validate_each_epoch",
    "log",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "split_fraction" => self.split_fraction = parse(key, v)?,
            "delimiter" => {
                self.delimiter = match v {
                    "tab" | "\\t" => '\t',
                    _ => {
                        let mut chars = v.chars();
                        match (chars.next(), chars.next()) {
                            (Some(c), None) => c,
                            _ => {
                                return Err(Error::InvalidArgument(format!(
                                    "delimiter must be one character, got {v:?}"
                                )))
                            }
                        }
                    }
                }
            }
            "query_items" => self.network.query_items = parse(key, v)?,
            "candidate_cap" => self.network.candidate_cap = parse(key, v)?,
            "similarity_threshold" => self.network.threshold = parse(key, v)?,
            "max_neighbors" => self.network.max_neighbors = parse(key, v)?,
            "similarity" => self.network.similarity = v.parse()?,
            "future_cap" => self.future_cap = parse(key, v)?,
            "dim" => self.model.dim = parse(key, v)?,
            "trends" => self.model.trends = parse(key, v)?,
            "time_power" => self.model.time_power = parse(key, v)?,
            "time_scale" => {
                self.time_scale = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "neg_weight" => self.model.neg_weight = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "l2_reg" => self.train.l2_reg = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.train.adam_eps = parse(key, v)?,
            "neg_ratio" => self.train.neg_ratio = parse(key, v)?,
            "eval_n" => self.eval.n = parse(key, v)?,
            "pool_size" => self.eval.pool_size = parse(key, v)?,
            "validate_each_epoch" => self.validate_each_epoch = parse(key, v)?,
            "log" => self.log = path_value(v),
            "out" => self.out = path_value(v),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Current value of a key in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        Some(match key {
            "seed" => self.seed.to_string(),
            "split_fraction" => self.split_fraction.to_string(),
            "delimiter" => match self.delimiter {
                '\t' => "tab".into(),
                c => c.to_string(),
            },
            "query_items" => self.network.query_items.to_string(),
            "candidate_cap" => self.network.candidate_cap.to_string(),
            "similarity_threshold" => self.network.threshold.to_string(),
            "max_neighbors" => self.network.max_neighbors.to_string(),
            "similarity" => self.network.similarity.as_str().into(),
            "future_cap" => self.future_cap.to_string(),
            "dim" => self.model.dim.to_string(),
            "trends" => self.model.trends.to_string(),
            "time_power" => self.model.time_power.to_string(),
            "time_scale" => self.time_scale.map_or("auto".into(), |t| t.to_string()),
            "neg_weight" => self.model.neg_weight.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "l2_reg" => self.train.l2_reg.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "adam_beta1" => self.train.adam_beta1.to_string(),
            "adam_beta2" => self.train.adam_beta2.to_string(),
            "adam_eps" => self.train.adam_eps.to_string(),
            "neg_ratio" => self.train.neg_ratio.to_string(),
            "eval_n" => self.eval.n.to_string(),
            "pool_size" => self.eval.pool_size.to_string(),
            "validate_each_epoch" => self.validate_each_epoch.to_string(),
            "log" => path(&self.log),
            "out" => path(&self.out),
            _ => return None,
        })
    }

    /// Parses a config file body on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Record {
                line: n + 1,
                message: format!("expected key = value, found {line:?}"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "config key {key:?} given twice"
                )));
            }
            cfg.set(key, value)?;
        }
        cfg.sync_seeds();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Propagates the top-level seed into the per-module configs.
    pub fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.future_cap == 0 {
            return Err(Error::InvalidArgument("future cap must be >= 1".into()));
        }
        if let Some(t) = self.time_scale {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "time scale must be positive, got {t}"
                )));
            }
        }
        self.network.validate()?;
        let mut model = self.model;
        model.time_scale = self.time_scale.unwrap_or(1.0);
        model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn log_format(&self) -> LogFormat {
        LogFormat {
            delimiter: self.delimiter,
        }
    }

    /// Canonical text form: every key, one per line, in `KEYS` order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// SHA-256 of the canonical text form, hex encoded. The output
    /// directory does not affect results and is left out.
    pub fn hash(&self) -> String {
        let mut text = self.clone();
        text.out = None;
        hex::encode(Sha256::digest(text.to_text().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
