//! Run configuration: one TOML file plus command-line overrides.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//! template = "template.txt"   # optional
//!
//! [corpus]
//! dataset = "data/alpaca.jsonl"
//! format = "alpaca"
//! splits = [200, 800, 800]
//! pool_size = 20
//!
//! [embedder]      # kind = "hash" | "file" | "http"
//! [env]           # kind = "mock" | "http", plus [env.http]
//! [reward]        # lambda
//! [train]         # everything else the trainer takes
//! ```
//!
//! The run seed, reward lambda and environment kind live at one place each;
//! `[train]` may not repeat them. The model width is `train.hgt.dim` and must
//! match `embedder.dim` (`--dim` sets both).

use std::fs;
use std::path::{Path, PathBuf};

use grlprompt::embedder::EmbedderConfig;
use grlprompt::env::HttpEnvConfig;
use grlprompt::trainer::EnvKind;
use grlprompt::{DatasetFormat, RewardConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failure; maps to exit code 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self(message.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Train, validation and test sizes.
    pub splits: [usize; 3],
    pub pool_size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            dataset: None,
            format: DatasetFormat::Alpaca,
            splits: [200, 800, 800],
            pool_size: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub http: HttpEnvConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub embedder: EmbedderConfig,
    pub env: EnvSection,
    pub reward: RewardConfig,
    pub train: TrainConfig,
}

const OWNED_ELSEWHERE: [(&str, &str); 3] = [
    ("seed", "the top-level `seed`"),
    ("lambda", "`reward.lambda`"),
    ("env", "`env.kind`"),
];

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub env: Option<EnvKind>,
    pub template: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub k_max: Option<usize>,
    pub variant: Option<Variant>,
    pub hgt_layers: Option<usize>,
    pub heads: Option<usize>,
    pub dim: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub format: Option<DatasetFormat>,
    pub splits: Option<[usize; 3]>,
    pub pool_size: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new(e.to_string()))?;
        if let Some(train) = raw.get("train").and_then(toml::Value::as_table) {
            for (key, owner) in OWNED_ELSEWHERE {
                if train.contains_key(key) {
                    return Err(ConfigError::new(format!("`train.{key}` is not allowed; set {owner}")));
                }
            }
        }
        toml::from_str(text).map_err(|e| ConfigError::new(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("reading config {}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.corpus.dataset);
        rebase(&mut config.template);
        rebase(&mut config.embedder.path);
        rebase(&mut config.out_dir);
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = Some(v.clone());
        }
        if let Some(v) = o.env {
            self.env.kind = v;
        }
        if let Some(v) = &o.template {
            self.template = Some(v.clone());
        }
        if let Some(v) = o.lambda {
            self.reward.lambda = v;
        }
        if let Some(v) = o.k_max {
            self.train.k_max = v;
        }
        if let Some(v) = o.variant {
            self.train.variant = v;
        }
        if let Some(v) = o.hgt_layers {
            self.train.hgt.layers = v;
        }
        if let Some(v) = o.heads {
            self.train.hgt.heads = v;
        }
        if let Some(v) = o.dim {
            self.train.hgt.dim = v;
            self.embedder.dim = v;
        }
        if let Some(v) = &o.dataset {
            self.corpus.dataset = Some(v.clone());
        }
        if let Some(v) = o.format {
            self.corpus.format = v;
        }
        if let Some(v) = o.splits {
            self.corpus.splits = v;
        }
        if let Some(v) = o.pool_size {
            self.corpus.pool_size = v;
        }
        self.sync();
    }

    /// Copies the single-owner values into the training config.
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
        self.train.lambda = self.reward.lambda;
        self.train.env = self.env.kind;
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self, needs_dataset: bool) -> Result<(), ConfigError> {
        if needs_dataset && self.corpus.dataset.is_none() {
            return Err(ConfigError::new("missing required field `corpus.dataset` (or pass --dataset)"));
        }
        if self.corpus.pool_size == 0 {
            return Err(ConfigError::new("`corpus.pool_size` must be at least 1"));
        }
        if self.corpus.pool_size > self.corpus.splits[0] {
            return Err(ConfigError::new(format!(
                "`corpus.pool_size` ({}) exceeds the train split ({})",
                self.corpus.pool_size, self.corpus.splits[0]
            )));
        }
        if self.embedder.dim != self.train.hgt.dim {
            return Err(ConfigError::new(format!(
                "`embedder.dim` ({}) must equal `train.hgt.dim` ({})",
                self.embedder.dim, self.train.hgt.dim
            )));
        }
        self.embedder.validate().map_err(|e| ConfigError::new(format!("embedder: {e}")))?;
        self.reward.validate().map_err(|e| ConfigError::new(format!("reward: {e}")))?;
        self.train.validate().map_err(|e| ConfigError::new(format!("train: {e}")))?;
        if self.env.kind == EnvKind::Http && (self.env.http.base_url.is_none() || self.env.http.model.is_none()) {
            return Err(ConfigError::new("http env needs `env.http.base_url` and `env.http.model`"));
        }
        Ok(())
    }

    /// TOML text that [`RunConfig::parse`] reads back to the same config.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("run config serializes");
        if let Some(train) = table.get_mut("train").and_then(toml::Value::as_table_mut) {
            for (key, _) in OWNED_ELSEWHERE {
                train.remove(key);
            }
        }
        toml::to_string_pretty(&table).expect("run config serializes")
    }
}

pub fn parse_splits(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected three comma-separated sizes, e.g. 200,800,800".to_owned())
}

pub fn parse_env_kind(s: &str) -> Result<EnvKind, String> {
    match s {
        "mock" => Ok(EnvKind::Mock),
        "http" => Ok(EnvKind::Http),
        _ => Err(format!("unknown env `{s}` (expected mock or http)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(err.0.contains("bogus"), "{err}");
        let err = RunConfig::parse("[train]\nlearnig_rate = 0.1\n").unwrap_err();
        assert!(err.0.contains("learnig_rate"), "{err}");
    }

    #[test]
    fn duplicated_owners_are_rejected() {
        let err = RunConfig::parse("[train]\nlambda = 0.5\n").unwrap_err();
        assert!(err.0.contains("reward.lambda"), "{err}");
    }

    #[test]
    fn flags_win_over_file() {
        let mut c = RunConfig::parse("seed = 1\n[reward]\nlambda = 0.2\n[train]\nk_max = 3\n").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            lambda: Some(0.7),
            dim: Some(16),
            ..Default::default()
        });
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.lambda, 0.7);
        assert_eq!(c.train.k_max, 3);
        assert_eq!((c.embedder.dim, c.train.hgt.dim), (16, 16));
    }

    #[test]
    fn validation_names_the_field() {
        let c = RunConfig::default();
        assert!(c.validate(true).unwrap_err().0.contains("corpus.dataset"));
        let mut c = RunConfig::default();
        c.embedder.dim = 8;
        assert!(c.validate(false).unwrap_err().0.contains("embedder.dim"));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.corpus.dataset = Some("d.jsonl".into());
        c.seed = 5;
        c.reward.lambda = 0.25;
        c.sync();
        let mut back = RunConfig::parse(&c.to_toml()).unwrap();
        back.sync();
        assert_eq!(back, c);
    }

    #[test]
    fn splits_flag() {
        assert_eq!(parse_splits("1, 2,3").unwrap(), [1, 2, 3]);
        assert!(parse_splits("1,2").is_err());
    }
}
