//! Instruction-tuning datasets: loading, seeded splits and the candidate pool.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("not enough examples: requested {requested}, available {available}")]
    Size { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// One (query, context, response) record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateExample {
    pub query: String,
    pub context: Option<String>,
    pub response: String,
}

impl CandidateExample {
    /// Builds an example, canonicalizing an empty context to `None`.
    pub fn new(
        query: impl Into<String>,
        context: Option<String>,
        response: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let query = query.into();
        let response = response.into();
        if query.trim().is_empty() {
            return Err(CorpusError::Schema {
                line: 0,
                message: "query is empty".into(),
            });
        }
        if response.is_empty() {
            return Err(CorpusError::Schema {
                line: 0,
                message: "response is empty".into(),
            });
        }
        Ok(Self {
            query,
            context: context.filter(|c| !c.is_empty()),
            response,
        })
    }

    /// Serializes back to one JSON line in the given source format.
    pub fn to_jsonl(&self, format: DatasetFormat) -> String {
        let (ctx_key, resp_key) = format.field_names();
        let mut obj = Map::new();
        obj.insert("instruction".into(), Value::String(self.query.clone()));
        obj.insert(
            ctx_key.into(),
            Value::String(self.context.clone().unwrap_or_default()),
        );
        obj.insert(resp_key.into(), Value::String(self.response.clone()));
        Value::Object(obj).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `instruction` / `input` / `output`
    Alpaca,
    /// `instruction` / `context` / `response`
    Dolly,
}

impl DatasetFormat {
    fn field_names(self) -> (&'static str, &'static str) {
        match self {
            DatasetFormat::Alpaca => ("input", "output"),
            DatasetFormat::Dolly => ("context", "response"),
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "alpaca" | "alpaca_jsonl" => Ok(DatasetFormat::Alpaca),
            "dolly" | "dolly_jsonl" => Ok(DatasetFormat::Dolly),
            other => Err(CorpusError::Argument(format!(
                "unknown dataset format {other:?} (expected alpaca or dolly)"
            ))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::Alpaca => f.write_str("alpaca"),
            DatasetFormat::Dolly => f.write_str("dolly"),
        }
    }
}

/// Loads a JSON-lines dataset file. Blank lines are skipped.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
) -> Result<Vec<CandidateExample>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, format)
}

pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<Vec<CandidateExample>, CorpusError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        out.push(parse_record(raw, idx + 1, format)?);
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    Ok(out)
}

fn parse_record(raw: &str, line: usize, format: DatasetFormat) -> Result<CandidateExample, CorpusError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::Parse {
        line,
        message: "record is not a JSON object".into(),
    })?;
    let (ctx_key, resp_key) = format.field_names();
    let field = |key: &str, required: bool| -> Result<Option<String>, CorpusError> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(Value::Null) | None if !required => Ok(None),
            Some(Value::Null) | None => Err(CorpusError::Schema {
                line,
                message: format!("missing required field `{key}`"),
            }),
            Some(_) => Err(CorpusError::Schema {
                line,
                message: format!("field `{key}` is not a string"),
            }),
        }
    };
    let query = field("instruction", true)?.unwrap_or_default();
    let context = field(ctx_key, false)?;
    let response = field(resp_key, true)?.unwrap_or_default();
    CandidateExample::new(query, context, response).map_err(|e| match e {
        CorpusError::Schema { message, .. } => CorpusError::Schema { line, message },
        other => other,
    })
}

/// Disjoint train/val/test partition drawn from one seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<CandidateExample>,
    pub val: Vec<CandidateExample>,
    pub test: Vec<CandidateExample>,
    pub seed: u64,
}

/// Shuffles indices with a seeded RNG, then slices contiguous runs of
/// `sizes.0`, `sizes.1` and `sizes.2` items.
pub fn split(
    examples: &[CandidateExample],
    seed: u64,
    sizes: (usize, usize, usize),
) -> Result<DatasetSplit, CorpusError> {
    let (n_train, n_val, n_test) = sizes;
    let requested = n_train + n_val + n_test;
    if requested > examples.len() {
        return Err(CorpusError::Size {
            requested,
            available: examples.len(),
        });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| -> Vec<CandidateExample> {
        order[range].iter().map(|&i| examples[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..requested),
        seed,
    })
}

/// Seeded sample of `pool_size` distinct training examples. The pool is
/// fixed for a whole run and shared by every query.
pub fn build_candidate_pool(
    train: &[CandidateExample],
    pool_size: usize,
    seed: u64,
) -> Result<Vec<CandidateExample>, CorpusError> {
    if pool_size < 1 {
        return Err(CorpusError::Argument("pool size must be at least 1".into()));
    }
    if pool_size > train.len() {
        return Err(CorpusError::Size {
            requested: pool_size,
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, train.len(), pool_size)
        .into_iter()
        .map(|i| train[i].clone())
        .collect())
}
