//! One-axis parameter sweeps: train and evaluate once per grid point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train, Agent, SelectMode, TrainError};
use crate::corpus::CandidateExample;
use crate::metrics::CorpusScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    HgtLayers,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "hgt-layers" | "hgt_layers" => Ok(SweepAxis::HgtLayers),
            _ => Err(format!("unknown sweep axis `{s}` (expected lambda or hgt-layers)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::HgtLayers => "hgt_layers",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub metrics: Option<CorpusScores>,
    pub mean_reward: Option<f64>,
    /// Number of tensors in the trained checkpoint.
    pub tensor_count: Option<usize>,
    pub hgt_layers: usize,
    /// Set when this point failed; the other fields are then empty.
    pub error: Option<String>,
}

fn run_point(
    base: &Agent,
    axis: SweepAxis,
    value: f64,
    train_split: &[CandidateExample],
    eval_split: &[CandidateExample],
) -> Result<(usize, CorpusScores, f64, usize), TrainError> {
    let mut config = base.config().clone();
    match axis {
        SweepAxis::Lambda => config.lambda = value,
        SweepAxis::HgtLayers => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(TrainError::Config(format!("hgt_layers must be a positive integer, got {value}")));
            }
            config.hgt.layers = value as usize;
        }
    }
    let agent = base.with_config(config)?;
    let (ckpt, _) = train(agent.clone(), train_split.to_vec())?;
    let (_, model) = super::model_from_checkpoint(&ckpt)?;
    let report = agent.evaluate(&model, eval_split, SelectMode::Greedy)?;
    Ok((
        agent.config().hgt.layers,
        report.metrics.corpus,
        report.mean_reward,
        ckpt.tensors.len(),
    ))
}

/// Trains and evaluates `base` once per grid value, all with the same seed.
/// A failing point yields a row carrying the error.
pub fn sweep(
    base: &Agent,
    axis: SweepAxis,
    grid: &[f64],
    train_split: &[CandidateExample],
    eval_split: &[CandidateExample],
) -> Result<Vec<SweepRow>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config("sweep grid is empty".into()));
    }
    Ok(grid
        .iter()
        .map(|&value| match run_point(base, axis, value, train_split, eval_split) {
            Ok((hgt_layers, metrics, mean_reward, tensor_count)) => SweepRow {
                axis,
                value,
                metrics: Some(metrics),
                mean_reward: Some(mean_reward),
                tensor_count: Some(tensor_count),
                hgt_layers,
                error: None,
            },
            Err(e) => {
                log::warn!("sweep point {axis}={value} failed: {e}");
                SweepRow {
                    axis,
                    value,
                    metrics: None,
                    mean_reward: None,
                    tensor_count: None,
                    hgt_layers: base.config().hgt.layers,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect())
}
