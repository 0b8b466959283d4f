//! A small end-to-end task for checking that training works.
//!
//! The pool holds three target examples and three distractors with disjoint
//! vocabularies. Every query repeats one target's query verbatim, so under
//! the mock echo environment a prompt scores well exactly when it contains
//! the matching target.

use std::sync::Arc;

use crate::corpus::{self, CandidateExample, CorpusError};
use crate::embedder::{Embedder, HashEmbedder};
use crate::env::{EnvError, MockEnv};
use crate::hgt::HgtConfig;
use crate::promptgen::PromptTemplate;
use crate::trainer::{Agent, OptimizerKind, TrainConfig, TrainError};

const TARGETS: [(&str, &str); 3] = [
    ("translate the greeting hello into french", "bonjour mon ami"),
    ("what is seven plus five", "the sum is twelve"),
    ("name the largest planet orbiting our sun", "jupiter the gas giant"),
];

const DISTRACTORS: [(&str, &str); 3] = [
    ("describe a calm ocean at dusk", "quiet waves shimmer under violet clouds"),
    ("list two breeds of herding dog", "collie and sheepdog"),
    ("suggest a warm winter drink", "spiced cider with cinnamon"),
];

pub const NUM_QUERIES: usize = 100;
pub const NUM_HELD_OUT: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    /// Targets at indices 0..3, distractors at 3..6.
    pub pool: Vec<CandidateExample>,
    pub train: Vec<CandidateExample>,
    pub held_out: Vec<CandidateExample>,
}

impl SyntheticTask {
    /// Builds the pool and a seeded 80/20 split of the query set.
    pub fn new(seed: u64) -> Result<Self, CorpusError> {
        let pool = TARGETS
            .iter()
            .chain(&DISTRACTORS)
            .map(|&(q, r)| CandidateExample::new(q, None, r))
            .collect::<Result<Vec<_>, _>>()?;
        let queries: Vec<CandidateExample> = (0..NUM_QUERIES).map(|i| pool[i % TARGETS.len()].clone()).collect();
        let split = corpus::split(&queries, seed, (NUM_QUERIES - NUM_HELD_OUT, 0, NUM_HELD_OUT))?;
        Ok(Self {
            pool,
            train: split.train,
            held_out: split.test,
        })
    }

    /// Settings for the end-to-end check: 500 updates of batch 4 with Adam
    /// and the encoder's residual connection on. Without the residual the
    /// encoder output is too flat for the policy to separate the targets.
    pub fn train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 25,
            max_updates: Some(500),
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            k_max: 2,
            seed,
            lambda: 0.4,
            hgt: HgtConfig {
                dim: 32,
                heads: 2,
                layers: 2,
                mlp_depth: 1,
                residual: true,
            },
            ..TrainConfig::default()
        }
    }

    /// Pool index of the target whose query is `query`.
    pub fn target_of(&self, query: &str) -> Option<usize> {
        self.pool[..TARGETS.len()].iter().position(|t| t.query == query)
    }

    pub fn embedder(&self, dim: usize) -> Arc<dyn Embedder> {
        Arc::new(HashEmbedder::new(dim, 0))
    }

    pub fn env(&self, embedder: Arc<dyn Embedder>) -> Result<MockEnv, EnvError> {
        MockEnv::new(self.pool.clone(), embedder, PromptTemplate::default())
    }

    /// Agent over the synthetic pool with a hash embedder and the mock
    /// environment.
    pub fn agent(&self, config: TrainConfig) -> Result<Agent, TrainError> {
        let embedder = self.embedder(config.hgt.dim);
        let env = Arc::new(self.env(embedder.clone())?);
        Agent::new(config, self.pool.clone(), embedder, env, PromptTemplate::default())
    }
}
