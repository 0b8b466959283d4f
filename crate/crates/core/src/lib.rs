//! Learned construction of few-shot prompts.
//!
//! A fixed pool of candidate in-context examples and a user query are
//! arranged into a small heterogeneous graph, encoded with a graph
//! transformer, and scored by a policy that decides which candidates to
//! include and in what order. The policy is trained with REINFORCE against
//! an LLM environment using a shaped reward.
//!
//! The crate is organized bottom-up:
//!
//! - [`corpus`]: dataset loading, seeded splits, the candidate pool
//! - [`embedder`]: text embedding providers (hashed, file-backed, HTTP)
//! - [`kgraph`]: the query/candidate graph
//! - [`tape`]: a small reverse-mode autodiff tape over dense matrices
//! - [`hgt`]: the heterogeneous graph transformer encoder
//! - [`policy`]: inclusion and pairwise-order scoring, sampling, ordering
//! - [`promptgen`]: prompt rendering
//! - [`env`]: completion environments (mock echo oracle, HTTP chat API)
//! - [`reward`] and [`metrics`]: reward shaping and ROUGE/BLEU
//! - [`trainer`]: training loop, evaluation, checkpoints, sweeps

pub mod corpus;
pub mod embedder;
pub mod env;
pub mod hgt;
pub mod kgraph;
pub mod metrics;
pub mod params;
pub mod policy;
pub mod promptgen;
pub mod reward;
pub mod synthetic;
pub mod tape;
pub mod trainer;

mod http;

pub use corpus::{CandidateExample, DatasetFormat, DatasetSplit};
pub use embedder::{Embedder, EmbedderConfig, EmbeddingVector};
pub use hgt::HgtParams;
pub use kgraph::{NodeId, NodeType, PromptGraph, Relation};
pub use policy::{ActionSample, PolicyParams, Tournament};
pub use metrics::MetricReport;
pub use promptgen::PromptTemplate;
pub use reward::RewardConfig;
pub use env::{CompletionRequest, CompletionResponse, Environment};
pub use trainer::{Checkpoint, TrainConfig, TrainRecord, Variant};
