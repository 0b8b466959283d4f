//! REINFORCE training, evaluation, checkpoints and parameter sweeps.
//!
//! Every episode is a single bandit step: encode the query's graph, pick an
//! ordered example sequence, render the prompt, ask the environment, score
//! the answer. A batch of `m` episodes yields the ascent direction
//! `(1/m) Σ (R − b) ∇ log π(action)`, where `b` is an optional EMA baseline
//! taken from before the batch.

mod checkpoint;
mod optim;
mod sweep;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::CandidateExample;
use crate::embedder::{cosine_slices, EmbedError, Embedder, EmbeddingVector};
use crate::env::{CompletionRequest, CompletionResponse, EnvError, Environment};
use crate::hgt::{encode_traced, HgtConfig, HgtError, HgtParams, HgtTrace};
use crate::kgraph::{GraphError, PromptGraph};
use crate::metrics::{score_item, ItemScores, MetricReport};
use crate::params::{NamedTensor, ParamError, ParamSet, TensorVisitor};
use crate::policy::{self, ActionSample, PolicyError, PolicyParams, Scores};
use crate::promptgen::PromptTemplate;
use crate::reward::{RewardConfig, RewardError, Rewarder};

pub use checkpoint::{config_digest, Checkpoint, CheckpointError, RngState, FORMAT_VERSION, MAGIC};
pub use optim::{Optimizer, OptimizerKind};
pub use sweep::{sweep, SweepAxis, SweepRow};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Hgt(#[from] HgtError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite gradient at step {step} in {param}")]
    NonFinite { step: u64, param: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Policy reads the raw embeddings; the graph encoder is never run.
    NoKg,
    /// Top-`k_max` cosine neighbours of the query, no learning.
    KnnSelect,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no-kg" | "no_kg" => Ok(Variant::NoKg),
            "knn-select" | "knn_select" => Ok(Variant::KnnSelect),
            _ => Err(format!("unknown variant `{s}` (expected full, no-kg or knn-select)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoKg => "no-kg",
            Variant::KnnSelect => "knn-select",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    None,
    #[default]
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// One epoch is `ceil(|train| / batch_size)` updates.
    pub epochs: usize,
    /// Optional cap on the total number of updates.
    pub max_updates: Option<u64>,
    pub learning_rate: f64,
    pub baseline: BaselineKind,
    pub baseline_decay: f64,
    pub optimizer: OptimizerKind,
    pub k_max: usize,
    pub seed: u64,
    /// Recorded for provenance; the environment itself is supplied by the
    /// caller.
    pub env: EnvKind,
    pub lambda: f64,
    pub hgt: HgtConfig,
    pub variant: Variant,
    pub max_tokens: u32,
    /// Adds wall-clock milliseconds to each record. Off by default so logs
    /// are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 10,
            max_updates: None,
            learning_rate: 1e-2,
            baseline: BaselineKind::Ema,
            baseline_decay: 0.9,
            optimizer: OptimizerKind::Sgd,
            k_max: 2,
            seed: 0,
            env: EnvKind::Mock,
            lambda: RewardConfig::default().lambda,
            hgt: HgtConfig::default(),
            variant: Variant::Full,
            max_tokens: 256,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.baseline == BaselineKind::Ema && !(self.baseline_decay > 0.0 && self.baseline_decay < 1.0) {
            return bad("baseline_decay must lie in (0, 1)");
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        RewardConfig { lambda: self.lambda }.validate()?;
        self.hgt.validate()?;
        Ok(())
    }

    /// Total updates for a training set of `n` queries.
    pub fn total_updates(&self, n: usize) -> u64 {
        let per_epoch = n.div_ceil(self.batch_size) as u64;
        let total = per_epoch * self.epochs as u64;
        self.max_updates.map_or(total, |cap| total.min(cap))
    }
}

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hgt: HgtParams,
    pub policy: PolicyParams,
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self, TrainError> {
        Ok(Self {
            hgt: HgtParams::init(config.hgt, config.seed)?,
            policy: PolicyParams::init(config.hgt.dim, config.seed.wrapping_add(1)),
        })
    }
}

impl ParamSet for Model {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        self.hgt.visit(f);
        self.policy.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hgt.visit_mut(f);
        self.policy.visit_mut(f);
    }
}

/// Reward baseline: a constant 0 or an exponential moving average of past
/// rewards (starting at 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    kind: BaselineKind,
    decay: f64,
    value: f64,
}

impl Baseline {
    pub fn new(kind: BaselineKind, decay: f64) -> Self {
        Self { kind, decay, value: 0.0 }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn set(&mut self, value: f64) {
        self.value = value;
    }

    pub fn update(&mut self, reward: f64) {
        if self.kind == BaselineKind::Ema {
            self.value = self.decay * self.value + (1.0 - self.decay) * reward;
        }
    }
}

/// `advantage · ∇ log π(action)` w.r.t. the policy and the rows `x`.
pub fn reinforce_term(
    x: &Array2<f64>,
    policy: &PolicyParams,
    action: &ActionSample,
    advantage: f64,
) -> Result<(PolicyParams, Array2<f64>), TrainError> {
    let (mut g, mut dx) = policy::action_log_prob_grad(x, policy, action)?;
    g.w *= advantage;
    g.w_m *= advantage;
    dx *= advantage;
    Ok((g, dx))
}

/// Chosen sequence plus the sampled action when a policy made the choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub sequence: Vec<usize>,
    pub action: Option<ActionSample>,
}

/// Encoded rows used by the policy for one query.
pub struct Features {
    pub x: Array2<f64>,
    pub trace: Option<HgtTrace>,
}

/// Everything fixed for a run: the candidate pool and its cached rows, the
/// embedder, template, reward and environment.
#[derive(Clone)]
pub struct Agent {
    config: TrainConfig,
    pool: Vec<CandidateExample>,
    pool_rows: Vec<EmbeddingVector>,
    embedder: Arc<dyn Embedder>,
    env: Arc<dyn Environment>,
    template: PromptTemplate,
    rewarder: Rewarder,
}

impl Agent {
    pub fn new(
        config: TrainConfig,
        pool: Vec<CandidateExample>,
        embedder: Arc<dyn Embedder>,
        env: Arc<dyn Environment>,
        template: PromptTemplate,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if pool.is_empty() {
            return Err(TrainError::Config("candidate pool is empty".into()));
        }
        if embedder.dim() != config.hgt.dim {
            return Err(TrainError::Config(format!(
                "embedder dim {} differs from model dim {}",
                embedder.dim(),
                config.hgt.dim
            )));
        }
        let pool_rows = pool.iter().map(|e| embedder.embed_example(e)).collect::<Result<_, _>>()?;
        let rewarder = Rewarder::new(RewardConfig { lambda: config.lambda }, embedder.clone())?;
        Ok(Self {
            config,
            pool,
            pool_rows,
            embedder,
            env,
            template,
            rewarder,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Same pool, embedder, environment and template under another config.
    pub fn with_config(&self, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if config.hgt.dim != self.config.hgt.dim {
            return Err(TrainError::Config("model dim cannot change for a shared embedder".into()));
        }
        let rewarder = Rewarder::new(RewardConfig { lambda: config.lambda }, self.embedder.clone())?;
        Ok(Self {
            config,
            rewarder,
            ..self.clone()
        })
    }

    pub fn pool(&self) -> &[CandidateExample] {
        &self.pool
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn rewarder(&self) -> &Rewarder {
        &self.rewarder
    }

    pub fn graph(&self, query: &str) -> Result<PromptGraph, TrainError> {
        let q = self.embedder.embed_text(query)?;
        Ok(PromptGraph::from_embeddings(&self.pool, &self.pool_rows, query, &q)?)
    }

    /// Policy input rows: encoder output, or the raw embeddings for
    /// [`Variant::NoKg`].
    pub fn features(&self, model: &Model, graph: &PromptGraph, traced: bool) -> Result<Features, TrainError> {
        match self.config.variant {
            Variant::Full => {
                let (x, trace) = encode_traced(graph, &model.hgt)?;
                Ok(Features {
                    x,
                    trace: traced.then_some(trace),
                })
            }
            Variant::NoKg | Variant::KnnSelect => Ok(Features {
                x: graph.features().clone(),
                trace: None,
            }),
        }
    }

    /// `k_max` candidates with the highest cosine to the query, most
    /// similar first (ties to the lower index).
    pub fn knn(&self, graph: &PromptGraph) -> Result<Vec<usize>, TrainError> {
        let x = graph.features();
        let n = graph.num_candidates();
        let q = x.row(n);
        let mut sims = (0..n)
            .map(|i| Ok((cosine_slices(x.row(i).as_slice().unwrap(), q.as_slice().unwrap())?, i)))
            .collect::<Result<Vec<_>, EmbedError>>()?;
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(sims.into_iter().take(self.config.k_max).map(|(_, i)| i).collect())
    }

    pub fn select(
        &self,
        model: &Model,
        graph: &PromptGraph,
        features: &Features,
        mode: SelectMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Selection, TrainError> {
        if self.config.variant == Variant::KnnSelect {
            return Ok(Selection {
                sequence: self.knn(graph)?,
                action: None,
            });
        }
        let scores = Scores::compute(&features.x, &model.policy)?;
        let action = match mode {
            SelectMode::Greedy => policy::greedy_action(&scores, self.config.k_max)?,
            SelectMode::Sample => policy::sample_action(&scores, self.config.k_max, rng)?,
        };
        Ok(Selection {
            sequence: action.sequence.clone(),
            action: Some(action),
        })
    }

    pub fn render(&self, sequence: &[usize], query: &str) -> String {
        let examples: Vec<&CandidateExample> = sequence.iter().map(|&i| &self.pool[i]).collect();
        self.template.render(&examples, query)
    }

    pub fn request(&self, prompt: String) -> CompletionRequest {
        let mut r = CompletionRequest::new(prompt);
        r.max_tokens = self.config.max_tokens;
        r
    }

    /// One call, retried once on failure.
    pub fn complete(&self, prompt: &str) -> Result<CompletionResponse, EnvError> {
        let req = self.request(prompt.to_owned());
        self.env.complete(&req).or_else(|e| {
            log::warn!("environment call failed ({e}); retrying once");
            self.env.complete(&req)
        })
    }

    /// Calls the environment for every prompt, at most `max_in_flight` at a
    /// time; results keep the input order.
    pub fn complete_all(&self, prompts: &[String]) -> Vec<Result<CompletionResponse, EnvError>> {
        let width = self.env.max_in_flight().clamp(1, prompts.len().max(1));
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(width) {
            if chunk.len() == 1 {
                out.push(self.complete(&chunk[0]));
                continue;
            }
            thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|p| s.spawn(move || self.complete(p))).collect();
                out.extend(handles.into_iter().map(|h| h.join().expect("environment call panicked")));
            });
        }
        out
    }

    /// Runs the selection for `query` and returns the sequence and prompt.
    pub fn propose(
        &self,
        model: &Model,
        query: &str,
        mode: SelectMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Selection, String), TrainError> {
        let graph = self.graph(query)?;
        let features = self.features(model, &graph, false)?;
        let selection = self.select(model, &graph, &features, mode, rng)?;
        let prompt = self.render(&selection.sequence, query);
        Ok((selection, prompt))
    }

    /// Scores the model on `split`: selection, completion, metrics and reward
    /// per item.
    pub fn evaluate(&self, model: &Model, split: &[CandidateExample], mode: SelectMode) -> Result<EvalReport, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_e7a1);
        let mut proposals = Vec::with_capacity(split.len());
        for item in split {
            proposals.push(self.propose(model, &item.query, mode, &mut rng)?);
        }
        let prompts: Vec<String> = proposals.iter().map(|(_, p)| p.clone()).collect();
        let responses = self.complete_all(&prompts);
        let mut items = Vec::with_capacity(split.len());
        let mut scores: Vec<ItemScores> = Vec::with_capacity(split.len());
        for ((item, (selection, _)), response) in split.iter().zip(proposals).zip(responses) {
            let response = response?;
            let reward = self.rewarder.score(&item.response, &response.text)?.reward;
            scores.push(score_item(&item.response, &response.text));
            items.push(EvalItem {
                query: item.query.clone(),
                sequence: selection.sequence,
                response: response.text,
                reward,
            });
        }
        let mean_reward = if items.is_empty() {
            0.0
        } else {
            items.iter().map(|i| i.reward).sum::<f64>() / items.len() as f64
        };
        Ok(EvalReport {
            metrics: MetricReport::from_items(scores),
            mean_reward,
            items,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query: String,
    pub sequence: Vec<usize>,
    pub response: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub mean_reward: f64,
    pub items: Vec<EvalItem>,
}

/// One logged episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub episode: usize,
    pub query_id: usize,
    pub query: String,
    pub sequence: Vec<usize>,
    pub log_prob: Option<f64>,
    pub prompt: String,
    pub response: Option<String>,
    pub reward: Option<f64>,
    pub baseline: f64,
    pub advantage: Option<f64>,
    pub loss: Option<f64>,
    pub skipped: bool,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

impl TrainRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Mean loss of the non-skipped episodes of each step, in step order.
pub fn step_losses(records: &[TrainRecord]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for r in records {
        let Some(loss) = r.loss else { continue };
        match out.last_mut() {
            Some((s, sum, n)) if *s == r.step => {
                *sum += loss;
                *n += 1;
            }
            _ => out.push((r.step, loss, 1)),
        }
    }
    out.into_iter().map(|(s, sum, n)| (s, sum / n as f64)).collect()
}

const BASELINE_TENSOR: &str = "trainer.baseline";

#[derive(Clone)]
pub struct Trainer {
    agent: Agent,
    queries: Vec<CandidateExample>,
    model: Model,
    optimizer: Optimizer,
    baseline: Baseline,
    step: u64,
    rng: ChaCha8Rng,
    extra: Value,
}

impl Trainer {
    pub fn new(agent: Agent, queries: Vec<CandidateExample>) -> Result<Self, TrainError> {
        let config = agent.config().clone();
        let model = Model::init(&config)?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.num_params());
        Ok(Self {
            agent,
            queries,
            model,
            optimizer,
            baseline: Baseline::new(config.baseline, config.baseline_decay),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            extra: Value::Null,
        })
    }

    /// Restores model, optimizer, baseline, step and rng from a checkpoint
    /// written by [`Trainer::checkpoint`] with the same config. Only the
    /// stopping point (`epochs`, `max_updates`) may differ.
    pub fn resume(agent: Agent, queries: Vec<CandidateExample>, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let (config, extra) = parse_config(&ckpt.config_json)?;
        let config = TrainConfig {
            epochs: agent.config.epochs,
            max_updates: agent.config.max_updates,
            ..config
        };
        if &config != agent.config() {
            return Err(TrainError::Config("checkpoint config differs from the agent's config".into()));
        }
        let mut t = Self::new(agent, queries)?;
        t.model.load_tensors(&ckpt.tensors)?;
        t.optimizer.load_state(&ckpt.tensors)?;
        let b = ckpt
            .tensor(BASELINE_TENSOR)
            .ok_or_else(|| ParamError::Missing(BASELINE_TENSOR.into()))?;
        t.baseline.set(b.data[0]);
        t.step = ckpt.step;
        t.rng = ckpt.rng.restore();
        t.extra = extra;
        Ok(t)
    }

    /// Caller metadata stored alongside the config in checkpoints.
    pub fn set_extra(&mut self, extra: Value) {
        self.extra = extra;
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn baseline(&self) -> f64 {
        self.baseline.value()
    }

    pub fn total_updates(&self) -> u64 {
        match self.agent.config.variant {
            Variant::KnnSelect => 0,
            _ => self.agent.config.total_updates(self.queries.len()),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.to_tensors();
        tensors.push(NamedTensor {
            name: BASELINE_TENSOR.into(),
            shape: vec![1],
            data: vec![self.baseline.value()],
        });
        tensors.extend(self.optimizer.state_tensors());
        Checkpoint {
            config_json: config_json(&self.agent.config, &self.extra),
            step: self.step,
            rng: RngState::capture(&self.rng),
            tensors,
        }
    }

    /// Runs one batch update and returns its episode records.
    pub fn train_step(&mut self) -> Result<Vec<TrainRecord>, TrainError> {
        if self.queries.is_empty() {
            return Err(TrainError::Config("no training queries".into()));
        }
        let config = self.agent.config.clone();
        self.step += 1;
        let m = config.batch_size.min(self.queries.len());
        let batch = index::sample(&mut self.rng, self.queries.len(), m).into_vec();

        struct Episode {
            query_id: usize,
            features: Features,
            action: ActionSample,
            prompt: String,
        }
        let mut episodes = Vec::with_capacity(m);
        for &qid in &batch {
            let start = Instant::now();
            let query = &self.queries[qid].query;
            let graph = self.agent.graph(query)?;
            let features = self.agent.features(&self.model, &graph, true)?;
            let selection = self.agent.select(&self.model, &graph, &features, SelectMode::Sample, &mut self.rng)?;
            let action = selection.action.expect("policy variants produce actions");
            let prompt = self.agent.render(&action.sequence, query);
            log::trace!("step {} query {qid}: {:?} ({:.1} ms)", self.step, action.sequence, start.elapsed().as_secs_f64() * 1e3);
            episodes.push(Episode {
                query_id: qid,
                features,
                action,
                prompt,
            });
        }

        let started = Instant::now();
        let prompts: Vec<String> = episodes.iter().map(|e| e.prompt.clone()).collect();
        let responses = self.agent.complete_all(&prompts);
        let wall_ms = config.record_timing.then(|| started.elapsed().as_secs_f64() * 1e3);

        let b = self.baseline.value();
        let hgt_len = self.model.hgt.num_params();
        let mut grad = vec![0.0; self.model.num_params()];
        let mut records = Vec::with_capacity(m);
        let mut used = 0usize;
        let mut rewards = Vec::with_capacity(m);
        for (k, (ep, response)) in episodes.into_iter().zip(responses).enumerate() {
            let query = &self.queries[ep.query_id];
            let mut record = TrainRecord {
                step: self.step,
                episode: k,
                query_id: ep.query_id,
                query: query.query.clone(),
                sequence: ep.action.sequence.clone(),
                log_prob: Some(ep.action.log_prob),
                prompt: ep.prompt,
                response: None,
                reward: None,
                baseline: b,
                advantage: None,
                loss: None,
                skipped: false,
                error: None,
                wall_ms,
            };
            let scored = response
                .map_err(TrainError::from)
                .and_then(|r| Ok((self.agent.rewarder.score(&query.response, &r.text)?.reward, r.text)));
            match scored {
                Err(e) => {
                    log::warn!("step {}: skipping episode {k}: {e}", self.step);
                    record.skipped = true;
                    record.error = Some(e.to_string());
                }
                Ok((reward, text)) => {
                    let advantage = reward - b;
                    if advantage != 0.0 {
                        let (gp, dx) = reinforce_term(&ep.features.x, &self.model.policy, &ep.action, advantage)?;
                        if let Some(trace) = &ep.features.trace {
                            let (gh, _) = trace.backward(dx);
                            for (g, v) in grad[..hgt_len].iter_mut().zip(gh.flatten()) {
                                *g += v;
                            }
                        }
                        for (g, v) in grad[hgt_len..].iter_mut().zip(gp.flatten()) {
                            *g += v;
                        }
                    }
                    used += 1;
                    rewards.push(reward);
                    record.response = Some(text);
                    record.reward = Some(reward);
                    record.advantage = Some(advantage);
                    record.loss = Some(-advantage * ep.action.log_prob);
                }
            }
            records.push(record);
        }

        if used > 0 {
            let scale = 1.0 / used as f64;
            for g in &mut grad {
                *g *= scale;
            }
            if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    step: self.step,
                    param: self.model.name_of(bad).unwrap_or_default(),
                });
            }
            let mut flat = self.model.flatten();
            self.optimizer.ascend(&mut flat, &grad);
            self.model.assign_flat(&flat);
        }
        for r in rewards {
            self.baseline.update(r);
        }
        Ok(records)
    }

    /// Trains until [`Trainer::total_updates`] steps have run, handing each
    /// record to `sink` as it is produced.
    pub fn run(&mut self, mut sink: impl FnMut(&TrainRecord)) -> Result<(), TrainError> {
        let total = self.total_updates();
        while self.step < total {
            for r in self.train_step()? {
                sink(&r);
            }
            if self.step.is_multiple_of(50) {
                log::info!("step {}/{} baseline {:.4}", self.step, total, self.baseline.value());
            }
        }
        Ok(())
    }
}

pub fn config_json(config: &TrainConfig, extra: &Value) -> String {
    json!({ "train": config, "extra": extra }).to_string()
}

/// Splits a checkpoint's config JSON into the training config and the
/// caller metadata.
pub fn parse_config(config_json: &str) -> Result<(TrainConfig, Value), TrainError> {
    let mut v: Value = serde_json::from_str(config_json)
        .map_err(|e| TrainError::Config(format!("checkpoint config is not JSON: {e}")))?;
    let train = serde_json::from_value(v["train"].take())
        .map_err(|e| TrainError::Config(format!("checkpoint train config: {e}")))?;
    Ok((train, v["extra"].take()))
}

/// Trains from scratch and returns the final checkpoint and every record.
pub fn train(agent: Agent, queries: Vec<CandidateExample>) -> Result<(Checkpoint, Vec<TrainRecord>), TrainError> {
    let mut trainer = Trainer::new(agent, queries)?;
    let mut records = Vec::new();
    trainer.run(|r| records.push(r.clone()))?;
    Ok((trainer.checkpoint(), records))
}

/// Loads the model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, Model), TrainError> {
    let (config, _) = parse_config(&ckpt.config_json)?;
    let mut model = Model::init(&config)?;
    model.load_tensors(&ckpt.tensors)?;
    Ok((config, model))
}

/// Moving average of the last `window` values ending at index `end`
/// (inclusive, 0-based).
pub fn trailing_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let start = (end + 1).saturating_sub(window);
    let slice = &values[start..=end];
    slice.iter().sum::<f64>() / slice.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::HashEmbedder;
    use crate::env::MockEnv;

    fn ex(q: &str, r: &str) -> CandidateExample {
        CandidateExample::new(q, None, r).unwrap()
    }

    fn setup(config: TrainConfig) -> (Agent, Vec<CandidateExample>) {
        let pool = vec![
            ex("name a red fruit", "apple"),
            ex("name a yellow fruit", "banana"),
            ex("what color is the sky", "blue"),
        ];
        let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(config.hgt.dim, 0));
        let env = Arc::new(MockEnv::new(pool.clone(), embedder.clone(), PromptTemplate::default()).unwrap());
        let agent = Agent::new(config, pool.clone(), embedder, env, PromptTemplate::default()).unwrap();
        (agent, pool)
    }

    fn small() -> TrainConfig {
        TrainConfig {
            hgt: HgtConfig { dim: 8, heads: 2, layers: 2, mlp_depth: 1, ..Default::default() },
            max_updates: Some(6),
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { baseline_decay: 1.0, ..Default::default() },
            TrainConfig { lambda: -0.1, ..Default::default() },
            TrainConfig { k_max: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_)) | Err(TrainError::Reward(_))));
        }
        assert_eq!(TrainConfig::default().hgt.layers, 2);
        assert_eq!(TrainConfig { max_updates: None, ..Default::default() }.total_updates(10), 30);
    }

    #[test]
    fn variant_names() {
        for v in [Variant::Full, Variant::NoKg, Variant::KnnSelect] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn single_episode_update_is_reward_times_score() {
        let config = TrainConfig {
            batch_size: 1,
            baseline: BaselineKind::None,
            variant: Variant::NoKg,
            ..small()
        };
        let (agent, queries) = setup(config.clone());
        let mut t = Trainer::new(agent, queries.clone()).unwrap();
        let before = t.model().clone();
        let records = t.train_step().unwrap();
        let r = &records[0];

        // replay the same draw
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let qid = index::sample(&mut rng, queries.len(), 1).index(0);
        assert_eq!(qid, r.query_id);
        let graph = t.agent().graph(&queries[qid].query).unwrap();
        let f = t.agent().features(&before, &graph, false).unwrap();
        let sel = t.agent().select(&before, &graph, &f, SelectMode::Sample, &mut rng).unwrap();
        let (g, _) = reinforce_term(&f.x, &before.policy, sel.action.as_ref().unwrap(), r.reward.unwrap()).unwrap();
        let moved: Vec<f64> = t
            .model()
            .policy
            .flatten()
            .iter()
            .zip(before.policy.flatten())
            .map(|(a, b)| (a - b) / config.learning_rate)
            .collect();
        for (m, want) in moved.iter().zip(g.flatten()) {
            assert!((m - want).abs() < 1e-9);
        }
        assert_eq!(t.model().hgt, before.hgt);
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        for residual in [false, true] {
            let mut config = small();
            config.hgt.residual = residual;
            let (agent, queries) = setup(config);
            let model = Model::init(agent.config()).unwrap();
            let graph = agent.graph(&queries[0].query).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let f = agent.features(&model, &graph, true).unwrap();
            let action = agent.select(&model, &graph, &f, SelectMode::Sample, &mut rng).unwrap().action.unwrap();
            let (gp, dx) = reinforce_term(&f.x, &model.policy, &action, 1.0).unwrap();
            let (gh, _) = f.trace.as_ref().unwrap().backward(dx);
            let analytic: Vec<f64> = gh.flatten().into_iter().chain(gp.flatten()).collect();

            let log_prob = |m: &Model| {
                let x = agent.features(m, &graph, false).unwrap().x;
                Scores::compute(&x, &m.policy).unwrap().log_prob(&action.drawn, &action.scored_pairs)
            };
            let flat = model.flatten();
            let eps = 1e-5;
            for k in (0..flat.len()).step_by(7) {
                let mut m = model.clone();
                let mut p = flat.clone();
                p[k] += eps;
                m.assign_flat(&p);
                let up = log_prob(&m);
                p[k] -= 2.0 * eps;
                m.assign_flat(&p);
                let fd = (up - log_prob(&m)) / (2.0 * eps);
                let a = analytic[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} residual={residual}: analytic {a} fd {fd}", model.name_of(k).unwrap());
            }
        }
    }

    #[test]
    fn zero_advantage_leaves_parameters() {
        let config = TrainConfig { batch_size: 1, ..small() };
        let (agent, queries) = setup(config.clone());
        let mut probe = Trainer::new(agent.clone(), queries.clone()).unwrap();
        let reward = probe.train_step().unwrap()[0].reward.unwrap();

        let mut t = Trainer::new(agent, queries).unwrap();
        t.baseline.set(reward);
        let before = t.model().clone();
        let r = t.train_step().unwrap();
        assert_eq!(r[0].advantage, Some(0.0));
        assert_eq!(t.model(), &before);
    }

    #[test]
    fn evaluation_is_deterministic_and_handles_empty() {
        let (agent, queries) = setup(small());
        let model = Model::init(agent.config()).unwrap();
        let a = agent.evaluate(&model, &queries, SelectMode::Greedy).unwrap();
        assert_eq!(a, agent.evaluate(&model, &queries, SelectMode::Greedy).unwrap());
        assert_eq!(a.items.len(), 3);
        let empty = agent.evaluate(&model, &[], SelectMode::Greedy).unwrap();
        assert!(empty.metrics.empty && empty.items.is_empty());
    }

    #[test]
    fn checkpoint_resume_replays() {
        let (agent, queries) = setup(small());
        let mut full = Trainer::new(agent.clone(), queries.clone()).unwrap();
        let mut log = Vec::new();
        for _ in 0..3 {
            log.extend(full.train_step().unwrap());
        }
        let ckpt = Checkpoint::from_bytes(&full.checkpoint().to_bytes()).unwrap();
        let mut tail = Vec::new();
        for _ in 0..3 {
            tail.extend(full.train_step().unwrap());
        }
        let mut resumed = Trainer::resume(agent, queries, &ckpt).unwrap();
        let mut replay = Vec::new();
        for _ in 0..3 {
            replay.extend(resumed.train_step().unwrap());
        }
        assert_eq!(tail, replay);
        assert_eq!(full.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
    }

    #[test]
    fn knn_picks_nearest() {
        let config = TrainConfig { variant: Variant::KnnSelect, ..small() };
        let (agent, queries) = setup(config);
        let model = Model::init(agent.config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (sel, _) = agent.propose(&model, &queries[2].query, SelectMode::Greedy, &mut rng).unwrap();
        assert_eq!(sel.sequence.len(), 2);
        assert_eq!(sel.sequence[0], 2);
        let (_, records) = train(agent, queries).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn losses_group_by_step() {
        let rec = |step, loss| TrainRecord {
            step,
            episode: 0,
            query_id: 0,
            query: String::new(),
            sequence: vec![],
            log_prob: None,
            prompt: String::new(),
            response: None,
            reward: None,
            baseline: 0.0,
            advantage: None,
            loss,
            skipped: false,
            error: None,
            wall_ms: None,
        };
        let l = step_losses(&[rec(1, Some(1.0)), rec(1, Some(3.0)), rec(2, None), rec(3, Some(-1.0))]);
        assert_eq!(l, vec![(1, 2.0), (3, -1.0)]);
        assert_eq!(trailing_mean(&[1.0, 2.0, 3.0, 4.0], 3, 2), 3.5);
        assert_eq!(trailing_mean(&[1.0, 2.0], 0, 50), 1.0);
    }
}
