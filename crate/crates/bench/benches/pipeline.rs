use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use grlprompt::corpus::CandidateExample;
use grlprompt::embedder::HashEmbedder;
use grlprompt::hgt::{encode, encode_traced, HgtConfig};
use grlprompt::metrics::score_item;
use grlprompt::policy::{self, Scores};
use grlprompt::reward::fuzzy_sim;
use grlprompt::synthetic::SyntheticTask;
use grlprompt::trainer::Trainer;
use grlprompt::{HgtParams, PolicyParams, PromptGraph};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "model", "prompt", "graph", "query", "answer", "sample", "order", "reward", "policy", "token", "layer",
    "context", "example", "response", "train", "score",
];

fn sentence(seed: usize, len: usize) -> String {
    (0..len)
        .map(|i| WORDS[(seed * 7 + i * 13 + i * i) % WORDS.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

fn pool(n: usize) -> Vec<CandidateExample> {
    (0..n)
        .map(|i| CandidateExample::new(sentence(i, 12), None, sentence(i + 100, 20)).unwrap())
        .collect()
}

fn bench_encoder(c: &mut Criterion) {
    let config = HgtConfig {
        dim: 32,
        heads: 2,
        layers: 2,
        ..Default::default()
    };
    let embedder = HashEmbedder::new(config.dim, 0);
    let graph = PromptGraph::build(&pool(20), &sentence(999, 12), &embedder).unwrap();
    let params = HgtParams::init(config, 0).unwrap();
    let mut group = c.benchmark_group("hgt_n20_d32");
    group.bench_function("forward", |b| b.iter(|| encode(black_box(&graph), &params).unwrap()));
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let (x, trace) = encode_traced(black_box(&graph), &params).unwrap();
            trace.backward(x)
        })
    });
    group.finish();
}

fn bench_policy(c: &mut Criterion) {
    let embedder = HashEmbedder::new(32, 0);
    let graph = PromptGraph::build(&pool(20), &sentence(999, 12), &embedder).unwrap();
    let x = graph.features().clone();
    let params = PolicyParams::init(32, 0);
    let scores = Scores::compute(&x, &params).unwrap();
    let mut group = c.benchmark_group("policy_n20");
    group.bench_function("scores", |b| b.iter(|| Scores::compute(black_box(&x), &params).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    group.bench_function("sample_k4", |b| {
        b.iter(|| policy::sample_action(black_box(&scores), 4, &mut rng).unwrap())
    });
    let action = policy::sample_action(&scores, 4, &mut rng).unwrap();
    group.bench_function("log_prob_grad", |b| {
        b.iter(|| policy::action_log_prob_grad(black_box(&x), &params, &action).unwrap())
    });
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let reference = sentence(1, 60);
    let candidate = sentence(2, 55);
    let mut group = c.benchmark_group("text_60_words");
    group.bench_function("rouge_bleu", |b| {
        b.iter(|| score_item(black_box(&reference), black_box(&candidate)))
    });
    group.bench_function("fuzzy_sim", |b| {
        b.iter(|| fuzzy_sim(black_box(&reference), black_box(&candidate)))
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let task = SyntheticTask::new(0).unwrap();
    let agent = task.agent(SyntheticTask::train_config(0)).unwrap();
    let trainer = Trainer::new(agent, task.train.clone()).unwrap();
    c.bench_function("synthetic_train_step_batch4", |b| {
        b.iter_batched(
            || trainer.clone(),
            |mut t| t.train_step().unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_encoder, bench_policy, bench_metrics, bench_train_step);
criterion_main!(benches);
