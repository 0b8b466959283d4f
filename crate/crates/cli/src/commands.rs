use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use grlprompt::corpus::{self, CandidateExample, DatasetSplit};
use grlprompt::env::{HttpEnv, MockEnv};
use grlprompt::metrics::CorpusScores;
use grlprompt::trainer::{self, Agent, BaselineKind, EnvKind, EvalReport, SelectMode, SweepRow, Trainer};
use grlprompt::{Checkpoint, Embedder, Environment, PromptGraph, PromptTemplate};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};
use crate::{EvalArgs, GlobalArgs, InspectArgs, OptimizeArgs, SplitName, SweepArgs, TrainArgs};

const CHECKPOINT_FILE: &str = "checkpoint.grlp";
const LOG_FILE: &str = "train_log.jsonl";
const CONFIG_FILE: &str = "run.toml";
const DEFAULT_OUT_DIR: &str = "grlprompt-out";

/// File config (if any) with flags applied, validated.
fn resolve(global: &GlobalArgs, needs_dataset: bool) -> Result<RunConfig> {
    let mut run = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    run.apply(&global.overrides());
    run.validate(needs_dataset)?;
    Ok(run)
}

fn config_err(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError::new(e.to_string()).into()
}

fn load_template(run: &RunConfig) -> Result<PromptTemplate> {
    match &run.template {
        Some(path) => PromptTemplate::load(path)
            .map_err(|e| config_err(format!("template {}: {e}", path.display()))),
        None => Ok(PromptTemplate::default()),
    }
}

fn load_split(run: &RunConfig) -> Result<DatasetSplit> {
    let path = run.corpus.dataset.as_ref().expect("validated");
    let examples = corpus::load_dataset(path, run.corpus.format)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    let [a, b, c] = run.corpus.splits;
    corpus::split(&examples, run.seed, (a, b, c))
        .map_err(|e| config_err(format!("`corpus.splits`: {e}")))
}

fn build_env(
    run: &RunConfig,
    pool: &[CandidateExample],
    embedder: Arc<dyn Embedder>,
    template: &PromptTemplate,
) -> Result<Arc<dyn Environment>> {
    Ok(match run.env.kind {
        EnvKind::Mock => Arc::new(MockEnv::new(pool.to_vec(), embedder, template.clone())?),
        EnvKind::Http => Arc::new(HttpEnv::new(&run.env.http).map_err(config_err)?),
    })
}

/// Everything needed to run the policy: stored in the checkpoint so that
/// `optimize` works without the dataset.
fn metadata(run: &RunConfig, pool: &[CandidateExample], template: &PromptTemplate) -> Value {
    json!({
        "run": run,
        "pool": pool,
        "template": template.to_file_text(),
    })
}

fn split_of(split: &DatasetSplit, name: SplitName) -> &[CandidateExample] {
    match name {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    }
}

fn out_dir(run: &RunConfig) -> PathBuf {
    run.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn train(global: &GlobalArgs, args: &TrainArgs) -> Result<()> {
    let mut run = resolve(global, true)?;
    if let Some(cap) = args.max_updates {
        run.train.max_updates = Some(cap);
    }
    if args.no_baseline {
        run.train.baseline = BaselineKind::None;
    }
    run.validate(true)?;
    let template = load_template(&run)?;
    let split = load_split(&run)?;
    let pool = corpus::build_candidate_pool(&split.train, run.corpus.pool_size, run.seed)
        .map_err(|e| config_err(format!("`corpus.pool_size`: {e}")))?;
    let embedder = run.embedder.build().map_err(config_err)?;
    let env = build_env(&run, &pool, embedder.clone(), &template)?;
    let agent = Agent::new(run.train.clone(), pool.clone(), embedder, env, template.clone())
        .map_err(config_err)?;

    let dir = out_dir(&run);
    // Outputs stay byte-identical wherever they are written.
    run.out_dir = None;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            Trainer::resume(agent, split.train.clone(), &ckpt)?
        }
        None => Trainer::new(agent, split.train.clone())?,
    };
    trainer.set_extra(metadata(&run, &pool, &template));

    let log_path = dir.join(LOG_FILE);
    let log_file = if args.resume.is_some() {
        File::options().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let mut write_err = None;
    let mut episodes = 0usize;
    let mut skipped = 0usize;
    trainer.run(|record| {
        episodes += 1;
        skipped += usize::from(record.skipped);
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{}", record.to_json_line()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }
    log.flush()?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    trainer
        .checkpoint()
        .save(&ckpt_path)
        .with_context(|| format!("writing {}", ckpt_path.display()))?;
    fs::write(dir.join(CONFIG_FILE), run.to_toml())?;
    println!(
        "trained {} updates ({episodes} episodes, {skipped} skipped), baseline {:.4}",
        trainer.step(),
        trainer.baseline()
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

/// A trained policy plus the run it came from.
struct Loaded {
    run: RunConfig,
    agent: Agent,
    model: trainer::Model,
}

/// Rebuilds the agent for a checkpoint. Model settings come from the
/// checkpoint; flags and `--config` may change the environment, data and
/// reward, and `--k-max` the selection size, but not the model shape.
fn load_checkpoint(global: &GlobalArgs, path: &Path, needs_dataset: bool) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (trained, model) = trainer::model_from_checkpoint(&ckpt)?;
    let (_, extra) = trainer::parse_config(&ckpt.config_json)?;
    let stored: RunConfig = serde_json::from_value(extra["run"].clone()).context("checkpoint run metadata")?;
    let pool: Vec<CandidateExample> =
        serde_json::from_value(extra["pool"].clone()).context("checkpoint pool metadata")?;

    let mut run = match &global.config {
        Some(file) => RunConfig::load(file)?,
        None => stored.clone(),
    };
    run.train = trained.clone();
    run.embedder = stored.embedder.clone();
    run.apply(&global.overrides());
    if run.train.hgt != trained.hgt || run.train.variant != trained.variant {
        return Err(config_err(format!(
            "checkpoint was trained with variant {} and {:?}; model flags cannot change it",
            trained.variant, trained.hgt
        )));
    }
    run.validate(needs_dataset)?;

    let template = if run.template == stored.template {
        let text = extra["template"].as_str().unwrap_or_default();
        PromptTemplate::parse(text).context("checkpoint template")?
    } else {
        load_template(&run)?
    };
    let embedder = run.embedder.build().map_err(config_err)?;
    let env = build_env(&run, &pool, embedder.clone(), &template)?;
    let agent = Agent::new(run.train.clone(), pool, embedder, env, template).map_err(config_err)?;
    Ok(Loaded { run, agent, model })
}

fn scores_table(rows: &[(String, Option<&CorpusScores>, Option<f64>)]) -> String {
    let mut out = format!(
        "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "", "rouge1", "rouge2", "rougeL", "bleu", "reward"
    );
    for (label, scores, reward) in rows {
        match scores {
            Some(s) => out.push_str(&format!(
                "{label:<14} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                s.rouge1,
                s.rouge2,
                s.rouge_l,
                s.bleu,
                reward.unwrap_or(f64::NAN)
            )),
            None => out.push_str(&format!("{label:<14} failed\n")),
        }
    }
    out
}

fn eval_json(report: &EvalReport, split: SplitName, mode: SelectMode, run: &RunConfig) -> Value {
    json!({
        "split": format!("{split:?}").to_lowercase(),
        "mode": mode,
        "variant": run.train.variant,
        "per_item": report.metrics.per_item,
        "corpus": report.metrics.corpus,
        "empty": report.metrics.empty,
        "mean_reward": report.mean_reward,
        "items": report.items,
    })
}

pub fn eval(global: &GlobalArgs, args: &EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(global, &args.checkpoint, true)?;
    let split = load_split(&loaded.run)?;
    let report = loaded
        .agent
        .evaluate(&loaded.model, split_of(&split, args.split), args.mode)?;
    let value = eval_json(&report, args.split, args.mode, &loaded.run);
    if let Some(path) = &args.output {
        write_json(path, &value)?;
    }
    eprint!(
        "{}",
        scores_table(&[(
            format!("{:?} ({})", args.split, report.items.len()).to_lowercase(),
            Some(&report.metrics.corpus),
            Some(report.mean_reward),
        )])
    );
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn truncate(text: &str, max_chars: usize) -> String {
    if text.chars().count() > max_chars {
        format!("{}...", text.chars().take(max_chars).collect::<String>())
    } else {
        text.to_owned()
    }
}

pub fn optimize(global: &GlobalArgs, args: &OptimizeArgs) -> Result<()> {
    let loaded = load_checkpoint(global, &args.checkpoint, false)?;
    let agent = &loaded.agent;
    let mut rng = ChaCha8Rng::seed_from_u64(loaded.run.seed);
    let (selection, prompt) = agent.propose(&loaded.model, &args.query, SelectMode::Greedy, &mut rng)?;
    let response = if args.call_env {
        Some(agent.complete(&prompt)?.text)
    } else {
        None
    };
    let pool = agent.pool();
    if args.json {
        let examples: Vec<Value> = selection
            .sequence
            .iter()
            .map(|&i| {
                json!({
                    "index": i,
                    "query": truncate(&pool[i].query, args.max_chars),
                    "response": truncate(&pool[i].response, args.max_chars),
                })
            })
            .collect();
        let value = json!({
            "query": args.query,
            "sequence": selection.sequence,
            "examples": examples,
            "prompt": prompt,
            "response": response,
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    println!("selected {} of {} candidates:", selection.sequence.len(), pool.len());
    for (rank, &i) in selection.sequence.iter().enumerate() {
        println!(
            "  {}. [{i}] {} => {}",
            rank + 1,
            truncate(&pool[i].query, args.max_chars),
            truncate(&pool[i].response, args.max_chars)
        );
    }
    println!("\nprompt:\n{prompt}");
    if let Some(text) = response {
        println!("\nresponse:\n{text}");
    }
    Ok(())
}

pub fn sweep(global: &GlobalArgs, args: &SweepArgs) -> Result<()> {
    let run = resolve(global, true)?;
    let template = load_template(&run)?;
    let split = load_split(&run)?;
    let pool = corpus::build_candidate_pool(&split.train, run.corpus.pool_size, run.seed)
        .map_err(|e| config_err(format!("`corpus.pool_size`: {e}")))?;
    let embedder = run.embedder.build().map_err(config_err)?;
    let env = build_env(&run, &pool, embedder.clone(), &template)?;
    let agent = Agent::new(run.train.clone(), pool, embedder, env, template).map_err(config_err)?;
    let rows: Vec<SweepRow> =
        trainer::sweep(&agent, args.axis, &args.grid, &split.train, split_of(&split, args.split))
            .map_err(config_err)?;
    let value = serde_json::to_value(&rows)?;
    if let Some(path) = &args.output {
        write_json(path, &value)?;
    }
    let table: Vec<_> = rows
        .iter()
        .map(|r| (format!("{}={}", r.axis, r.value), r.metrics.as_ref(), r.mean_reward))
        .collect();
    eprint!("{}", scores_table(&table));
    println!("{}", serde_json::to_string_pretty(&value)?);
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(anyhow!("every sweep point failed"));
    }
    Ok(())
}

pub fn inspect_graph(global: &GlobalArgs, args: &InspectArgs) -> Result<()> {
    let run = resolve(global, true)?;
    let split = load_split(&run)?;
    let pool = corpus::build_candidate_pool(&split.train, run.corpus.pool_size, run.seed)
        .map_err(|e| config_err(format!("`corpus.pool_size`: {e}")))?;
    let query = match &args.query {
        Some(q) => q.clone(),
        None => split
            .test
            .iter()
            .chain(&split.val)
            .next()
            .map(|e| e.query.clone())
            .ok_or_else(|| config_err("no --query given and the test and validation splits are empty"))?,
    };
    let embedder = run.embedder.build().map_err(config_err)?;
    let graph = PromptGraph::build(&pool, &query, embedder.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&graph.to_json(args.full, args.max_chars))?);
    Ok(())
}
