use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grlprompt::trainer::{config_digest, parse_config};
use grlprompt::{Checkpoint, Variant};
use serde_json::Value;
use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn grlprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grlprompt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Trains on the tiny fixture and returns the output directory.
fn train_tiny(extra: &[&str]) -> TempDir {
    let dir = TempDir::new().unwrap();
    let config = data("run.toml");
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--env",
        "mock",
        "--seed",
        "7",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = grlprompt(&args);
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = train_tiny(&[]);
    let ckpt = dir.path().join("checkpoint.grlp");
    assert!(ckpt.is_file());
    let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(!lines.is_empty());
    for line in &lines {
        let v: Value = serde_json::from_str(line).unwrap();
        let r = v["reward"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
    // 6 training queries, batch 2, 2 epochs.
    assert_eq!(lines.len(), 12);
    let (config, _) = parse_config(&Checkpoint::load(&ckpt).unwrap().config_json).unwrap();
    assert_eq!(config.seed, 7);
    assert!(dir.path().join("run.toml").is_file());
}

#[test]
fn training_is_reproducible() {
    let a = train_tiny(&[]);
    let b = train_tiny(&[]);
    for name in ["checkpoint.grlp", "train_log.jsonl", "run.toml"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn missing_dataset_exits_2_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let out = grlprompt(&[
        "train",
        "--config",
        path_str(&data("no_dataset.toml")),
        "--out-dir",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus.dataset"));
    assert!(!dir.path().join("checkpoint.grlp").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "seed = 1\n[train]\nbatch = 3\n").unwrap();
    let out = grlprompt(&["train", "--config", path_str(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
}

#[test]
fn invalid_flag_value_exits_2() {
    let out = grlprompt(&["train", "--variant", "no-graph"]);
    assert_eq!(out.status.code(), Some(2));
    let dataset = data("tiny.jsonl");
    let out = grlprompt(&["train", "--dataset", path_str(&dataset), "--lambda", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn variant_is_recorded_in_the_checkpoint_config() {
    let dir = train_tiny(&["--variant", "no-kg"]);
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.grlp")).unwrap();
    let (config, extra) = parse_config(&ckpt.config_json).unwrap();
    assert_eq!(config.variant, Variant::NoKg);
    assert_eq!(ckpt.digest(), config_digest(&ckpt.config_json));
    assert_eq!(extra["run"]["train"]["variant"], "no_kg");

    let full = train_tiny(&[]);
    let other = Checkpoint::load(&full.path().join("checkpoint.grlp")).unwrap();
    assert_ne!(other.digest(), ckpt.digest());
}

#[test]
fn eval_reports_four_corpus_metrics() {
    let dir = train_tiny(&[]);
    let ckpt = dir.path().join("checkpoint.grlp");
    let out = grlprompt(&["eval", "--checkpoint", path_str(&ckpt), "--split", "test", "--env", "mock"]);
    let report = stdout_json(&out);
    let corpus = report["corpus"].as_object().unwrap();
    let mut keys: Vec<&str> = corpus.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["bleu", "rouge1", "rouge2", "rougeL"]);
    for v in corpus.values() {
        assert!((0.0..=1.0).contains(&v.as_f64().unwrap()));
    }
    assert_eq!(report["per_item"].as_array().unwrap().len(), 3);
    assert_eq!(report["empty"], false);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rouge1"));

    let again = stdout_json(&grlprompt(&["eval", "--checkpoint", path_str(&ckpt)]));
    assert_eq!(again, report);
}

#[test]
fn eval_rejects_model_shape_flags() {
    let dir = train_tiny(&[]);
    let ckpt = dir.path().join("checkpoint.grlp");
    let out = grlprompt(&["eval", "--checkpoint", path_str(&ckpt), "--hgt-layers", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lambda_sweep_has_one_row_per_grid_point() {
    let out = grlprompt(&[
        "sweep",
        "--config",
        path_str(&data("run.toml")),
        "--axis",
        "lambda",
        "--grid",
        "0,0.2,0.4,0.6,0.8,1.0",
    ]);
    let rows = stdout_json(&out);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for (row, want) in rows.iter().zip([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]) {
        assert_eq!(row["value"].as_f64().unwrap(), want);
        assert!(row["error"].is_null());
        for m in ["rouge1", "rouge2", "rougeL", "bleu"] {
            assert!(row["metrics"][m].is_f64(), "{m} missing in {row}");
        }
    }
}

#[test]
fn layer_sweep_reflects_tensor_inventory() {
    let out = grlprompt(&[
        "sweep",
        "--config",
        path_str(&data("run.toml")),
        "--axis",
        "hgt-layers",
        "--grid",
        "1,2,3",
    ]);
    let rows = stdout_json(&out);
    let counts: Vec<u64> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["tensor_count"].as_u64().unwrap())
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

#[test]
fn inspect_graph_with_three_candidates_has_twelve_edges() {
    let out = grlprompt(&[
        "inspect-graph",
        "--config",
        path_str(&data("run.toml")),
        "--pool-size",
        "3",
    ]);
    let graph = stdout_json(&out);
    assert_eq!(graph["num_edges"], 12);
    assert_eq!(graph["edges"].as_array().unwrap().len(), 12);
    assert_eq!(graph["nodes"].as_array().unwrap().len(), 4);
    assert_eq!(graph["features"]["rows"], 4);
    assert!(graph["features"].get("values").is_none());

    let full = stdout_json(&grlprompt(&[
        "inspect-graph",
        "--config",
        path_str(&data("run.toml")),
        "--pool-size",
        "3",
        "--query",
        "what is the capital of france",
        "--full",
    ]));
    assert_eq!(full["features"]["values"].as_array().unwrap().len(), 4);
}

#[test]
fn optimize_respects_k_max() {
    let dir = train_tiny(&[]);
    let ckpt = dir.path().join("checkpoint.grlp");
    let args = ["optimize", "--checkpoint", path_str(&ckpt), "--query", "capital of italy", "--k-max", "1"];
    let text = grlprompt(&args);
    assert!(text.status.success());
    let stdout = String::from_utf8_lossy(&text.stdout);
    let listed = stdout.lines().filter(|l| l.trim_start().starts_with("1. [")).count();
    assert_eq!(listed, 1, "{stdout}");
    assert!(!stdout.contains("  2. ["), "{stdout}");

    let mut json_args = args.to_vec();
    json_args.push("--json");
    let v = stdout_json(&grlprompt(&json_args));
    assert_eq!(v["sequence"].as_array().unwrap().len(), 1);
    assert!(v["response"].is_null());
}

#[test]
fn optimize_calls_the_environment_on_request() {
    let dir = train_tiny(&[]);
    let ckpt = dir.path().join("checkpoint.grlp");
    let out = grlprompt(&[
        "optimize",
        "--checkpoint",
        path_str(&ckpt),
        "--query",
        "capital of italy",
        "--call-env",
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("prompt:\n"));
    assert!(stdout.contains("### Instruction:\ncapital of italy"));
    assert!(stdout.contains("response:\n"));
}

#[test]
fn trained_policy_includes_the_matching_example() {
    let dir = TempDir::new().unwrap();
    let out = grlprompt(&[
        "train",
        "--config",
        path_str(&data("echo.toml")),
        "--variant",
        "no-kg",
        "--out-dir",
        path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("checkpoint.grlp");
    let queries: Vec<String> = fs::read_to_string(data("echo.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["instruction"].as_str().unwrap().to_owned())
        .collect();
    for query in &queries {
        let v = stdout_json(&grlprompt(&[
            "optimize",
            "--checkpoint",
            path_str(&ckpt),
            "--query",
            query,
            "--json",
            "--max-chars",
            "200",
        ]));
        let picked: Vec<&str> = v["examples"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["query"].as_str().unwrap())
            .collect();
        assert!(picked.contains(&query.as_str()), "{query:?} not in {picked:?}");
    }
}

#[test]
fn unreadable_checkpoint_exits_1_with_integrity_message() {
    let dir = train_tiny(&[]);
    let ckpt = dir.path().join("checkpoint.grlp");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let corrupt = dir.path().join("corrupt.grlp");
    fs::write(&corrupt, &bytes).unwrap();
    let out = grlprompt(&["optimize", "--checkpoint", path_str(&corrupt), "--query", "hi"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));

    let truncated = dir.path().join("truncated.grlp");
    fs::write(&truncated, &bytes[..mid]).unwrap();
    let out = grlprompt(&["eval", "--checkpoint", path_str(&truncated)]);
    assert_eq!(out.status.code(), Some(1));

    let missing = dir.path().join("nope.grlp");
    let out = grlprompt(&["optimize", "--checkpoint", path_str(&missing), "--query", "hi"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resume_continues_the_log() {
    let dir = train_tiny(&["--max-updates", "3"]);
    let first = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 6);
    let ckpt = dir.path().join("checkpoint.grlp");
    let resumed = TempDir::new().unwrap();
    fs::copy(dir.path().join("train_log.jsonl"), resumed.path().join("train_log.jsonl")).unwrap();
    let out = grlprompt(&[
        "train",
        "--config",
        path_str(&data("run.toml")),
        "--seed",
        "7",
        "--resume",
        path_str(&ckpt),
        "--out-dir",
        path_str(resumed.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let full = train_tiny(&[]);
    for name in ["checkpoint.grlp", "train_log.jsonl"] {
        assert_eq!(
            fs::read(resumed.path().join(name)).unwrap(),
            fs::read(full.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
}
