use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use permgen::corpus::load_jsonl;
use permgen::metrics::{evaluate, EvalOptions, HypothesisGroup};
use permgen::train::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

const TINY: &str = r#"{
    "model.d_model": 16, "model.n_heads": 2, "model.n_enc_layers": 1,
    "model.n_dec_layers": 1, "model.d_ff": 32, "model.max_source_len": 32,
    "train.warmup_steps": 10, "train.base_lr": 0.01, "run.eval_every": 20
}"#;

fn permgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permgen"))
        .args(args)
        .env_remove("PERMGEN_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(three_sentences: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let mut args = vec!["toy-corpus", "--out", s(&data), "--train", "80"];
        if three_sentences {
            args.push("--three-sentences");
        }
        ok(permgen(&args));
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let corpus = self.path("data/train.jsonl");
        let out = self.path(out);
        let cfg = self.path("tiny.json");
        let mut args = vec![
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--seed",
            "5",
        ];
        if !extra.contains(&"--config") {
            args.extend(["--config", s(&cfg)]);
        }
        if !extra.contains(&"--max-steps") {
            args.extend(["--max-steps", "60"]);
        }
        args.extend_from_slice(extra);
        permgen(&args)
    }

    fn generate(&self, run: &str, inputs: &Path, out: &str, extra: &[&str]) -> Output {
        let ckpt = self.path(&format!("{run}/checkpoint.pgen"));
        let out = self.path(out);
        let mut args = vec![
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--inputs",
            s(inputs),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        permgen(&args)
    }
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn config_hash_from_inspect(out: &str) -> String {
    let first = out.lines().next().unwrap();
    first.rsplit(' ').next().unwrap().to_string()
}

#[test]
fn train_reduces_dev_nll_and_tags_every_artifact() {
    let fx = Fixture::new(false);
    ok(fx.train("run", &[]));
    let log = jsonl(&fx.path("run/train_log.jsonl"));
    let evals: Vec<f64> = log
        .iter()
        .filter(|l| l["event"] == "eval")
        .map(|l| l["dev_nll"].as_f64().unwrap())
        .collect();
    assert!(evals.len() >= 2);
    assert!(evals.last().unwrap() < &evals[0], "{evals:?}");

    let config: Value =
        serde_json::from_str(&fs::read_to_string(fx.path("run/config.json")).unwrap()).unwrap();
    let hash = config["config_hash"].as_str().unwrap().to_string();
    assert!(log.iter().all(|l| l["config_hash"] == hash.as_str()));
    let ckpt = Checkpoint::load(&fx.path("run/checkpoint.pgen")).unwrap();
    assert_eq!(ckpt.meta["config_hash"], hash.as_str());
    let dump = ok(permgen(&[
        "inspect",
        "checkpoint",
        s(&fx.path("run/checkpoint.pgen")),
    ]));
    assert_eq!(config_hash_from_inspect(&dump), hash);

    let heldout = fx.path("data/heldout.jsonl");
    ok(fx.generate("run", &heldout, "gen.jsonl", &["--k", "3"]));
    let gens = jsonl(&fx.path("gen.jsonl"));
    assert_eq!(gens.len(), 24);
    for g in &gens {
        assert_eq!(g["candidates"].as_array().unwrap().len(), 3);
        assert_eq!(g["checkpoint_config_hash"], hash.as_str());
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let fx = Fixture::new(true);
    ok(fx.train("a", &[]));
    ok(fx.train("b", &[]));
    let a = fs::read(fx.path("a/train_log.jsonl")).unwrap();
    let b = fs::read(fx.path("b/train_log.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(fx.path("a/checkpoint.pgen")).unwrap(),
        fs::read(fx.path("b/checkpoint.pgen")).unwrap()
    );
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let fx = Fixture::new(true);
    ok(fx.train("full", &["--threads", "1"]));
    let cfg = fx.path("tiny.json");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "\"run.eval_every\": 20",
        "\"run.eval_every\": 20, \"run.checkpoint_every\": 30",
    );
    fs::write(fx.path("tiny_ckpt.json"), text).unwrap();
    let corpus = fx.path("data/train.jsonl");
    let part = fx.path("part");
    ok(permgen(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&part),
        "--config",
        s(&fx.path("tiny_ckpt.json")),
        "--max-steps",
        "60",
        "--seed",
        "5",
        "--threads",
        "1",
    ]));
    let resumed = fx.path("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(part.join("checkpoint-30.pgen"), resumed.join("start.pgen")).unwrap();
    fs::copy(part.join("vocab.txt"), resumed.join("vocab.txt")).unwrap();
    ok(permgen(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&resumed),
        "--config",
        s(&cfg),
        "--max-steps",
        "60",
        "--seed",
        "5",
        "--threads",
        "1",
        "--resume",
        s(&resumed.join("start.pgen")),
    ]));
    let full = Checkpoint::load(&fx.path("full/checkpoint.pgen")).unwrap();
    let again = Checkpoint::load(&resumed.join("checkpoint.pgen")).unwrap();
    assert_eq!(again.step, 60);
    assert_eq!(full.params, again.params);
    assert_eq!(full.to_bytes().unwrap(), again.to_bytes().unwrap());
}

#[test]
fn missing_corpus_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = permgen(&["train", "--corpus", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.jsonl"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_1() {
    let fx = Fixture::new(true);
    fs::write(fx.path("bad.json"), r#"{"model.depth": 3}"#).unwrap();
    let out = fx.train("run", &["--config", s(&fx.path("bad.json"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model.depth"));
    assert_eq!(code(&fx.train("run", &["--top-p", "1.5"])), 1);
    assert_eq!(code(&permgen(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&permgen(&["generate", "--strategy", "greedy"])), 1);
}

#[test]
fn vocabulary_mismatch_exits_2() {
    let fx = Fixture::new(true);
    ok(fx.train("run", &[]));
    let other = fx.path("other_vocab.txt");
    let vocab = fs::read_to_string(fx.path("run/vocab.txt")).unwrap();
    fs::write(&other, vocab + "extra\n").unwrap();
    let out = fx.generate(
        "run",
        &fx.path("data/heldout.jsonl"),
        "gen.jsonl",
        &["--vocab", s(&other)],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("hash mismatch"), "{}", stderr(&out));
}

#[test]
fn force_order_fixes_the_realized_order() {
    let fx = Fixture::new(true);
    ok(fx.train("run", &[]));
    ok(fx.generate(
        "run",
        &fx.path("data/heldout.jsonl"),
        "gen.jsonl",
        &["--force-order", "1,2,3", "--k", "2"],
    ));
    for g in jsonl(&fx.path("gen.jsonl")) {
        for c in g["candidates"].as_array().unwrap() {
            assert_eq!(c["order"], json!([1, 2, 3]));
            assert_eq!(c["indices"], json!([1, 2, 3]));
            assert_eq!(c["sentences"].as_array().unwrap().len(), 3);
        }
    }
}

fn check_schema(g: &Value, id: usize, k: usize) {
    let obj = g.as_object().unwrap();
    let keys: BTreeSet<&str> = obj.keys().map(String::as_str).collect();
    let want: BTreeSet<&str> = [
        "id",
        "source",
        "candidates",
        "first_indices",
        "first_index_with_replacement",
        "config_hash",
        "checkpoint_config_hash",
    ]
    .into();
    assert_eq!(keys, want);
    assert_eq!(g["id"], id);
    assert!(g["source"].is_string());
    assert!(g["first_index_with_replacement"].is_boolean());
    assert_eq!(g["first_indices"].as_array().unwrap().len(), k);
    let cands = g["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), k);
    let mut prev = f64::INFINITY;
    for c in cands {
        let keys: BTreeSet<&str> = c.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["sentences", "indices", "order", "score", "truncated"].into()
        );
        let sentences = c["sentences"].as_array().unwrap();
        assert!(sentences.iter().all(Value::is_string));
        let indices: Vec<u64> = c["indices"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        assert_eq!(indices.len(), sentences.len());
        assert!(indices.windows(2).all(|w| w[0] < w[1]));
        assert!(indices.iter().all(|&i| (1..=10).contains(&i)));
        let mut order: Vec<u64> = c["order"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        order.sort_unstable();
        assert_eq!(order, indices);
        let score = c["score"].as_f64().unwrap();
        assert!(score.is_finite() && score <= 0.0);
        assert!(score <= prev, "candidates are ranked");
        prev = score;
        assert!(c["truncated"].is_boolean());
    }
}

#[test]
fn generation_output_matches_schema_on_random_inputs() {
    let fx = Fixture::new(true);
    ok(fx.train("run", &[]));
    let words = [
        "monday", "friday", "morning", "evening", "rainy", "sunny", "calm", "home", "zebra", "the",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lines: String = (0..100)
        .map(|_| {
            let n = rng.random_range(1..5);
            let items: Vec<&str> = (0..n)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect();
            json!({ "input": items }).to_string() + "\n"
        })
        .collect();
    let inputs = fx.path("random.jsonl");
    fs::write(&inputs, lines).unwrap();
    for (strategy, k) in [("beam", 2), ("topk", 3), ("nucleus", 1)] {
        let out = format!("gen-{strategy}.jsonl");
        ok(fx.generate(
            "run",
            &inputs,
            &out,
            &[
                "--strategy",
                strategy,
                "--k",
                &k.to_string(),
                "--beam-width",
                "2",
            ],
        ));
        let gens = jsonl(&fx.path(&out));
        assert_eq!(gens.len(), 100);
        for (id, g) in gens.iter().enumerate() {
            check_schema(g, id, k);
        }
    }
}

fn reference_generations(refs: &Path, out: &Path) {
    let lines: String = fs::read_to_string(refs)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            json!({ "source": v["input"], "candidates": [{ "sentences": v["sentences"] }] })
                .to_string()
                + "\n"
        })
        .collect();
    fs::write(out, lines).unwrap();
}

#[test]
fn self_evaluation_scores_perfect_bleu() {
    let fx = Fixture::new(true);
    let refs = fx.path("data/heldout.jsonl");
    let gens = fx.path("self.jsonl");
    reference_generations(&refs, &gens);
    let report = fx.path("report.json");
    let table = ok(permgen(&[
        "evaluate",
        "--generations",
        s(&gens),
        "--references",
        s(&refs),
        "--out",
        s(&report),
    ]));
    assert!(table.contains("bleu4"));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["metrics"]["bleu4"], 1.0);
    assert_eq!(r["metrics"]["oracle_bleu4"], 1.0);
    assert!(r["absent"]
        .as_array()
        .unwrap()
        .contains(&json!("self_bleu4")));
    assert!(r["config"]["config_hash"].is_string());
}

#[test]
fn report_equals_direct_library_calls() {
    let fx = Fixture::new(true);
    ok(fx.train("run", &[]));
    let refs = fx.path("data/heldout.jsonl");
    ok(fx.generate(
        "run",
        &refs,
        "gen.jsonl",
        &["--k", "3", "--strategy", "topk"],
    ));
    let report = fx.path("report.json");
    ok(permgen(&[
        "evaluate",
        "--generations",
        s(&fx.path("gen.jsonl")),
        "--references",
        s(&refs),
        "--out",
        s(&report),
    ]));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();

    let references = load_jsonl(&refs).unwrap();
    let groups: Vec<HypothesisGroup<String>> = jsonl(&fx.path("gen.jsonl"))
        .iter()
        .zip(&references)
        .map(|(g, reference)| HypothesisGroup {
            hypotheses: g["candidates"]
                .as_array()
                .unwrap()
                .iter()
                .map(|c| {
                    c["sentences"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .flat_map(|s| permgen::corpus::tokenize(s.as_str().unwrap()))
                        .collect()
                })
                .collect(),
            reference: reference.sentences.concat(),
        })
        .collect();
    let direct = evaluate(&groups, &EvalOptions::default()).unwrap();
    assert_eq!(direct.metrics.len(), 13);
    for (name, value) in &direct.metrics {
        assert_eq!(r["metrics"][name].as_f64().unwrap(), *value, "{name}");
    }
}

#[test]
fn evaluate_rejects_empty_and_misaligned_inputs() {
    let fx = Fixture::new(true);
    let refs = fx.path("data/heldout.jsonl");
    let gens = fx.path("self.jsonl");
    reference_generations(&refs, &gens);
    let text = fs::read_to_string(&gens).unwrap();

    let mut lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    lines[4]["candidates"] = json!([]);
    let empty = fx.path("empty.jsonl");
    fs::write(
        &empty,
        lines
            .iter()
            .map(|v| v.to_string() + "\n")
            .collect::<String>(),
    )
    .unwrap();
    let out = permgen(&[
        "evaluate",
        "--generations",
        s(&empty),
        "--references",
        s(&refs),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("empty candidate list at source ids: 4"),
        "{}",
        stderr(&out)
    );

    let short = fx.path("short.jsonl");
    fs::write(
        &short,
        text.lines()
            .take(22)
            .map(|l| format!("{l}\n"))
            .collect::<String>(),
    )
    .unwrap();
    let out = permgen(&[
        "evaluate",
        "--generations",
        s(&short),
        "--references",
        s(&refs),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("unmatched source ids: 22, 23"),
        "{}",
        stderr(&out)
    );

    let mut swapped: Vec<&str> = text.lines().collect();
    swapped.swap(1, 2);
    let swapped_path = fx.path("swapped.jsonl");
    fs::write(
        &swapped_path,
        swapped.iter().map(|l| format!("{l}\n")).collect::<String>(),
    )
    .unwrap();
    let out = permgen(&[
        "evaluate",
        "--generations",
        s(&swapped_path),
        "--references",
        s(&refs),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("source ids: 1, 2"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn inspect_lists_every_tensor_once() {
    let fx = Fixture::new(true);
    ok(fx.train("run", &["--max-steps", "12"]));
    let path = fx.path("run/checkpoint.pgen");
    let dump = ok(permgen(&["inspect", "checkpoint", s(&path)]));
    let ckpt = Checkpoint::load(&path).unwrap();
    for name in ckpt.params.names() {
        let hits = dump
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(name))
            .count();
        assert_eq!(hits, 1, "{name}");
    }
    let rows = dump.lines().filter(|l| l.contains('[')).count();
    assert_eq!(rows, ckpt.params.len());
}

#[test]
fn inspect_sequence_renders_the_worked_example() {
    let dump = ok(permgen(&[
        "inspect",
        "sequence",
        "--sentence",
        "w1",
        "--sentence",
        "w2 w3",
        "--order",
        "2,1",
    ]));
    let rows: Vec<Vec<&str>> = dump
        .lines()
        .map(|l| l.split_whitespace().collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(
        rows[0][1..],
        ["<BOS>", "<B-2>", "w2", "w3", "<E-2>", "<B-1>", "w1", "<E-1>", "<EOP>"]
    );
    assert_eq!(rows[1][1..], ["0", "2", "2", "2", "2", "1", "1", "1", "11"]);
    assert_eq!(rows[2][1..], ["0", "1", "2", "3", "4", "1", "2", "3", "1"]);
    assert!(rows.iter().all(|r| r.len() == rows[0].len()));
    let starts = |line: &str| -> Vec<usize> {
        line.char_indices()
            .filter(|&(i, c)| c != ' ' && (i == 0 || line.as_bytes()[i - 1] == b' '))
            .map(|(i, _)| i)
            .collect()
    };
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(starts(lines[0]), starts(lines[1]));
    assert_eq!(starts(lines[0]), starts(lines[2]));
}

#[test]
fn inspect_unreadable_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = permgen(&["inspect", "checkpoint", s(&dir.path().join("missing.pgen"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn log_level_comes_from_the_environment() {
    let fx = Fixture::new(true);
    let corpus = fx.path("data/train.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_permgen"))
        .args([
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(&fx.path("run")),
            "--config",
            s(&fx.path("tiny.json")),
            "--max-steps",
            "10",
        ])
        .env("PERMGEN_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stderr(&out).contains("step 10"), "{}", stderr(&out));
}
