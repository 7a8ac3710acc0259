use std::path::Path;
use std::process::{Command, Output};

fn nestor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nestor"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[model]
dim = 16
heads = 2
kernel_sizes = [2]
regressor_layers = 1
mlp_hidden = 8

[embeddings]
char_dim = 4
char_out = 4
word_dim = 8
pos_dim = 0

[train]
epochs = 3
batch_size = 4
warmup_steps = 2
seed = 5

[data.synthetic]
seed = 2
n_sentences = 16
max_len = 8
n_types = 2
nest_prob = 0.3
"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn train_small(dir: &Path, run: &str) -> std::path::PathBuf {
    let cfg = small_config(dir);
    let out = dir.join(run);
    let o = nestor(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn missing_training_data_names_the_key() {
    let o = nestor(&["train", "--out", "/tmp/unused-nestor-run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.train"), "{}", stderr(&o));
}

#[test]
fn unknown_and_mistyped_keys_are_config_errors() {
    let o = nestor(&["train", "--set", "model.depth=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
    let o = nestor(&["train", "--set", "model.dim=wide"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.dim"), "{}", stderr(&o));
    let o = nestor(&["train", "--set", "model.heads=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.heads"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_nestor"))
        .args(["gradcheck"])
        .env("NESTOR_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("NESTOR_THREADS"));
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    std::fs::write(&p, "{\"id\": \"a\", \"tokens\": [\"x\"]}\n{oops\n").unwrap();
    let o = nestor(&["train", "--set", &format!("data.train=\"{}\"", p.display()), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn training_is_deterministic_and_eval_matches_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a");
    let b = train_small(dir.path(), "b");
    let log_a = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let log_b = std::fs::read_to_string(b.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 3);
    for f in ["best.ckpt", "last.ckpt", "config.toml", "train.jsonl", "dev.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read(a.join("best.ckpt")).unwrap(), std::fs::read(b.join("best.ckpt")).unwrap());

    // the best epoch's logged dev metrics equal a fresh evaluation of best.ckpt
    let best: serde_json::Value = log_a
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["best"] == true)
        .last()
        .unwrap();
    let o = nestor(&[
        "eval",
        "--checkpoint",
        a.join("best.ckpt").to_str().unwrap(),
        "--data",
        a.join("dev.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("overall"));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["overall"], best["dev"]);

    // the resolved config reproduces the run
    let o = nestor(&["train", "--config", a.join("config.toml").to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(dir.path().join("c/metrics.jsonl")).unwrap(), log_a);
}

#[test]
fn eval_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run");
    let ckpt = run.join("best.ckpt");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = nestor(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["overall"]["gold"], 0);
    assert_eq!(eval["overall"]["predicted"], 0);

    let alien = dir.path().join("alien.jsonl");
    std::fs::write(&alien, "{\"id\":\"z\",\"tokens\":[\"a\",\"b\"],\"entities\":[{\"start\":0,\"end\":0,\"type\":\"ZZZ\"}]}\n").unwrap();
    let o = nestor(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", alien.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("ZZZ"), "{}", stderr(&o));

    let o = nestor(&["eval", "--checkpoint", dir.path().join("nope.ckpt").to_str().unwrap(), "--data", empty.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = nestor(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn predictions_are_sorted_scored_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path(), "run");
    let ckpt = run.join("best.ckpt");
    let input = run.join("dev.jsonl");
    let first = nestor(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let second = nestor(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--input", input.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);

    let text = String::from_utf8(first.stdout).unwrap();
    let n_in = std::fs::read_to_string(&input).unwrap().lines().count();
    assert_eq!(text.lines().count(), n_in);
    let mut ids = vec![];
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        ids.push(v["id"].as_str().unwrap().to_string());
        let ents = v["entities"].as_array().unwrap();
        let keys: Vec<(u64, u64, String)> = ents
            .iter()
            .map(|e| (e["start"].as_u64().unwrap(), e["end"].as_u64().unwrap(), e["type"].as_str().unwrap().to_string()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for e in ents {
            let s = e["score"].as_f64().unwrap();
            assert!(s > 0.0 && s <= 1.0);
            assert!(e["start"].as_u64() <= e["end"].as_u64());
        }
    }
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let out = dir.path().join("pred.jsonl");
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = nestor(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--input", empty.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn gradcheck_passes_and_reports_faults() {
    let o = nestor(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("pipeline") && !text.contains("FAIL"), "{text}");

    let o = nestor(&["gradcheck", "--fault", "log_prior"]);
    assert_eq!(code(&o), 5);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("log_prior") && text.contains("FAIL"), "{text}");

    let o = nestor(&["gradcheck", "--fault", "no_such_op"]);
    assert_eq!(code(&o), 2);
}
