use std::path::Path;
use std::process::{Command, Output};

use stlm::data::english_like;

fn stlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlm"))
        .args(args)
        .current_dir(dir)
        .env_remove("STLM_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const RUN: &str = r#"
[model]
n_layers = 1
hidden_dim = 32
n_heads = 4
group_size = 2
ffn_dim = 64
vocab_size = 301
max_context = 32
dropout = 0.0

[train]
batch_size = 4
grad_accum_steps = 1
total_iters = 30
warmup_iters = 5
seq_len = 32
checkpoint_every = 10
eval_every = 10
eval_batches = 2

[paths]
corpus = "corpus.txt"
merges = "merges.txt"
checkpoint_dir = "ckpt"
metrics = "metrics.jsonl"
"#;

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("corpus.txt"), english_like(3, 40_000)).unwrap();
    std::fs::write(d.join("run.toml"), RUN).unwrap();

    let out = stdout(&stlm(d, &["tokenizer-train", "--corpus", "corpus.txt", "--vocab-size", "300", "--out", "merges.txt"]));
    assert!(out.contains("model vocab_size 301"), "{out}");

    let out = stdout(&stlm(d, &["train", "--config", "run.toml", "--max-steps", "20"]));
    assert!(out.contains("trained to step 20 of 30"), "{out}");
    let log = std::fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert!(last["val_byte_ppl"].as_f64().unwrap() > 1.0);
    for f in ["ckpt-000010.stlm", "ckpt-000020.stlm", "latest.stlm", "config.toml"] {
        assert!(d.join("ckpt").join(f).exists(), "{f}");
    }

    let out = stdout(&stlm(d, &["train", "--config", "run.toml", "--resume", "ckpt/latest.stlm"]));
    assert!(out.contains("trained to step 30 of 30"), "{out}");
    assert_eq!(std::fs::read_to_string(d.join("metrics.jsonl")).unwrap().lines().count(), 30);

    let report: serde_json::Value =
        serde_json::from_str(&stdout(&stlm(d, &["eval", "--checkpoint", "ckpt/latest.stlm", "--text", "corpus.txt"]))).unwrap();
    let ppl = report["byte_perplexity"].as_f64().unwrap();
    assert!(ppl > 1.0 && ppl < 256.0, "{ppl}");
    assert_eq!(report["n_bytes"], 40_000);

    std::fs::write(
        d.join("items.jsonl"),
        "{\"context\":\"The\",\"options\":[\" the\",\" qzx\"],\"gold\":0}\n\n{\"context\":\"A\",\"options\":[\" b\",\" c\",\" d\"],\"gold\":2}\n",
    )
    .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&stdout(&stlm(d, &["eval-mc", "--checkpoint", "ckpt/latest.stlm", "--items", "items.jsonl"]))).unwrap();
    assert_eq!(report["n_items"], 2);

    let gen = |seed: &str| stdout(&stlm(d, &["generate", "--checkpoint", "ckpt/latest.stlm", "--prompt", "The ", "--max-new-bytes", "24", "--temperature", "0.8", "--seed", seed]));
    assert_eq!(gen("5"), gen("5"));
}

#[test]
fn audit_reports_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&stlm(dir.path(), &["audit"]));
    assert!(text.contains("49857536"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&stdout(&stlm(dir.path(), &["audit", "--json"]))).unwrap();
    assert_eq!(json["total"], 49_857_536);
    let pooled: serde_json::Value = serde_json::from_str(&stdout(&stlm(
        dir.path(),
        &["audit", "--json", "--set", "model.embedder=byte_pool"],
    )))
    .unwrap();
    assert!(pooled["total"].as_u64().unwrap() < 49_857_536);
}

#[test]
fn failures_are_one_line_with_a_kind_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&[&str], &str, &str); 3] = [
        (&["audit", "--set", "model.hiden_dim=3"], "error[config]", "model.hiden_dim"),
        (&["eval", "--checkpoint", "missing.stlm", "--text", "t.txt"], "error[io]", "missing.stlm"),
        (&["audit", "--set", "model.tying=none", "--set", "model.lora_rank=2"], "error[config]", "lora_rank"),
    ];
    for (args, kind, detail) in cases {
        let o = stlm(dir.path(), args);
        assert!(!o.status.success());
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with(kind) && err.contains(detail), "{err}");
    }
    std::fs::write(dir.path().join("bad.stlm"), b"STLM1 truncated").unwrap();
    let o = stlm(dir.path(), &["generate", "--checkpoint", "bad.stlm"]);
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[format]"));
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("corpus.txt"), english_like(4, 20_000)).unwrap();
    let run = RUN.replace("merges = \"merges.txt\"", "merges = \"\"").replace("vocab_size = 301", "vocab_size = 257");
    std::fs::write(d.join("run.toml"), run).unwrap();
    let train = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_stlm"))
            .args(["train", "--config", "run.toml", "--max-steps", "3"])
            .current_dir(d)
            .env("STLM_SEED", seed)
            .output()
            .unwrap();
        stdout(&o);
        let dumped = std::fs::read_to_string(d.join("ckpt/config.toml")).unwrap();
        (std::fs::read_to_string(d.join("metrics.jsonl")).unwrap(), dumped)
    };
    let (a, cfg) = train("11");
    assert!(cfg.contains("seed = 11"), "{cfg}");
    let (b, _) = train("12");
    let loss = |log: &str| serde_json::from_str::<serde_json::Value>(log.lines().next().unwrap()).unwrap()["loss"].clone();
    assert_ne!(loss(&a), loss(&b));
}
