use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
events = "events.jsonl"
catalog = "catalog.jsonl"
split = [0.7, 0.15, 0.15]
le_fraction = 0.3

[hyper]
emb_dim = 16
hidden_dim = 16
batch_size = 20
eval_every_steps = 10
max_epochs = 2

[lm]
d_model = 16
ff_dim = 32
pretrain_epochs = 1
template = "compact"

[tokenize]
iters = 10

[finetune]
epochs = 1

[synthetic]
n_items = 30
n_users = 120
max_len = 8

[ablate]
grid = [0.0, 0.5]
seeds = [0, 1]
"#;

fn lea(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lea"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&lea(
        dir.path(),
        &["synth", "--config", "small.toml", "--out", "."],
    ));
    dir
}

fn first_line(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn normal_run_then_eval_reproduces_report() {
    let dir = setup();
    let d = dir.path();
    let s = ok(&lea(d, &["prep", "--config", "small.toml", "--out", "run"]));
    assert!(s.contains("30 items") || s.contains("items"));
    let args = [
        "train",
        "--config",
        "small.toml",
        "--mode",
        "normal",
        "--out",
        "run",
    ];
    let train = ok(&lea(d, &args));
    assert!(train.contains("HR"));
    let first = std::fs::read(d.join("run/eval.jsonl")).unwrap();
    let eval = ok(&lea(
        d,
        &[
            "eval",
            "--config",
            "small.toml",
            "--mode",
            "normal",
            "--out",
            "run",
        ],
    ));
    assert_eq!(train, eval);
    assert_eq!(std::fs::read(d.join("run/eval.jsonl")).unwrap(), first);
    for f in [
        "prep.jsonl",
        "train_log.jsonl",
        "eval.jsonl",
        "policy.jsonl",
        "timing.jsonl",
    ] {
        let h = first_line(&d.join("run").join(f));
        let h = if f == "policy.jsonl" {
            h["provenance"].clone()
        } else if f == "eval.jsonl" {
            h["config"].clone()
        } else {
            h
        };
        assert!(h["config"]["hyper"].is_object(), "{f} lacks the config");
        assert_eq!(
            h["inputs"]["events"].as_str().unwrap().len(),
            64,
            "{f} lacks hashes"
        );
    }
    // A normal run never builds an environment.
    assert!(!d.join("run/le").exists());
}

#[test]
fn seeds_reproduce_logs() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&lea(
            d,
            &[
                "train",
                "--config",
                "small.toml",
                "--mode",
                "base",
                "--env",
                "fixed-reward",
                "--seed",
                "3",
                "--out",
                out,
            ],
        ));
    }
    for f in ["train_log.jsonl", "eval.jsonl", "policy.jsonl"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn environment_pipeline() {
    let dir = setup();
    let d = dir.path();
    let t = ok(&lea(
        d,
        &["tokenize", "--config", "small.toml", "--out", "run"],
    ));
    assert!(t.contains("items tokenized"), "{t}");
    let f = ok(&lea(
        d,
        &["finetune-le", "--config", "small.toml", "--out", "run"],
    ));
    assert!(f.contains("epoch"));
    for file in ["env.json", "lm.jsonl", "adapter.jsonl", "tokens.jsonl"] {
        assert!(d.join("run/le").join(file).exists());
    }
    let r = ok(&lea(
        d,
        &[
            "train",
            "--config",
            "small.toml",
            "--mode",
            "leasr",
            "--out",
            "run",
        ],
    ));
    assert!(r.contains("NDCG"));
    let a = ok(&lea(
        d,
        &[
            "ablate",
            "--config",
            "small.toml",
            "--mode",
            "lea",
            "--out",
            "run",
        ],
    ));
    assert!(a.contains("w_ah"));
    let text = std::fs::read_to_string(d.join("run/ablate.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn errors_are_one_categorised_line() {
    let dir = setup();
    let d = dir.path();
    let cases: [(&[&str], &str); 4] = [
        (
            &["train", "--config", "missing.toml"],
            "error[missing-input]",
        ),
        (
            &["train", "--config", "small.toml", "--mode", "nonsense"],
            "error[config]",
        ),
        (
            &[
                "train",
                "--config",
                "small.toml",
                "--mode",
                "ler",
                "--env",
                "fixed-reward",
            ],
            "error[config]",
        ),
        (
            &["eval", "--config", "small.toml", "--out", "nowhere"],
            "error[missing-input]",
        ),
    ];
    for (args, want) in cases {
        let out = lea(d, args);
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(want), "{args:?}: {err}");
    }
}
