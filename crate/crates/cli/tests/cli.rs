use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn xvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xvl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn xvl")
}

fn ok(args: &[&str]) -> String {
    let out = xvl(args);
    assert!(
        out.status.success(),
        "xvl {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    xvl(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn corpus_len(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count() - 1
}

const TINY: &[&str] = &[
    "--dim", "16", "--heads", "2", "--ffn_dim", "32", "--vision_layers", "1", "--text_layers", "1",
    "--fusion_layers", "2", "--proj_dim", "8", "--queue_size", "24", "--batch_size", "4",
    "--init_std", "0.1",
];

fn gen(dir: &Path, n: usize) -> PathBuf {
    let d = dir.join("data");
    ok(&["gen-data", "--out", s(&d), "--n", &n.to_string(), "--seed", "0"]);
    d
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_is_reproducible_and_split() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen-data", "--out", s(&a), "--n", "100", "--seed", "0"]);
    ok(&["gen-data", "--out", s(&b), "--n", "100", "--seed", "0"]);
    for split in ["train", "val", "test"] {
        let f = format!("{split}.jsonl");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{split} differs");
    }
    assert_eq!(
        [corpus_len(&a.join("train.jsonl")), corpus_len(&a.join("val.jsonl")), corpus_len(&a.join("test.jsonl"))],
        [80, 10, 10]
    );
    let mut ids = std::collections::BTreeSet::new();
    for split in ["train", "val", "test"] {
        for r in fs::read_to_string(a.join(format!("{split}.jsonl"))).unwrap().lines().skip(1) {
            let v: Value = serde_json::from_str(r).unwrap();
            assert!(ids.insert(v["study_id"].as_str().unwrap().to_string()), "duplicate id across splits");
        }
    }
    assert!(a.join("manifest.json").exists() && a.join("prompts.txt").exists());

    // non-empty directory without --force
    assert_eq!(code(&["gen-data", "--out", s(&a), "--n", "10"]), 2);
    ok(&["gen-data", "--out", s(&a), "--n", "10", "--force"]);
    assert_eq!(corpus_len(&a.join("train.jsonl")), 8);
}

#[test]
fn class_mix_frequencies() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let n = 10_000;
    ok(&["gen-data", "--out", s(&d), "--n", &n.to_string(), "--classes", "6", "--seed", "3"]);
    let mut counts = [0usize; 6];
    let names = ["no finding", "alpha", "beta", "gamma", "delta", "epsilon"];
    for split in ["train", "val", "test"] {
        for r in fs::read_to_string(d.join(format!("{split}.jsonl"))).unwrap().lines().skip(1) {
            let v: Value = serde_json::from_str(r).unwrap();
            // primary class: first present finding, else "no finding"
            let first = v["findings"].as_array().unwrap().iter().find(|f| f["present"].as_bool().unwrap());
            let k = match first {
                None => 0,
                Some(f) => names.iter().position(|c| f["class"].as_str() == Some(*c)).unwrap(),
            };
            counts[k] += 1;
        }
    }
    for (k, c) in counts.iter().enumerate() {
        let frac = *c as f64 / n as f64;
        assert!((frac - 1.0 / 6.0).abs() <= 0.02, "{}: {frac}", names[k]);
    }
    assert_eq!(code(&["gen-data", "--out", s(&t.path().join("x")), "--classes", "9"]), 2);
}

#[test]
fn train_with_zero_epochs_writes_initial_checkpoint_only() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 40);
    let run = t.path().join("run");
    train_tiny(&data, &run, &["--epochs", "0", "--warmup_epochs", "0"]);
    assert!(run.join("final.ckpt").exists());
    assert!(!run.join("best.ckpt").exists());
    assert_eq!(fs::read_to_string(run.join("steps.jsonl")).unwrap(), "");
    let m: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["epochs"], 0);
}

#[test]
fn config_precedence_and_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 40);
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "# test\nepochs = 3\nlambda = 0.25\n").unwrap();
    let run = t.path().join("run");
    train_tiny(&data, &run, &["--config", s(&cfg), "--epochs", "0", "--warmup_epochs", "0"]);
    let text = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(text.contains("epochs = 0\n"), "flag beats file:\n{text}");
    assert!(text.contains("lambda = 0.25\n"), "file beats default:\n{text}");
    assert!(text.contains("momentum = 0.995\n"), "defaults kept:\n{text}");

    let bad = t.path().join("bad.cfg");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&bad)]), 2);
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&run), "--lambda", "abc"]), 2);
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&run), "--bogus", "1"]), 2);
    assert_eq!(code(&["train", "--data", s(&t.path().join("missing")), "--out", s(&run)]), 3);
}

#[test]
fn non_finite_training_exits_with_numeric_code() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 40);
    let run = t.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--epochs", "2", "--warmup_epochs", "0", "--lr_peak", "1e300", "--lr_init", "1e300", "--clip_norm", "1e300"]);
    assert_eq!(code(&args), 4);
    assert!(fs::read_dir(&run).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("abort-step")));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 40);
    let full = t.path().join("full");
    let part = t.path().join("part");
    train_tiny(&data, &full, &["--epochs", "3"]);
    train_tiny(&data, &part, &["--epochs", "3", "--max-steps", "13"]);
    assert!(!part.join("final.ckpt").exists());
    let last = part.join("last.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&part), "--resume", s(&last)]);
    assert_eq!(
        fs::read_to_string(full.join("steps.jsonl")).unwrap(),
        fs::read_to_string(part.join("steps.jsonl")).unwrap()
    );
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(part.join("final.ckpt")).unwrap());
    assert_eq!(fs::read(full.join("best.ckpt")).unwrap(), fs::read(part.join("best.ckpt")).unwrap());
    assert_eq!(jsonl(&full.join("steps.jsonl")).len(), 24);
    // overrides are refused on resume
    assert_eq!(code(&["train", "--data", s(&data), "--out", s(&part), "--resume", s(&last), "--epochs", "9"]), 2);
}

/// Untrained desk-size checkpoint plus a 2000-study corpus, shared by the
/// evaluation tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&["gen-data", "--out", s(&data), "--n", "2000", "--seed", "1"]);
        let run = dir.path().join("run");
        ok(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "0", "--warmup_epochs", "0"]);
        Fixture {
            ckpt: run.join("final.ckpt"),
            data,
            _dir: dir,
        }
    })
}

#[test]
fn untrained_classification_is_at_chance() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("cls");
    let stdout = ok(&[
        "eval-classify", "--checkpoint", s(&f.ckpt), "--corpus", s(&f.data.join("test.jsonl")),
        "--prompts", s(&f.data.join("prompts.txt")), "--out", s(&out), "--n-boot", "200",
    ]);
    assert!(stdout.contains("mean/simple"));
    let records = jsonl(&out.join("metrics.jsonl"));
    assert_eq!(records.len(), 5 * 2 * 2, "classes x modes x metrics");
    let summary = jsonl(&out.join("summary.jsonl"));
    assert_eq!(summary.len(), 2 * 2);
    for r in summary.iter().filter(|r| r["metric"] == "auc") {
        let a = r["estimate"].as_f64().unwrap();
        assert!((0.4..=0.6).contains(&a), "untrained {} mean AUC {a}", r["mode"]);
        assert!(r["lower"].as_f64().unwrap() <= r["upper"].as_f64().unwrap());
    }
    assert_eq!(jsonl(&out.join("scores.jsonl")).len(), 200 * 5 * 2);

    // a prompt file missing a class is rejected
    let p = t.path().join("p.txt");
    fs::write(&p, "[alpha]\npositive = alpha\nnegative = no alpha\n").unwrap();
    assert_eq!(
        code(&[
            "eval-classify", "--checkpoint", s(&f.ckpt), "--corpus", s(&f.data.join("test.jsonl")),
            "--prompts", s(&p), "--out", s(&t.path().join("x")),
        ]),
        3
    );
}

#[test]
fn error_evaluation_accounting_and_rejection() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let test = f.data.join("test.jsonl");
    let out = t.path().join("err");
    ok(&[
        "eval-errors", "--checkpoint", s(&f.ckpt), "--corpus", s(&test), "--p", "0.5",
        "--pool", s(&f.data.join("train.jsonl")), "--out", s(&out), "--n-boot", "100",
    ]);
    let acct = &jsonl(&out.join("accounting.jsonl"))[0];
    let typed: u64 = acct["by_type"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(typed + acct["clean"].as_u64().unwrap(), 200);
    assert_eq!(acct["total"], 200);
    assert!(!jsonl(&out.join("metrics.jsonl")).is_empty());

    assert_eq!(
        code(&[
            "eval-errors", "--checkpoint", s(&f.ckpt), "--corpus", s(&test), "--p", "0",
            "--out", s(&t.path().join("zero")),
        ]),
        3
    );
    assert_eq!(
        code(&["eval-errors", "--checkpoint", s(&f.ckpt), "--corpus", s(&test), "--out", s(&t.path().join("plain"))]),
        2
    );
}

#[test]
fn correction_outputs() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let small = t.path().join("small.jsonl");
    let text = fs::read_to_string(f.data.join("test.jsonl")).unwrap();
    fs::write(&small, text.lines().take(6).collect::<Vec<_>>().join("\n") + "\n").unwrap();

    let out = t.path().join("strict");
    ok(&["correct", "--checkpoint", s(&f.ckpt), "--corpus", s(&small), "--threshold", "1", "--out", s(&out)]);
    let lines = jsonl(&out.join("corrected.jsonl"));
    assert_eq!(lines.len(), 5);
    for l in &lines {
        assert_eq!(l["report"], l["corrected"]);
        assert_eq!(l["n_substitutions"], 0);
    }
    assert!(jsonl(&out.join("substitutions.jsonl")).is_empty());

    let out = t.path().join("loose");
    ok(&["correct", "--checkpoint", s(&f.ckpt), "--corpus", s(&small), "--threshold", "0", "--out", s(&out)]);
    let subs = jsonl(&out.join("substitutions.jsonl"));
    let total: u64 = jsonl(&out.join("corrected.jsonl")).iter().map(|l| l["n_substitutions"].as_u64().unwrap()).sum();
    assert_eq!(subs.len() as u64, total);
    for sub in &subs {
        for k in ["study_id", "position", "old", "new", "prob"] {
            assert!(sub.get(k).is_some(), "missing {k}");
        }
        assert_ne!(sub["old"], sub["new"]);
    }
}

#[test]
fn attention_maps_per_word() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let corpus = f.data.join("test.jsonl");
    let text = "There is large alpha in the left upper zone.";
    let out = t.path().join("maps");
    ok(&["attend", "--checkpoint", s(&f.ckpt), "--corpus", s(&corpus), "--text", text, "--out", s(&out)]);
    let q = jsonl(&out.join("quadrants.jsonl"));
    assert_eq!(q.len(), 10, "one map per word and the period");
    for l in &q {
        assert!(out.join(l["file"].as_str().unwrap()).exists());
        let m: f64 = l["mass"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
        assert!((m - 1.0).abs() < 1e-9 || l["peak"] == 0.0);
    }
    assert!(q.iter().any(|l| l["peak"].as_f64().unwrap() > 0.0));
    let png = image::open(out.join(q[0]["file"].as_str().unwrap())).unwrap();
    assert_eq!((png.width(), png.height()), (256, 256));

    let zero = t.path().join("zero");
    ok(&["attend", "--checkpoint", s(&f.ckpt), "--corpus", s(&corpus), "--text", text, "--zero-grad", "--out", s(&zero)]);
    assert!(jsonl(&zero.join("quadrants.jsonl")).iter().all(|l| l["peak"] == 0.0));
}
