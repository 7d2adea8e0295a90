use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn setvqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setvqa"))
        .current_dir(dir)
        .env_remove("SETVQA_OUT_DIR")
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

/// The single stderr line of a failed run.
fn error_line(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_gen(dir: &Path, out: &str) {
    ok(&setvqa(dir, &["gen", "--seed", "7", "--samples", "60", "--feature-dim", "8", "--out", out]));
}

#[test]
fn gen_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    tiny_gen(dir.path(), "a.jsonl");
    tiny_gen(dir.path(), "b.jsonl");
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    // the default file name, the config and the manifest land next to it
    assert!(dir.path().join("gen.config.json").exists());
    assert!(dir.path().join("gen.manifest.json").exists());
}

#[test]
fn gradcheck_default_dims_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = setvqa(dir.path(), &["gradcheck"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains(" pass ")).count(), 5, "{stdout}");
    let report = read_json(&dir.path().join("gradcheck_report.json"));
    assert_eq!(report.as_object().unwrap().len(), 5);
}

#[test]
fn impossible_tolerance_fails_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let out = setvqa(dir.path(), &["gradcheck", "--mode", "baseline", "--tolerance", "1e-30"]);
    assert_eq!(code(&out), 7);
    assert_eq!(error_line(&out)["error"], "gradcheck_failed");
}

#[test]
fn smoke_gen_train_eval() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&setvqa(p, &["gen", "--samples", "80", "--out", "train.jsonl"]));
    ok(&setvqa(p, &["gen", "--seed", "1", "--samples", "40", "--out", "test.jsonl"]));
    ok(&setvqa(p, &["train", "--data", "train.jsonl", "--epochs", "1", "--out-dir", "run"]));
    let manifest = read_json(&p.join("run/train.manifest.json"));
    assert_eq!(manifest["details"]["phases"][0]["epochs"].as_array().unwrap().len(), 1);
    assert!(manifest["details"]["diverged"].is_null());

    let eval = |scrub: bool, out_dir: &str| {
        let mut args = vec!["eval", "--checkpoint", "run/checkpoint.json", "--data", "test.jsonl", "--out-dir", out_dir];
        if scrub {
            args.push("--scrub-visual");
        }
        ok(&setvqa(p, &args));
        read_json(&p.join(out_dir).join("report.json"))
    };
    let full = eval(false, "eval_full");
    let lonly = eval(true, "eval_lonly");
    assert_eq!(full["language_only"], false);
    assert_eq!(lonly["language_only"], true);
    assert_eq!(lonly["samples"], 40);
    for name in ["summary.csv", "per_qtype.csv", "per_count_answer.csv", "per_prefix.csv", "answer_distribution.csv"] {
        assert!(p.join("eval_lonly").join(name).exists(), "{name}");
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    tiny_gen(p, "d.jsonl");
    ok(&setvqa(p, &["train", "--data", "d.jsonl", "--set", "config.epochs=2", "--set", "config.hidden_dim=8", "--out-dir", "one"]));
    ok(&setvqa(p, &["train", "--config", "one/train.config.json", "--out-dir", "two"]));
    let a = std::fs::read(p.join("one/checkpoint.json")).unwrap();
    assert_eq!(a, std::fs::read(p.join("two/checkpoint.json")).unwrap());
}

#[test]
fn toml_config_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("gen.toml"), "out = \"from_file.jsonl\"\n[config]\nseed = 3\nnum_samples = 20\nfeature_dim = 8\n").unwrap();
    ok(&setvqa(p, &["gen", "--config", "gen.toml", "--set", "config.num_samples=30", "--samples", "25"]));
    let resolved = read_json(&p.join("gen.config.json"));
    assert_eq!(resolved["config"]["seed"], 3);
    assert_eq!(resolved["config"]["num_samples"], 25);
    let lines = std::fs::read_to_string(p.join("from_file.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 26); // header + samples
}

#[test]
fn out_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_setvqa"))
        .current_dir(p)
        .env("SETVQA_OUT_DIR", "envdir")
        .args(["gen", "--samples", "5", "--feature-dim", "8"])
        .output()
        .unwrap();
    ok(&out);
    assert!(p.join("envdir/dataset.jsonl").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = setvqa(dir.path(), &["gen", "--set", "config.no_such_key=1"]);
    assert_eq!(code(&out), 6);
    assert_eq!(error_line(&out)["error"], "invalid_config");
    std::fs::write(dir.path().join("bad.json"), r#"{"typo": 1}"#).unwrap();
    assert_eq!(code(&setvqa(dir.path(), &["gen", "--config", "bad.json"])), 6);
}

#[test]
fn distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // usage
    let out = setvqa(p, &["frobnicate"]);
    assert_eq!(code(&out), 2);
    assert_eq!(error_line(&out)["code"], 2);
    // missing file
    let out = setvqa(p, &["train", "--data", "nope.jsonl"]);
    assert_eq!(code(&out), 3);
    assert_eq!(error_line(&out)["error"], "missing_file");
    // schema
    std::fs::write(p.join("broken.jsonl"), "{\"format_version\": 1}\n{not json}\n").unwrap();
    let out = setvqa(p, &["train", "--data", "broken.jsonl"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    // vocabulary: a checkpoint over one feature space, data from another
    ok(&setvqa(p, &["gen", "--samples", "20", "--feature-dim", "8", "--out", "a.jsonl"]));
    ok(&setvqa(p, &["gen", "--samples", "20", "--feature-dim", "16", "--out", "b.jsonl"]));
    ok(&setvqa(p, &["train", "--data", "a.jsonl", "--epochs", "1", "--out-dir", "r"]));
    let out = setvqa(p, &["eval", "--checkpoint", "r/checkpoint.json", "--data", "b.jsonl"]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    // invalid config
    let out = setvqa(p, &["train", "--data", "a.jsonl", "--learning-rate=-1"]);
    assert_eq!(code(&out), 6);
    // diverged: the checkpoint and manifest are still written
    let out = setvqa(p, &["train", "--data", "a.jsonl", "--set", "config.optimizer=sgd", "--learning-rate", "1e300", "--out-dir", "div"]);
    assert_eq!(code(&out), 8, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!read_json(&p.join("div/train.manifest.json"))["details"]["diverged"].is_null());
    // unsupported: a language-only dataset has no image sets to train on
    let gen = setvqa::scenes::GenConfig { num_samples: 5, feature_dim: 8, ..Default::default() };
    let qa = setvqa::dataset::generate_dataset(&gen).unwrap().qa().cloned().collect();
    setvqa::dataset::Dataset::from_annotations(qa).write_jsonl(&p.join("qa_only.jsonl"), false).unwrap();
    let out = setvqa(p, &["train", "--data", "qa_only.jsonl"]);
    assert_eq!(code(&out), 9, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_line(&out)["error"], "unsupported");
    // zero threads is a usage error
    assert_eq!(code(&setvqa(p, &["gradcheck", "--threads", "0"])), 2);
}

#[test]
fn analyze_dataset_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    tiny_gen(p, "d.jsonl");
    ok(&setvqa(p, &["analyze", "--data", "d.jsonl", "--out-dir", "a1"]));
    let r = read_json(&p.join("a1/bias_report.json"));
    assert_eq!(r["samples"], 60);
    assert!(p.join("a1/answer_distribution.csv").exists());

    std::fs::write(
        p.join("ann.json"),
        r#"[{"qid": "x", "q": "is there a car in the scene?", "ans": ["yes", "yes"]},
            {"qid": 4, "q": "how many cars are there?", "ans": ["two", "two", "three"]}]"#,
    )
    .unwrap();
    let args = ["analyze", "--annotations", "ann.json", "--question-field", "q", "--answers-field", "ans", "--id-field", "qid"];
    ok(&setvqa(p, &[&args[..], &["--out-dir", "a2"]].concat()));
    let r = read_json(&p.join("a2/bias_report.json"));
    assert_eq!(r["samples"], 2);
    assert!(!r["warnings"].as_array().unwrap().is_empty());

    let out = setvqa(p, &["analyze", "--data", "d.jsonl", "--annotations", "ann.json"]);
    assert_eq!(code(&out), 2);
}
