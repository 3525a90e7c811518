//! End-to-end pipeline exercises of the `grouprl` binary itself:
//! synth → label → train → eval → report as real subprocesses, plus the
//! documented exit-code and error-reporting contract.
//!
//! Each stage runs in its own process, so the in-process instrumentation
//! counters of the test harness are never touched and no serialization
//! with other tests is needed.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grouprl"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn grouprl");
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Exactly one machine-readable JSON object on stderr, per the CLI's error
/// contract. Returns the parsed object.
fn single_json_error(out: &Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1), "expected exit 1");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "expected one stderr line, got: {stderr}");
    serde_json::from_str(lines[0]).expect("stderr line is JSON")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn exists(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(name);
    assert!(p.exists(), "missing artifact {}", p.display());
    p
}

#[test]
fn full_pipeline_synth_label_train_eval_report() {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| {
        let d = root.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d
    };
    let (synth, label, train, eval, report) =
        (dir("synth"), dir("label"), dir("train"), dir("eval"), dir("report"));

    // --- synth: config file fixes the shape, --seed overrides the seed.
    let synth_cfg = root.path().join("synth.cfg");
    write(
        &synth_cfg,
        "# synthetic corpus shape\n\
         problems = 6\n\
         solutions_per_problem = 8\n",
    );
    let out = run_ok(bin()
        .args(["synth", "--seed", "5"])
        .arg("--config")
        .arg(&synth_cfg)
        .arg("--out")
        .arg(&synth));
    assert!(stdout_of(&out).contains("[synth] wrote 6 problems"));
    let raw_corpus = exists(&synth, "corpus.jsonl");

    // Same seed, fresh process → byte-identical corpus.
    let synth2 = dir("synth2");
    run_ok(bin()
        .args(["synth", "--seed", "5"])
        .arg("--config")
        .arg(&synth_cfg)
        .arg("--out")
        .arg(&synth2));
    assert_eq!(
        std::fs::read(&raw_corpus).unwrap(),
        std::fs::read(synth2.join("corpus.jsonl")).unwrap(),
        "synth is not deterministic across processes"
    );

    // --- label: run every program, record verdicts.
    let out = run_ok(bin()
        .args(["label", "--workers", "4", "--wall-time-ms", "2000"])
        .arg("--corpus")
        .arg(&raw_corpus)
        .arg("--out")
        .arg(&label));
    assert!(stdout_of(&out).contains("[label]"));
    let labeled_corpus = exists(&label, "corpus.labeled.jsonl");
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(exists(&label, "label_stats.json")).unwrap())
            .unwrap();
    // The default synthetic mix has 4 accepted and 1 of each failure per
    // problem; 6 problems scale that to 24/6/6/6/6.
    assert_eq!(stats["accepted"], 24);
    assert_eq!(stats["wrong_answer"], 6);
    assert_eq!(stats["compile_error"], 6);

    // Re-labeling a fully labeled corpus without --force is a cheap no-op.
    let out = run_ok(bin()
        .arg("label")
        .arg("--corpus")
        .arg(&labeled_corpus)
        .arg("--out")
        .arg(&label));
    assert!(stdout_of(&out).contains("nothing to do"));

    // --- train: config file sets the tiny architecture, flags override steps.
    let train_cfg = root.path().join("train.cfg");
    write(
        &train_cfg,
        "advantage_mode = grpo\n\
         holdout_problems = 0\n\
         arch.embed_dim = 32\n\
         arch.layers = 1\n\
         arch.heads = 2\n\
         arch.context = 128\n\
         sampler.group_size = 4\n\
         sampler.batch_solutions = 8\n",
    );
    let out = run_ok(bin()
        .args(["train", "--steps", "3", "--no-eval", "--seed", "9"])
        .arg("--config")
        .arg(&train_cfg)
        .arg("--corpus")
        .arg(&labeled_corpus)
        .arg("--out")
        .arg(&train));
    assert!(stdout_of(&out).contains("[train] 3 steps done"));
    exists(&train, "checkpoint_init.ckpt");
    let final_ckpt = exists(&train, "checkpoint_final.ckpt");
    let metrics = std::fs::read_to_string(exists(&train, "metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "one metrics line per step");
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].is_f64() || v["loss"].is_i64(), "metrics line: {line}");
    }
    assert!(
        !train.join("eval_history.jsonl").exists(),
        "holdout_problems = 0 must not produce an eval history"
    );

    // --- eval: sample from the final checkpoint and verify the samples.
    let eval_cfg = root.path().join("eval.cfg");
    write(
        &eval_cfg,
        "k_values = 1, 2\n\
         max_new_tokens = 40\n\
         wall_time_ms = 2000\n",
    );
    let out = run_ok(bin()
        .args(["eval", "--samples-per-problem", "2", "--temperature", "0.5", "--seed", "3"])
        .arg("--config")
        .arg(&eval_cfg)
        .arg("--checkpoint")
        .arg(&final_ckpt)
        .arg("--corpus")
        .arg(&raw_corpus)
        .arg("--out")
        .arg(&eval));
    assert!(stdout_of(&out).contains("[eval] 6 problems"));
    let report_json = exists(&eval, "eval_report.json");
    exists(&eval, "eval_table.txt");
    exists(&eval, "pass_at_k.svg");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_json).unwrap()).unwrap();
    let p1 = parsed["pass_at_k"]["1"].as_f64().unwrap();
    let p2 = parsed["pass_at_k"]["2"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p1) && (0.0..=1.0).contains(&p2));
    assert!(p2 >= p1, "pass@k must be monotone in k");

    // --- report: merge the eval report into a comparison table.
    let out = run_ok(bin().arg("report").arg(&report_json).arg("--out").arg(&report));
    assert!(stdout_of(&out).contains("[report] merged 1 runs"));
    exists(&report, "report.json");
    let table = std::fs::read_to_string(exists(&report, "report.txt")).unwrap();
    assert!(table.contains("eval"), "row is named after the report's directory:\n{table}");
    assert!(table.contains("all@1"), "table header lists pass@k columns:\n{table}");
}

#[test]
fn train_holdout_eval_history_feeds_report_plot() {
    let root = tempfile::tempdir().unwrap();
    let synth = root.path().join("synth");
    let label = root.path().join("label");
    let train = root.path().join("train");
    let report = root.path().join("report");

    run_ok(bin()
        .args(["synth", "--problems", "4", "--solutions-per-problem", "8", "--seed", "21"])
        .arg("--out")
        .arg(&synth));
    run_ok(bin()
        .args(["label", "--workers", "4", "--wall-time-ms", "2000"])
        .arg("--corpus")
        .arg(synth.join("corpus.jsonl"))
        .arg("--out")
        .arg(&label));

    // Two of four problems held out; eval every step over two steps.
    let cfg = root.path().join("train.cfg");
    write(
        &cfg,
        "steps = 2\n\
         holdout_problems = 2\n\
         eval_every = 1\n\
         wall_time_ms = 2000\n\
         arch.embed_dim = 32\n\
         arch.layers = 1\n\
         arch.heads = 2\n\
         arch.context = 128\n\
         sampler.group_size = 4\n\
         sampler.batch_solutions = 4\n\
         eval.samples_per_problem = 2\n\
         eval.k_values = 1\n\
         eval.max_new_tokens = 30\n",
    );
    run_ok(bin()
        .args(["train", "--seed", "4"])
        .arg("--config")
        .arg(&cfg)
        .arg("--corpus")
        .arg(label.join("corpus.labeled.jsonl"))
        .arg("--out")
        .arg(&train));
    let history = train.join("eval_history.jsonl");
    assert!(history.exists(), "holdout training must write an eval history");
    let lines = std::fs::read_to_string(&history).unwrap();
    assert!(lines.lines().count() >= 2, "eval_every = 1 over 2 steps:\n{lines}");

    let out = run_ok(bin()
        .arg("report")
        .arg("--history")
        .arg(&history)
        .arg("--out")
        .arg(&report));
    assert!(stdout_of(&out).contains("history plot"));
    let svg = std::fs::read_to_string(report.join("pass_at_k_history.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.contains("<svg"), "not an SVG: {}", &svg[..60.min(svg.len())]);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_reports_path_in_json_error() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("no_such.cfg");
    let out = bin()
        .arg("synth")
        .arg("--config")
        .arg(&missing)
        .arg("--out")
        .arg(root.path().join("out"))
        .output()
        .unwrap();
    let err = single_json_error(&out);
    assert_eq!(err["error"], "config");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("no_such.cfg"), "message must name the file: {msg}");
}

#[test]
fn missing_out_dir_is_a_config_error() {
    let out = bin().arg("synth").output().unwrap();
    let err = single_json_error(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("--out"));
}

#[test]
fn foreign_stage_keys_are_rejected_loudly() {
    // `steps` belongs to the train stage; synth must refuse it rather than
    // silently ignore a typo'd or misplaced setting.
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("synth.cfg");
    write(&cfg, "problems = 2\nsteps = 5\n");
    let out = bin()
        .arg("synth")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(root.path().join("out"))
        .output()
        .unwrap();
    let err = single_json_error(&out);
    assert_eq!(err["error"], "config");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("unknown config keys") && msg.contains("steps"), "{msg}");
}

#[test]
fn interpreter_env_override_failure_is_an_environment_error() {
    let root = tempfile::tempdir().unwrap();
    let synth = root.path().join("synth");
    run_ok(bin()
        .args(["synth", "--problems", "1", "--solutions-per-problem", "8", "--seed", "2"])
        .arg("--out")
        .arg(&synth));
    let out = bin()
        .arg("label")
        .arg("--corpus")
        .arg(synth.join("corpus.jsonl"))
        .arg("--out")
        .arg(root.path().join("label"))
        .env("GROUPRL_INTERPRETER", "/definitely/not/an/interpreter {source}")
        .output()
        .unwrap();
    let err = single_json_error(&out);
    assert_eq!(err["error"], "environment");
}
