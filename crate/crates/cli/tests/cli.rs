use std::path::Path;
use std::process::{Command, Output};

fn amoe(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amoe"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn amoe")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

const TINY_SYNTH: &[&str] = &[
    "gen-synth",
    "--classes",
    "2",
    "--train-per-class",
    "12",
    "--test-per-class",
    "8",
    "--grid",
    "6",
    "--dim",
    "8",
];

const TINY_TRAIN: &[&str] = &[
    "--iterations",
    "3",
    "--batch-size",
    "4",
    "--experts-per-group",
    "1",
    "--top-k",
    "2",
    "--kb-clusters",
    "3",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

#[test]
fn gen_train_eval_pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&amoe(out, TINY_SYNTH));
    assert!(out.join("data/manifest.json").is_file());
    ok(&amoe(out, &with(&["train"], TINY_TRAIN)));
    assert!(out.join("checkpoint.amoc").is_file());
    assert!(out.join("config.resolved.toml").is_file());
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let eval = amoe(out, &["eval"]);
    ok(&eval);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["classes"].as_array().unwrap().len(), 2);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("mean"));
    assert!(out.join("report.txt").is_file());
    let snap = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(snap.contains("iterations = 3"), "eval snapshot lost the trained config");

    ok(&amoe(out, &["infer", "--pgm", "--class", "class0"]));
    let scores = std::fs::read_to_string(out.join("scores.jsonl")).unwrap();
    assert_eq!(scores.lines().count(), 8);
    let pgm = std::fs::read_dir(out.join("maps/class0")).unwrap().count();
    assert!(pgm >= 8);
}

#[test]
fn resumed_training_continues_the_metric_stream() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&amoe(out, TINY_SYNTH));
    ok(&amoe(out, &with(&["train"], TINY_TRAIN)));
    let ckpt = out.join("checkpoint.amoc");
    let ckpt = ckpt.to_str().unwrap();
    let mut args = with(&["train"], TINY_TRAIN);
    args[2] = "5";
    args.extend(["--resume", ckpt]);
    ok(&amoe(out, &args));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let its: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iteration"].as_u64().unwrap())
        .collect();
    assert_eq!(its, vec![0, 1, 2, 3, 4]);
}

#[test]
fn snapshot_replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&amoe(&a, TINY_SYNTH));
    let manifest = a.join("data/manifest.json");
    ok(&amoe(&a, &with(&["train", "--manifest", manifest.to_str().unwrap()], TINY_TRAIN)));
    let snapshot = a.join("config.resolved.toml");
    ok(&amoe(&b, &["train", "--config", snapshot.to_str().unwrap()]));
    for f in ["metrics.jsonl", "checkpoint.amoc", "config.resolved.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn gradcheck_passes_and_forced_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let pass = amoe(dir.path(), &["gradcheck"]);
    ok(&pass);
    assert!(String::from_utf8_lossy(&pass.stdout).contains("PASS"));
    assert!(dir.path().join("gradcheck.json").is_file());

    let fail = amoe(dir.path(), &["gradcheck", "--tolerance", "0"]);
    assert_eq!(fail.status.code(), Some(3));
    assert_eq!(error_line(&fail)["error"], "gradcheck");
}

#[test]
fn sweep_over_top_k_gives_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&amoe(out, TINY_SYNTH));
    let mut args = with(&["sweep", "--grid-top-k", "1,2,3"], TINY_TRAIN);
    let k = args.iter().position(|a| *a == "--top-k").unwrap();
    args.drain(k..k + 2);
    ok(&amoe(out, &args));
    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "top_k").unwrap();
    let ks: Vec<String> = rdr.records().map(|r| r.unwrap()[col].to_string()).collect();
    assert_eq!(ks, vec!["1", "2", "3"]);
    for i in 0..3 {
        assert!(out.join(format!("cells/{i:03}/report.json")).is_file());
    }
}

#[test]
fn config_errors_exit_2_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let bad = out.join("bad.toml");
    std::fs::write(&bad, "[train]\nno_such_key = 1\n").unwrap();
    let o = amoe(out, &["gradcheck", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("no_such_key"));

    let o = amoe(out, &["train", "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(o.status.code(), Some(2));
    error_line(&o);

    let o = amoe(out, &["train", "--manifest", "x.json", "--top-k", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let o = amoe(out, &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    error_line(&o);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_amoe"))
        .args(["gradcheck", "--set", "gradcheck.dim=4"])
        .env("AMOE_OUT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&o);
    let snap = std::fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap();
    assert!(snap.contains("dim = 4"));
}
