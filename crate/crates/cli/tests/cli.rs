use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eas"))
        .args(args)
        .env_remove("EAS_ENDPOINT_URL")
        .env_remove("EAS_API_KEY")
        .output()
        .expect("run eas")
}

fn ok(args: &[&str]) -> String {
    let out = eas(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    eas(args).status.code().expect("exit code")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn synth_small(dir: &Path) -> String {
    let corpus = p(dir, "corpus.jsonl");
    ok(&["synth", "--out", &corpus, "--samples-per-archetype", "4", "--seed", "5", "--min-length", "10", "--max-length", "14"]);
    corpus
}

#[test]
fn full_pipeline_with_synthetic_backend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = synth_small(d);
    let traces = p(d, "traces.jsonl");
    let out = ok(&["harvest", "--backend", "synthetic", "--corpus", &corpus, "--traces", &traces, "--max-in-flight", "3"]);
    let written: usize = out.split_whitespace().next().unwrap().parse().unwrap();
    assert_eq!(written, fs::read_to_string(&traces).unwrap().lines().count());
    let out = ok(&["harvest", "--backend", "synthetic", "--corpus", &corpus, "--traces", &traces]);
    assert_eq!(out.trim(), format!("0 records written, {written} already present"));

    let scores = p(d, "scores.jsonl");
    let summary = p(d, "truncation.json");
    let score_args = ["score", "--traces", &traces, "--corpus", &corpus, "--scores", &scores, "--summary", &summary];
    ok(&score_args);
    let first = fs::read(&scores).unwrap();
    ok(&score_args);
    assert_eq!(first, fs::read(&scores).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 4);

    let report = p(d, "correlation.json");
    let out = ok(&["correlate", "--scores", &scores, "--corpus", &corpus, "--report", &report, "--scatter", &p(d, "scatter.csv")]);
    assert!(out.lines().next().unwrap().starts_with("eas\tr="), "{out}");
    assert!(fs::read_to_string(p(d, "scatter.csv")).unwrap().starts_with("metric,sample_id,value"));

    let out = ok(&[
        "trajectory", "--traces", &traces, "--corpus", &corpus, "--out-dir", &p(d, "curves"), "--summary", &p(d, "traj.jsonl"),
    ]);
    assert_eq!(out.trim(), "12 curve tables");
    assert_eq!(fs::read_dir(d.join("curves")).unwrap().count(), 12);

    for strategy in ["random", "length", "pass_rate", "eas"] {
        let manifest = p(d, &format!("{strategy}.json"));
        let out = ok(&["select", "--scores", &scores, "--manifest", &manifest, "--strategy", strategy, "--budget", "5", "--seed", "3"]);
        assert!(out.contains(&format!("\"strategy\":\"{strategy}\"")), "{out}");
    }
}

#[test]
fn empty_trace_source_scores_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = eas(&["score", "--traces", &p(d, "none.jsonl"), "--scores", &p(d, "s.jsonl")]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no trace records"));
    assert_eq!(fs::read_to_string(p(d, "s.jsonl")).unwrap(), "");
}

#[test]
fn unreachable_backend_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = synth_small(d);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/v1");
    let c = code(&[
        "harvest", "--corpus", &corpus, "--traces", &p(d, "t.jsonl"), "--endpoint-url", &url, "--max-attempts", "1",
    ]);
    assert_eq!(c, 2);
}

#[test]
fn malformed_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.jsonl"), "{\"sample_id\": 1}\n").unwrap();
    let c = code(&["harvest", "--backend", "synthetic", "--corpus", &p(d, "bad.jsonl"), "--traces", &p(d, "t.jsonl")]);
    assert_eq!(c, 3);
}

#[test]
fn duplicate_sample_ids_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let line = "{\"sample_id\":\"a\",\"generated_text\":\"x \\\\boxed{1}\",\"answer_text\":\"1\"}\n";
    fs::write(d.join("dup.jsonl"), format!("{line}{line}")).unwrap();
    let c = code(&["harvest", "--backend", "synthetic", "--corpus", &p(d, "dup.jsonl"), "--traces", &p(d, "t.jsonl")]);
    assert_eq!(c, 3);
}

#[test]
fn too_few_joined_points_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = synth_small(d);
    fs::write(d.join("scores.jsonl"), "{\"sample_id\":\"early_lockin-0000\",\"eas\":3.0}\n").unwrap();
    let c = code(&["correlate", "--scores", &p(d, "scores.jsonl"), "--corpus", &corpus, "--report", &p(d, "r.json")]);
    assert_eq!(c, 4);
}

#[test]
fn missing_strategy_inputs_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("scores.jsonl"), "{\"sample_id\":\"a\"}\n{\"sample_id\":\"b\"}\n").unwrap();
    for strategy in ["eas", "pass_rate", "length"] {
        let c = code(&["select", "--scores", &p(d, "scores.jsonl"), "--manifest", &p(d, "m.json"), "--strategy", strategy]);
        assert_eq!(c, 5, "{strategy}");
    }
}

#[test]
fn reused_path_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = p(dir.path(), "x.jsonl");
    assert_eq!(code(&["select", "--scores", &s, "--manifest", &s, "--strategy", "random"]), 3);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = p(d, "a.jsonl");
    let b = p(d, "b.jsonl");
    ok(&["synth", "--out", &a, "--seed", "11"]);
    ok(&["synth", "--out", &b, "--seed", "11"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 60);
}
