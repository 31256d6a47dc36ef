use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn segmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segmix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = segmix(args);
    assert!(
        out.status.success(),
        "segmix {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small planted dataset written to `dir/data.txt`.
fn gen(dir: &Path, missing: &str) -> std::path::PathBuf {
    let data = dir.join("data.txt");
    ok(&[
        "gen", "--rows", "24", "--cols", "12", "--block-length", "4", "--types", "2", "--noise", "0.02",
        "--missing", missing, "--seed", "3", "--out", path(&data), "--truth", path(&dir.join("truth.json")),
    ]);
    data
}

const FAST: [&str; 10] = [
    "--max-card", "3", "--max-seglen", "6", "--restarts", "3", "--final-restarts", "5", "--seed", "11",
];

fn segment(data: &Path, out: &Path, threads: &str, extra: &[&str]) {
    let mut args = vec!["segment", "--input", path(data), "--out", path(out), "--threads", threads];
    args.extend(FAST);
    args.extend(extra);
    ok(&args);
}

#[test]
fn segment_is_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "0.05");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    segment(&data, &a, "1", &[]);
    segment(&data, &b, "3", &[]);
    for f in ["segmentation.json", "model.json", "scores.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let seg: serde_json::Value = serde_json::from_slice(&fs::read(a.join("segmentation.json")).unwrap()).unwrap();
    assert_eq!(seg["provenance"]["config"]["seed"], 11);
    assert_eq!(seg["provenance"]["score_kind"], "cv5");
    let run: serde_json::Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["threads"], 1);
    assert_eq!(run["scores_resumed"], 0);
}

#[test]
fn segment_resumes_from_saved_scores() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "0.0");
    let out = dir.path().join("run");
    segment(&data, &out, "1", &["--score", "bic"]);
    let first = fs::read(out.join("segmentation.json")).unwrap();
    segment(&data, &out, "1", &["--score", "bic"]);
    let run: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert!(run["scores_resumed"].as_u64().unwrap() > 0);
    assert_eq!(fs::read(out.join("segmentation.json")).unwrap(), first);
    // a different prior must not reuse the table
    segment(&data, &out, "1", &["--score", "bic", "--prior", "0.3"]);
    let run: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["scores_resumed"], 0);
}

#[test]
fn baselines_and_greedy_run() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "0.0");
    for method in ["ind", "clust", "greedy"] {
        let out = dir.path().join(method);
        segment(&data, &out, "1", &["--method", method, "--score", "bic"]);
        let model = fs::read_to_string(out.join("model.json")).unwrap();
        assert!(model.contains("\"provenance\""));
        assert_eq!(out.join("scores.tsv").exists(), method == "greedy");
    }
}

#[test]
fn impute_type_and_tags() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "0.1");
    let out = dir.path().join("run");
    segment(&data, &out, "1", &["--score", "bic"]);
    let model = out.join("model.json");

    let imp = dir.path().join("imp");
    ok(&["impute", "--model", path(&model), "--input", path(&data), "--out", path(&imp)]);
    let completed = fs::read_to_string(imp.join("completed.txt")).unwrap();
    assert!(!completed.contains('?'));
    let original = fs::read_to_string(&data).unwrap();
    for (c, o) in completed.lines().zip(original.lines()) {
        for (x, y) in c.chars().zip(o.chars()) {
            assert!(y == '?' || x == y);
        }
    }
    let tsv = fs::read_to_string(imp.join("imputed.tsv")).unwrap();
    assert!(tsv.starts_with("# {"));
    let n_missing = original.matches('?').count();
    assert_eq!(tsv.lines().count(), 2 + n_missing);
    assert_eq!(fs::read_to_string(imp.join("imputed_view.txt")).unwrap().matches('[').count(), n_missing);

    // nothing missing: output equals input
    let full = dir.path().join("full.txt");
    fs::write(&full, completed.clone()).unwrap();
    let imp2 = dir.path().join("imp2");
    ok(&["impute", "--model", path(&model), "--input", path(&full), "--out", path(&imp2)]);
    assert_eq!(fs::read_to_string(imp2.join("completed.txt")).unwrap(), completed);

    let types = dir.path().join("types.tsv");
    ok(&["type", "--model", path(&model), "--input", path(&data), "--out", path(&types)]);
    let text = fs::read_to_string(&types).unwrap();
    assert!(text.starts_with("# {"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let n_segments = m["segments"].as_array().unwrap().len();
    assert_eq!(text.lines().count(), 2 + 24 * n_segments);

    let correlated = m["segments"]
        .as_array()
        .unwrap()
        .iter()
        .position(|s| s["length"].as_u64().unwrap() >= 2 && s["cardinality"].as_u64().unwrap() >= 2);
    if let Some(k) = correlated {
        let tags = dir.path().join("tags.tsv");
        let seg = (k + 1).to_string();
        ok(&["tags", "--model", path(&model), "--segment", &seg, "--budget", "2", "--out", path(&tags)]);
        let text = fs::read_to_string(&tags).unwrap();
        assert_eq!(text.lines().count(), 4);
    }
    let bad = segmix(&["tags", "--model", path(&model), "--segment", "999", "--budget", "1", "--out", "/dev/null"]);
    assert!(!bad.status.success());
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = segmix(&["segment", "--input", path(&empty), "--out", path(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    let data = gen(dir.path(), "0.0");
    let run = dir.path().join("run");
    segment(&data, &run, "1", &["--method", "ind"]);
    let other = dir.path().join("other.txt");
    fs::write(&other, "ABABABABABAC\nABABABABABAB\n").unwrap();
    let out = segmix(&[
        "impute", "--model", path(&run.join("model.json")), "--input", path(&other), "--out",
        path(&dir.path().join("i")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn eval_protocols_write_reports() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "0.0");
    let out = dir.path().join("holdout");
    let mut args = vec![
        "eval", "--protocol", "holdout", "--input", path(&data), "--out", path(&out), "--eval-folds", "4",
        "--methods", "dp,greedy", "--score", "bic", "--threads", "1",
    ];
    args.extend(FAST);
    ok(&args);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("holdout.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["methods"][0], "ind");
    assert_eq!(report["report"]["relative_totals"][0], 0.0);
    assert!(fs::read_to_string(out.join("holdout_long.tsv")).unwrap().starts_with("# {"));

    let out = dir.path().join("missing");
    let mut args = vec![
        "eval", "--protocol", "missing", "--input", path(&data), "--out", path(&out), "--rates", "0.05,0.1",
        "--repeats", "2", "--score", "bic", "--threads", "1",
    ];
    args.extend(FAST);
    ok(&args);
    let tsv = fs::read_to_string(out.join("missing.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
}
