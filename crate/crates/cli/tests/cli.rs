use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ocor::corpus::{synthetic, write_corpus, RawPair};
use ocor::numerics::Checkpoint;
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--layers",
    "1",
    "--d-model",
    "16",
    "--heads",
    "2",
    "--conv-first",
    "16",
    "--mlp-hidden",
    "16",
];

fn ocor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocor"))
        .current_dir(dir)
        .args(args)
        .env_remove("OCOR_CONFIG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ocor(dir, args);
    assert!(
        out.status.success(),
        "ocor {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_corpus(pairs: &[RawPair]) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_corpus(&path, pairs).unwrap();
    (dir, path)
}

fn three_pairs() -> Vec<RawPair> {
    [
        ("a", "how to read a csv file", "df = pandas.read_csv(path)"),
        ("b", "sort a list in reverse", "items.sort(reverse=True)"),
        ("c", "count words in a string", "len(text.split())"),
    ]
    .into_iter()
    .map(|(id, q, c)| RawPair {
        id: id.into(),
        question: q.into(),
        code: c.into(),
    })
    .collect()
}

/// Trains a one-epoch model in `dir/out` and returns the checkpoint path.
fn trained(dir: &Path) -> PathBuf {
    let mut args = vec![
        "train",
        "--corpus",
        "corpus.jsonl",
        "--out-dir",
        "out",
        "--epochs",
        "1",
        "--negatives",
        "3",
    ];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
    dir.join("out/model.ckpt")
}

#[test]
fn preprocess_reports_statistics_and_is_repeatable() {
    let (dir, _) = with_corpus(&three_pairs());
    let d = dir.path();
    let stats = ok(
        d,
        &[
            "preprocess",
            "--corpus",
            "corpus.jsonl",
            "--out",
            "t1.jsonl",
        ],
    );
    assert!(
        stats.starts_with("statistic\tvalue\nQC-pairs\t3\n"),
        "{stats}"
    );
    ok(
        d,
        &[
            "preprocess",
            "--corpus",
            "corpus.jsonl",
            "--out",
            "t2.jsonl",
        ],
    );
    let t1 = fs::read(d.join("t1.jsonl")).unwrap();
    assert_eq!(t1, fs::read(d.join("t2.jsonl")).unwrap());
    let first: serde_json::Value =
        serde_json::from_slice(t1.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(first["id"], "a");
    assert!(first["code_tokens"]
        .as_array()
        .unwrap()
        .iter()
        .any(|t| t == "read_csv"));
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = ocor(
        dir.path(),
        &["preprocess", "--corpus", "nope.jsonl", "--out", "t.jsonl"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.jsonl"), "{err}");
    assert_eq!(err.matches("No such file").count(), 1, "{err}");
}

#[test]
fn dry_run_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ok(dir.path(), &["train", "--dry-run"]);
    for line in [
        "layers = 3",
        "d_model = 256",
        "heads = 8",
        "learning_rate = 0.0001",
        "dropout = 0.2",
        "negatives = 5",
        "lambda = 0.1",
    ] {
        assert!(cfg.lines().any(|l| l == line), "missing `{line}` in\n{cfg}");
    }
}

#[test]
fn flags_override_the_config_file_and_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.conf"), "epochs = 7\nlayers = 2\n").unwrap();
    let cfg = ok(
        d,
        &[
            "--config",
            "run.conf",
            "train",
            "--dry-run",
            "--epochs",
            "3",
        ],
    );
    assert!(cfg.lines().any(|l| l == "epochs = 3"), "{cfg}");
    assert!(cfg.lines().any(|l| l == "layers = 2"), "{cfg}");

    let out = Command::new(env!("CARGO_BIN_EXE_ocor"))
        .current_dir(d)
        .args(["train", "--dry-run"])
        .env("OCOR_CONFIG", "run.conf")
        .output()
        .unwrap();
    let cfg = String::from_utf8(out.stdout).unwrap();
    assert!(cfg.lines().any(|l| l == "epochs = 7"), "{cfg}");

    fs::write(d.join("bad.conf"), "epochz = 7\n").unwrap();
    let out = ocor(d, &["--config", "bad.conf", "train", "--dry-run"]);
    assert!(!out.status.success());
}

#[test]
fn zero_epochs_saves_the_initial_model_with_its_seed() {
    let (dir, _) = with_corpus(&synthetic::pairs(8, 1));
    let d = dir.path();
    let mut args = vec![
        "train",
        "--corpus",
        "corpus.jsonl",
        "--out-dir",
        "out",
        "--epochs",
        "0",
        "--seed",
        "9",
    ];
    args.extend_from_slice(SMALL);
    ok(d, &args);
    let ckpt = Checkpoint::load(&d.join("out/model.ckpt")).unwrap();
    assert_eq!(ckpt.step_count, 0);
    assert!(ckpt.config_text.lines().any(|l| l == "seed = 9"));
    let desc = ok(d, &["describe", "--checkpoint", "out/model.ckpt"]);
    let fresh = {
        let mut a = vec!["describe"];
        a.extend_from_slice(SMALL);
        ok(d, &a)
    };
    assert_eq!(desc, fresh);
    assert!(desc.lines().last().unwrap().starts_with("total\t"));
}

#[test]
fn eval_with_and_without_score_files() {
    let pairs = synthetic::pairs(12, 2);
    let (dir, _) = with_corpus(&pairs);
    let d = dir.path();
    ok(
        d,
        &[
            "preprocess",
            "--corpus",
            "corpus.jsonl",
            "--out",
            "t.jsonl",
            "--cases-out",
            "cases.jsonl",
            "--negatives",
            "4",
        ],
    );
    trained(d);
    let base = [
        "eval",
        "--checkpoint",
        "out/model.ckpt",
        "--corpus",
        "corpus.jsonl",
        "--cases",
        "cases.jsonl",
    ];

    let plain = ok(d, &base);
    let lines: Vec<&str> = plain.lines().collect();
    assert_eq!(lines[0], "model\tMRR");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("ocor\t"));

    // An oracle score file that ranks every positive first, and one that
    // ranks it last.
    let specs: Vec<serde_json::Value> = fs::read_to_string(d.join("cases.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut good = String::new();
    let mut bad = String::new();
    for s in &specs {
        let pos = s["positive_index"].as_u64().unwrap() as usize;
        for (i, cid) in s["candidate_ids"].as_array().unwrap().iter().enumerate() {
            let hit = if i == pos { 0.9 } else { 0.1 };
            let rec = |v: f64| {
                format!(
                    "{{\"case_id\":{},\"candidate_id\":{cid},\"score\":{v}}}\n",
                    s["query_id"]
                )
            };
            good += &rec(hit);
            bad += &rec(1.0 - hit);
        }
    }
    fs::write(d.join("oracle.jsonl"), good).unwrap();
    fs::write(d.join("worst.jsonl"), bad).unwrap();

    let mut args = base.to_vec();
    args.extend([
        "--scores",
        "oracle.jsonl",
        "--lambda",
        "0",
        "--out",
        "res.json",
    ]);
    let mixed = ok(d, &args);
    assert!(mixed.contains("\noracle\t1.0000\n"), "{mixed}");
    assert!(mixed.contains("\nocor+oracle\t1.0000\n"), "{mixed}");
    let res: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("res.json")).unwrap()).unwrap();
    assert_eq!(res["lambda"], 0.0);
    assert_eq!(res["seed"], 0);

    let mut args = base.to_vec();
    args.extend([
        "--scores",
        "oracle.jsonl",
        "--scores",
        "worst.jsonl",
        "--perfect-sets",
        "sets.json",
    ]);
    let report = ok(d, &args);
    assert!(report.contains("perfect\toracle\t12\n"), "{report}");
    assert!(report.contains("perfect\tworst\t0\n"), "{report}");
    assert!(report.contains("perfect\toracle&worst\t0\n"), "{report}");
    assert!(d.join("sets.json").exists());
}

#[test]
fn retrieve_ranks_candidates() {
    let (dir, _) = with_corpus(&synthetic::pairs(8, 4));
    let d = dir.path();
    trained(d);
    fs::write(
        d.join("cands.jsonl"),
        "{\"id\":\"x\",\"code\":\"SELECT name FROM users\"}\n{\"id\":\"y\",\"code\":\"DELETE FROM orders\"}\n{\"id\":\"z\",\"code\":\"SELECT COUNT(*) FROM invoice\"}\n",
    )
    .unwrap();
    let args = [
        "retrieve",
        "--checkpoint",
        "out/model.ckpt",
        "--query",
        "names of users",
        "--candidates",
        "cands.jsonl",
    ];
    let all = ok(d, &args);
    assert_eq!(all, ok(d, &args));
    let rows: Vec<Vec<&str>> = all.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    let scores: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let mut top = args.to_vec();
    top.extend(["--top-k", "1"]);
    let best = ok(d, &top);
    assert_eq!(best.lines().count(), 1);
    assert_eq!(best.lines().next(), all.lines().next());

    fs::write(d.join("empty.jsonl"), "").unwrap();
    let out = ocor(
        d,
        &[
            "retrieve",
            "--checkpoint",
            "out/model.ckpt",
            "--query",
            "q",
            "--candidates",
            "empty.jsonl",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn overlap_prints_a_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let plain = ok(
        dir.path(),
        &["overlap", "--query", "read csv", "--code", "read_csv(path)"],
    );
    let rows: Vec<&str> = plain.lines().collect();
    assert_eq!(rows.len(), 2);
    let labelled = ok(
        dir.path(),
        &[
            "overlap",
            "--query",
            "read csv",
            "--code",
            "read_csv(path)",
            "--labels",
        ],
    );
    let lines: Vec<&str> = labelled.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("read\t"));
    let bad = ocor(
        dir.path(),
        &["overlap", "--query", "a", "--code", "b", "--metric", "nope"],
    );
    assert!(!bad.status.success());
}
