use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11

[model]
hidden = 8

[train]
total_steps = 30
warmup_steps = 3
batch_size = 8
lr = 0.01
eval_every = 10

[loss]
lambda_q = 0.001
lambda_d = 0.001

[synth]
clusters = 2
words_per_cluster = 60
shared_words = 20
whole_word_pieces = 10
cluster_word_pieces = 10
topics_per_cluster = 4
docs = 150
train_queries = 60
eval_queries = 12
"#;

fn lsrlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsrlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = lsrlab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

/// synth -> build-vocab -> init-emlm -> finetune -> encode -> index.
fn pipeline() -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    fs::write(dir.join("exp.toml"), CONFIG).unwrap();
    fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
        [&["--config", "exp.toml"][..], rest].concat()
    }
    ok(&dir, &with(&["synth", "--out-dir", "data"]));
    ok(&dir, &with(&["build-vocab", "--subvocab", "data/subvocab.tsv", "--corpus", "data/titles.txt", "--size", "300", "--out", "u.tsv"]));
    ok(&dir, &with(&["init-emlm", "--subvocab", "data/subvocab.tsv", "--uvocab", "u.tsv", "--out", "init.ckpt"]));
    ok(
        &dir,
        &with(&[
            "finetune", "--init", "init.ckpt", "--subvocab", "data/subvocab.tsv", "--uvocab", "u.tsv", "--train",
            "data/train.jsonl", "--out", "ft.ckpt", "--log", "ft.log", "--valid-queries", "data/queries.jsonl",
            "--valid-docs", "data/docs.jsonl", "--best-out", "best.ckpt", "--eval-log", "ft.eval.log",
        ]),
    );
    for (input, out) in [("data/docs.jsonl", "docs.vec"), ("data/queries.jsonl", "queries.vec")] {
        ok(
            &dir,
            &with(&["encode", "--model", "ft.ckpt", "--subvocab", "data/subvocab.tsv", "--uvocab", "u.tsv", "--input", input, "--out", out]),
        );
    }
    ok(&dir, &with(&["index", "--vectors", "docs.vec", "--dk", "10", "--uvocab", "u.tsv", "--out", "docs.idx"]));
    Pipeline { _tmp: tmp, dir }
}

#[test]
fn end_to_end_pipeline() {
    let p = pipeline();
    let dir = &p.dir;
    for f in ["data/train.jsonl", "u.tsv", "init.ckpt", "ft.ckpt", "best.ckpt", "docs.vec", "docs.idx"] {
        assert!(dir.join(f).exists(), "{f} missing");
        assert!(dir.join(format!("{f}.manifest.json")).exists(), "{f} manifest missing");
    }
    let log = fs::read_to_string(dir.join("ft.log")).unwrap();
    assert_eq!(log.lines().count(), 30);
    assert_eq!(fs::read_to_string(dir.join("ft.eval.log")).unwrap().lines().count(), 3);

    ok(dir, &["search", "--index", "docs.idx", "--queries", "queries.vec", "--qk", "5", "--k", "5", "--out", "run.tsv"]);
    let run = fs::read_to_string(dir.join("run.tsv")).unwrap();
    let first: Vec<&str> = run.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 4);
    assert!(first[2].starts_with('d'));

    let out = ok(dir, &["flops", "--index", "docs.idx", "--queries", "queries.vec", "--qk", "5"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["qk"], 5);
    assert_eq!(report["dk"], 10);
    assert!(report["flops"].as_f64().unwrap() >= 0.0);

    ok(
        dir,
        &[
            "--config", "exp.toml", "eval", "--model", "ft.ckpt", "--subvocab", "data/subvocab.tsv", "--uvocab", "u.tsv",
            "--queries", "data/queries.jsonl", "--docs", "data/docs.jsonl", "--out", "report.json",
        ],
    );
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let cells: Vec<(u64, u64)> = rows.iter().map(|r| (r["qk"].as_u64().unwrap(), r["dk"].as_u64().unwrap())).collect();
    assert_eq!(cells, vec![(0, 0), (5, 10), (5, 20)]);
    for r in &rows {
        for col in ["l0_q", "l0_d", "flops", "mrr_at_10", "r_at_10", "r_at_100"] {
            assert!(r[col].is_number(), "{col}");
        }
    }

    ok(dir, &["eval", "--bm25", "--queries", "data/queries.jsonl", "--docs", "data/docs.jsonl", "--out", "bm25.json"]);
    let bm25: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(dir.join("bm25.json")).unwrap()).unwrap();
    assert!(bm25[0]["r_at_10"].as_f64().unwrap() > 0.0);
}

#[test]
fn artifacts_reproduce_byte_exactly() {
    let p = pipeline();
    let dir = &p.dir;
    let c = ["--config", "exp.toml"];
    ok(dir, &[&c[..], &["synth", "--out-dir", "again"]].concat());
    for f in ["train.jsonl", "docs.jsonl", "queries.jsonl", "subvocab.tsv"] {
        assert_eq!(fs::read(dir.join("data").join(f)).unwrap(), fs::read(dir.join("again").join(f)).unwrap(), "{f}");
    }
    ok(
        dir,
        &[
            &c[..],
            &[
                "finetune", "--init", "init.ckpt", "--subvocab", "data/subvocab.tsv", "--uvocab", "u.tsv", "--train",
                "data/train.jsonl", "--out", "ft2.ckpt", "--log", "ft2.log",
            ],
        ]
        .concat(),
    );
    assert_eq!(fs::read(dir.join("ft.ckpt")).unwrap(), fs::read(dir.join("ft2.ckpt")).unwrap());
    assert_eq!(fs::read(dir.join("ft.log")).unwrap(), fs::read(dir.join("ft2.log")).unwrap());

    for threads in ["1", "3"] {
        let out = format!("t{threads}.idx");
        ok(dir, &["--threads", threads, "index", "--vectors", "docs.vec", "--dk", "10", "--uvocab", "u.tsv", "--out", &out]);
    }
    let one = fs::read(dir.join("t1.idx")).unwrap();
    assert_eq!(one, fs::read(dir.join("t3.idx")).unwrap());
    assert_eq!(one, fs::read(dir.join("docs.idx")).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("t1.idx.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "index");
    assert_eq!(manifest["config"]["args"]["dk"], 10);
    assert!(manifest["inputs"]["docs.vec"].is_string());
}

#[test]
fn missing_input_fails_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lsrlab(tmp.path(), &["index", "--vectors", "nope.vec", "--out", "x.idx"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn malformed_vectors_report_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("v.vec"), "d1\t1:0.5\nd2\t3:abc\n").unwrap();
    let out = lsrlab(tmp.path(), &["index", "--vectors", "v.vec", "--out", "x.idx"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(!tmp.path().join("x.idx").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lsrlab(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(lsrlab(tmp.path(), &["index", "--bogus"]).status.code(), Some(1));
    let help = lsrlab(tmp.path(), &["search", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--qk"));
    // randomness without a seed
    let out = lsrlab(tmp.path(), &["synth", "--out-dir", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn vocab_mismatch_is_data_error() {
    let p = pipeline();
    let dir = &p.dir;
    ok(dir, &["build-vocab", "--subvocab", "data/subvocab.tsv", "--corpus", "data/titles.txt", "--size", "100", "--out", "small.tsv"]);
    let out = lsrlab(
        dir,
        &["encode", "--model", "ft.ckpt", "--subvocab", "data/subvocab.tsv", "--uvocab", "small.tsv", "--input", "data/docs.jsonl", "--out", "bad.vec"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
    assert!(!dir.join("bad.vec").exists());
}

#[test]
fn divergence_exits_three() {
    let p = pipeline();
    let dir = &p.dir;
    let out = lsrlab(
        dir,
        &[
            "--config", "exp.toml", "--set", "train.lr=1e300", "--set", "train.weight_decay=0", "finetune", "--init", "init.ckpt",
            "--subvocab", "data/subvocab.tsv", "--uvocab", "u.tsv", "--train", "data/train.jsonl", "--out", "div.ckpt", "--log", "div.log",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.join("div.ckpt").exists());
}
