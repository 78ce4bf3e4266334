//! End-to-end checks of the hashkit binary: exit codes, artifact layout,
//! determinism, and agreement with the library on retrieval output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hashkit::retrieval::{load_db, save_db, RetrievalDatabase};
use hashkit::types::{HashCode, LabelSet};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hashkit")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("HASHKIT_OUTPUT_ROOT")
        .output()
        .expect("binary should run")
}

fn run_with_env(dir: &Path, args: &[&str], key: &str, value: &str) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("HASHKIT_OUTPUT_ROOT")
        .env(key, value)
        .output()
        .expect("binary should run")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Tiny synthetic experiment: trains in about a second.
const MICRO_CONFIG: &str = r#"
[dataset.synthetic]
classes = 3
per_class = 10
side = 32
noise = 0.05
seed = 11

[split]
seed = 5

[split.custom]
kind = "per_class"
train = 5
test = 2
val = 1

[backbone]
num_stages = 2
base_width = 2
blocks_per_branch = 1
modules_per_stage = [1, 1]
head_width = 8
input_size = [32, 32]

[head]
code_length = 16

[loss]
name = "dpsh"
lambda = 0.1

[train]
learning_rate = 0.001
batch_size = 8
epochs = 1
runs = 1
seed = 0

[eval]
map_k = 5
top_k = 3
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, MICRO_CONFIG).unwrap();
    path
}

fn first_line(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.lines().next().unwrap_or_default().to_string()
}

#[test]
fn missing_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--config", "nope.toml", "--out", "o"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr_text(&out));
    assert!(stderr_text(&out).contains("nope.toml"));
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, format!("{MICRO_CONFIG}\n[bogus]\nx = 1\n")).unwrap();
    let out = run(
        dir.path(),
        &["train", "--config", "bad.toml", "--out", "o"],
    );
    assert_eq!(code(&out), 2);
    assert!(
        stderr_text(&out).contains("bogus"),
        "should name the unknown key: {}",
        stderr_text(&out)
    );
}

#[test]
fn malformed_override_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let out = run(
        dir.path(),
        &[
            "train",
            "--config",
            "exp.toml",
            "--out",
            "o",
            "--override",
            "train.epochs=banana",
        ],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr_text(&out));
}

#[test]
fn train_writes_one_checkpoint_and_log_per_run() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let out = run(
        dir.path(),
        &[
            "train",
            "--config",
            "exp.toml",
            "--out",
            "runs",
            "--override",
            "train.runs=2",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    for r in 0..2 {
        let ckpt = dir.path().join(format!("runs/run{r}.ckpt"));
        let log = dir.path().join(format!("runs/run{r}.log.jsonl"));
        assert!(ckpt.is_file(), "missing {}", ckpt.display());
        assert!(log.is_file(), "missing {}", log.display());
        let header: serde_json::Value = serde_json::from_str(&first_line(&log)).unwrap();
        assert_eq!(header["run"], r);
        assert_eq!(
            header["config_hash"].as_str().unwrap().len(),
            64,
            "config hash should be a sha-256 hex digest"
        );
    }
}

#[test]
fn train_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    for sub in ["a", "b"] {
        let out = run(
            dir.path(),
            &["train", "--config", "exp.toml", "--out", sub],
        );
        assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    }
    let log_a = fs::read(dir.path().join("a/run0.log.jsonl")).unwrap();
    let log_b = fs::read(dir.path().join("b/run0.log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "training logs should not depend on wall time");
    let ckpt_a = fs::read(dir.path().join("a/run0.ckpt")).unwrap();
    let ckpt_b = fs::read(dir.path().join("b/run0.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn overrides_change_the_recorded_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let base = run(
        dir.path(),
        &["train", "--config", "exp.toml", "--out", "base"],
    );
    assert_eq!(code(&base), 0, "stderr: {}", stderr_text(&base));
    let tweaked = run(
        dir.path(),
        &[
            "train",
            "--config",
            "exp.toml",
            "--out",
            "tweaked",
            "--override",
            "train.epochs=2",
        ],
    );
    assert_eq!(code(&tweaked), 0, "stderr: {}", stderr_text(&tweaked));
    let h_base: serde_json::Value =
        serde_json::from_str(&first_line(&dir.path().join("base/run0.log.jsonl"))).unwrap();
    let h_tweaked: serde_json::Value =
        serde_json::from_str(&first_line(&dir.path().join("tweaked/run0.log.jsonl"))).unwrap();
    assert_ne!(h_base["config_hash"], h_tweaked["config_hash"]);
    assert_eq!(h_tweaked["overrides"][0], "train.epochs=2");
}

#[test]
fn output_root_env_is_used_when_out_is_absent() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let root = dir.path().join("root");
    let out = run_with_env(
        dir.path(),
        &["synth", "--config", "exp.toml"],
        "HASHKIT_OUTPUT_ROOT",
        root.to_str().unwrap(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    assert!(root.join("manifest.txt").is_file());

    let missing = run(dir.path(), &["synth", "--config", "exp.toml"]);
    assert_eq!(code(&missing), 2);
    assert!(
        stderr_text(&missing).contains("HASHKIT_OUTPUT_ROOT"),
        "should tell the user how to set an output root: {}",
        stderr_text(&missing)
    );
}

#[test]
fn synth_prefixes_manifest_with_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let out = run(
        dir.path(),
        &["synth", "--config", "exp.toml", "--out", "data"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let manifest = dir.path().join("data/manifest.txt");
    let head = first_line(&manifest);
    let hash = head
        .strip_prefix("# config_hash ")
        .unwrap_or_else(|| panic!("unexpected manifest header: {head}"));
    assert_eq!(hash.len(), 64);
    assert!(hash.bytes().all(|b| b.is_ascii_hexdigit()));
    let samples = hashkit::data::load_manifest(&manifest, None).unwrap();
    assert_eq!(samples.len(), 30, "3 classes x 10 per class");
}

/// Runs synth + split + train once and returns (data dir, split file, checkpoint).
fn prepare_pipeline(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    write_config(dir);
    let synth = run(dir, &["synth", "--config", "exp.toml", "--out", "data"]);
    assert_eq!(code(&synth), 0, "synth: {}", stderr_text(&synth));
    let split = run(
        dir,
        &["split", "--config", "exp.toml", "--out", "parts/split.json"],
    );
    assert_eq!(code(&split), 0, "split: {}", stderr_text(&split));
    let train = run(dir, &["train", "--config", "exp.toml", "--out", "runs"]);
    assert_eq!(code(&train), 0, "train: {}", stderr_text(&train));
    (
        dir.join("data/manifest.txt"),
        dir.join("parts/split.json"),
        dir.join("runs/run0.ckpt"),
    )
}

#[test]
fn encode_covers_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _, ckpt) = prepare_pipeline(dir.path());
    for name in ["one.hhdb", "two.hhdb"] {
        let out = run(
            dir.path(),
            &[
                "encode",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--manifest",
                manifest.to_str().unwrap(),
                "--out",
                name,
            ],
        );
        assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    }
    let one = fs::read(dir.path().join("one.hhdb")).unwrap();
    let two = fs::read(dir.path().join("two.hhdb")).unwrap();
    assert_eq!(one, two, "encoding twice should give identical bytes");
    let db = load_db(&dir.path().join("one.hhdb")).unwrap();
    assert_eq!(db.len(), 30);
    assert_eq!(db.k(), 16);
}

#[test]
fn encode_respects_split_parts_and_train_inclusion() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, split, ckpt) = prepare_pipeline(dir.path());
    let cases = [
        (vec!["--part", "test"], "test", 6usize),
        (vec!["--part", "database"], "database", 6),
        (
            vec!["--part", "database", "--include-train-in-db"],
            "database+train",
            21,
        ),
    ];
    for (i, (extra, part, expect)) in cases.iter().enumerate() {
        let name = format!("{i}.hhdb");
        let mut args = vec![
            "encode",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--split",
            split.to_str().unwrap(),
            "--out",
            &name,
        ];
        args.extend(extra.iter().copied());
        let out = run(dir.path(), &args);
        assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
        let db = load_db(&dir.path().join(&name)).unwrap();
        assert_eq!(db.len(), *expect, "part {part}");
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("{name}.meta.json"))).unwrap())
                .unwrap();
        assert_eq!(meta["part"], *part);
        assert_eq!(meta["count"], *expect);
    }
}

#[test]
fn encode_of_empty_manifest_gives_valid_empty_db() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, ckpt) = prepare_pipeline(dir.path());
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "# no samples\n").unwrap();
    let out = run(
        dir.path(),
        &[
            "encode",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            empty.to_str().unwrap(),
            "--out",
            "empty.hhdb",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let db = load_db(&dir.path().join("empty.hhdb")).unwrap();
    assert_eq!(db.len(), 0);
    assert_eq!(db.k(), 16, "code length survives an empty database");
}

#[test]
fn encode_expect_k_mismatch_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _, ckpt) = prepare_pipeline(dir.path());
    let out = run(
        dir.path(),
        &[
            "encode",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--expect-k",
            "32",
            "--out",
            "db.hhdb",
        ],
    );
    assert_eq!(code(&out), 2);
    let err = stderr_text(&out);
    assert!(err.contains("16") && err.contains("32"), "stderr: {err}");
}

/// Hand-built database with pairwise-distinct codes, one label per entry.
fn distinct_db(k: usize, n: usize) -> RetrievalDatabase {
    let mut codes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let bits: Vec<f64> = (0..k)
            .map(|b| if i >> b & 1 == 1 { 1.0 } else { -1.0 })
            .collect();
        codes.push(HashCode::pack(&bits).unwrap());
        labels.push(LabelSet::new(vec![i as u32]).unwrap());
        ids.push(i as u64);
    }
    RetrievalDatabase::new(k, codes, labels, ids).unwrap()
}

#[test]
fn retrieve_self_query_ranks_itself_at_distance_zero() {
    let dir = tempfile::tempdir().unwrap();
    let db = distinct_db(16, 12);
    save_db(&db, &dir.path().join("db.hhdb")).unwrap();
    let out = run(
        dir.path(),
        &[
            "retrieve",
            "--db",
            "db.hhdb",
            "--queries",
            "db.hhdb",
            "--top-k",
            "1",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let text = stdout_text(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 12, "one line per query at top_k = 1");
    for line in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "qid, id, distance: {line}");
        assert_eq!(fields[2], "0", "each query contains its own code: {line}");
    }
}

#[test]
fn retrieve_output_matches_library_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let db = distinct_db(16, 20);
    let queries = distinct_db(16, 5);
    save_db(&db, &dir.path().join("db.hhdb")).unwrap();
    save_db(&queries, &dir.path().join("q.hhdb")).unwrap();
    let out = run(
        dir.path(),
        &[
            "retrieve",
            "--db",
            "db.hhdb",
            "--queries",
            "q.hhdb",
            "--top-k",
            "4",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let mut expected = String::new();
    for (qid, code) in queries.ids().iter().zip(queries.codes()) {
        let result = db.search(code, 4).unwrap();
        for (id, dist) in &result.entries {
            expected.push_str(&format!("{qid}\t{id}\t{dist}\n"));
        }
    }
    assert_eq!(stdout_text(&out), expected);
}

#[test]
fn retrieve_code_length_mismatch_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    save_db(&distinct_db(16, 4), &dir.path().join("db16.hhdb")).unwrap();
    save_db(&distinct_db(8, 4), &dir.path().join("db8.hhdb")).unwrap();
    let out = run(
        dir.path(),
        &["retrieve", "--db", "db16.hhdb", "--queries", "db8.hhdb"],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr_text(&out));
}

fn write_sidecar(db_path: &Path, hash: &str, part: &str, count: usize, map_k: usize) {
    let meta = serde_json::json!({
        "config_hash": hash,
        "run": 0,
        "run_seed": 0,
        "dataset": "synthetic",
        "loss": "dpsh",
        "backbone_width": 2,
        "bits": 16,
        "map_k": map_k,
        "part": part,
        "count": count,
    });
    let mut text = serde_json::to_string_pretty(&meta).unwrap();
    text.push('\n');
    fs::write(format!("{}.meta.json", db_path.display()), text).unwrap();
}

#[test]
fn evaluate_db_against_itself_scores_perfect_map_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let db = distinct_db(16, 10);
    let path = dir.path().join("db.hhdb");
    save_db(&db, &path).unwrap();
    let hash = "0".repeat(64);
    write_sidecar(&path, &hash, "database", 10, 5);
    let out = run(
        dir.path(),
        &[
            "evaluate",
            "--db",
            "db.hhdb",
            "--queries",
            "db.hhdb",
            "--map-k",
            "1",
            "--out",
            "report.json",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let map = report["entries"][0]["map"].as_f64().unwrap();
    assert_eq!(
        map, 1.0,
        "unique codes and labels: every query finds exactly itself"
    );
    assert!(dir.path().join("report.json.txt").is_file());
}

#[test]
fn evaluate_rejects_mismatched_config_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let db = distinct_db(16, 6);
    save_db(&db, &dir.path().join("db.hhdb")).unwrap();
    save_db(&db, &dir.path().join("q.hhdb")).unwrap();
    write_sidecar(&dir.path().join("db.hhdb"), &"a".repeat(64), "database", 6, 5);
    write_sidecar(&dir.path().join("q.hhdb"), &"b".repeat(64), "test", 6, 5);
    let out = run(
        dir.path(),
        &[
            "evaluate",
            "--db",
            "db.hhdb",
            "--queries",
            "q.hhdb",
            "--out",
            "report.json",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(
        stderr_text(&out).contains("config"),
        "stderr: {}",
        stderr_text(&out)
    );
}

#[test]
fn evaluate_with_empty_query_db_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let db = distinct_db(16, 6);
    let empty = distinct_db(16, 0);
    save_db(&db, &dir.path().join("db.hhdb")).unwrap();
    save_db(&empty, &dir.path().join("q.hhdb")).unwrap();
    let hash = "c".repeat(64);
    write_sidecar(&dir.path().join("db.hhdb"), &hash, "database", 6, 5);
    write_sidecar(&dir.path().join("q.hhdb"), &hash, "test", 0, 5);
    let out = run(
        dir.path(),
        &[
            "evaluate",
            "--db",
            "db.hhdb",
            "--queries",
            "q.hhdb",
            "--out",
            "report.json",
        ],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr_text(&out));
}

#[test]
fn split_artifact_records_protocol_and_disjoint_parts() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let out = run(
        dir.path(),
        &["split", "--config", "exp.toml", "--out", "parts/split.json"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let artifact: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("parts/split.json")).unwrap())
            .unwrap();
    assert_eq!(artifact["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(artifact["seed"], 5);
    let split = &artifact["split"];
    assert_eq!(split["train_ids"].as_array().unwrap().len(), 15);
    assert_eq!(split["test_ids"].as_array().unwrap().len(), 6);
    assert_eq!(split["val_ids"].as_array().unwrap().len(), 3);
    assert_eq!(split["database_ids"].as_array().unwrap().len(), 6);
    let mut seen = std::collections::HashSet::new();
    for part in ["train_ids", "test_ids", "val_ids", "database_ids"] {
        for id in split[part].as_array().unwrap() {
            assert!(seen.insert(id.as_u64().unwrap()), "duplicate id {id}");
        }
    }
}

#[test]
fn help_and_bad_usage_come_from_clap() {
    let dir = tempfile::tempdir().unwrap();
    let help = run(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout_text(&help).contains("train"));
    let bad = run(dir.path(), &["frobnicate"]);
    assert_eq!(code(&bad), 2);
}
