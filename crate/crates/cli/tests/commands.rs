use std::path::Path;
use std::process::{Command, Output};

use pgrisk::annotation::Class;
use pgrisk::corpus::write_jsonl;
use pgrisk::experiment::{
    write_dataset, MANIFEST_FILE, PREDICTIONS_FILE, REPORT_FILE, STATUS_FILE,
};
use pgrisk::synthetic::{bimodal_pool, confound_corpus, annotated_fixture};
use serde_json::{json, Value};

fn pgrisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgrisk"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pgrisk(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_events(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|_| panic!("not a JSON log line: {l}")))
        .collect()
}

#[test]
fn corpus_to_blind_queue() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump");
    bimodal_pool(3).save(&dump).unwrap();
    let store = dir.path().join("store");

    let report: Value = serde_json::from_str(&ok(&[
        "ingest",
        "--store",
        s(&store),
        "--posts",
        s(&dump.join("posts.jsonl")),
    ]))
    .unwrap();
    assert_eq!(report["n_rejected"], 0);
    let n = report["n_posts"].as_u64().unwrap();
    assert!(n > 1000);

    let stats: Value = serde_json::from_str(&ok(&["stats", "--store", s(&store)])).unwrap();
    assert_eq!(stats["total_posts"].as_u64(), Some(n));

    let pool = dir.path().join("pool.json");
    let summary: Value = serde_json::from_str(&ok(&[
        "select-pool",
        "--store",
        s(&store),
        "--seed",
        "1",
        "--out",
        s(&pool),
    ]))
    .unwrap();
    let targets = summary["target_pool"].as_u64().unwrap();
    assert_eq!(summary["control_pool"].as_u64(), Some(2 * targets));
    assert!(summary["balance_check"]["p"].as_f64().unwrap() >= 0.05);

    let queue = dir.path().join("queue.jsonl");
    ok(&[
        "export-blind",
        "--pool",
        s(&pool),
        "--seed",
        "1",
        "--out",
        s(&queue),
    ]);
    let lines: Vec<Value> = std::fs::read_to_string(&queue)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len() as u64, 3 * targets);
    for l in &lines {
        let keys: Vec<&String> = l.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["id", "text"]);
    }
    let again = dir.path().join("queue2.jsonl");
    ok(&[
        "export-blind",
        "--pool",
        s(&pool),
        "--seed",
        "1",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        std::fs::read(&queue).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn ingest_from_sqlite() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("forum.db");
    let conn = rusqlite::Connection::open(&db).unwrap();
    conn.execute_batch(
        "CREATE TABLE post (id INTEGER, subforum TEXT, url TEXT, published_at TEXT, author TEXT, is_initial INTEGER, text TEXT);
         CREATE TABLE author (username TEXT, activated_at TEXT, post_count INTEGER);
         INSERT INTO post VALUES (1, 'Gambling addiction', 'u1', '2021-03-01 10:00:00', 'ann', 1, 'I cannot stop betting');
         INSERT INTO post VALUES (2, 'Poker', 'u2', '2021-03-02 11:00:00', 'bob', 0, 'Nice hand');
         INSERT INTO post VALUES (3, NULL, 'u3', NULL, NULL, 1, 'orphan');
         INSERT INTO author VALUES ('ann', '2020-01-01 00:00:00', 10);",
    )
    .unwrap();
    drop(conn);
    let store = dir.path().join("store");
    let report: Value =
        serde_json::from_str(&ok(&["ingest", "--store", s(&store), "--sqlite", s(&db)])).unwrap();
    assert_eq!(report["n_posts"], 2);
    assert_eq!(report["n_rejected"], 1);
    let stats: Value = serde_json::from_str(&ok(&["stats", "--store", s(&store)])).unwrap();
    assert_eq!(stats["n_initial_addiction"], 1);
}

#[test]
fn annotations_to_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (store, records) = annotated_fixture();
    let store_dir = dir.path().join("store");
    store.save(&store_dir).unwrap();
    let export = dir.path().join("export.jsonl");
    write_jsonl(&export, &records).unwrap();

    let merged = dir.path().join("annotations.jsonl");
    let summary: Value = serde_json::from_str(&ok(&[
        "import-annotations",
        "--input",
        s(&export),
        "--input",
        s(&export),
        "--store",
        s(&store_dir),
        "--out",
        s(&merged),
    ]))
    .unwrap();
    assert_eq!(summary["total"], 504);
    assert_eq!(summary["labels"]["target"], 138);
    assert_eq!(summary["labels"]["non_target"], 348);

    let ds = dir.path().join("dataset.jsonl");
    let out: Value = serde_json::from_str(&ok(&[
        "build-dataset",
        "--store",
        s(&store_dir),
        "--annotations",
        s(&merged),
        "--out",
        s(&ds),
    ]))
    .unwrap();
    assert_eq!(
        (out["target"].as_u64(), out["non_target"].as_u64()),
        (Some(138), Some(348))
    );

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, r#"{"post_id":"x","annotator_id":"a","checked_criteria":["X99"],"created_at":"2024-01-01T00:00:00Z"}"#).unwrap();
    let out = pgrisk(&[
        "import-annotations",
        "--input",
        s(&bad),
        "--out",
        s(&dir.path().join("o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    let events = stderr_events(&out);
    assert_eq!(events.last().unwrap()["code"], "validation");
}

fn experiment_config(dir: &Path, data: &Path) -> Value {
    json!({
        "data": {"dataset": data},
        "preprocessing": ["lowercase_only", "lowercase_and_strip_punct"],
        "strategies": ["full_138", "smote_348_348"],
        "backend": {"kind": "linear", "l2": 1e-4, "learning_rate": 1.0, "epochs": 80, "seed": 0},
        "folds": 5,
        "seed": 11,
        "out_dir": dir.join("run"),
    })
}

#[test]
fn evaluate_report_and_error_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = confound_corpus(160, 2);
    ds.items
        .retain(|i| i.label == Class::NonTarget || i.post_id.as_str() < "s0110");
    let data = dir.path().join("data.jsonl");
    write_dataset(&data, &ds).unwrap();
    let cfg = dir.path().join("experiment.json");
    std::fs::write(&cfg, experiment_config(dir.path(), &data).to_string()).unwrap();

    let out = pgrisk(&["evaluate", "--config", s(&cfg)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[1].starts_with("Preprocessing"), "{table}");
    assert!(lines[1].contains("G/PG items"));
    assert_eq!(lines.len(), 3 + 4);
    let events = stderr_events(&out);
    assert!(events.iter().any(|e| e["event"] == "evaluate"));

    let run = dir.path().join("run");
    for f in [REPORT_FILE, PREDICTIONS_FILE, MANIFEST_FILE, STATUS_FILE] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(ok(&["report", "--run", s(&run)]), table);

    let rerun = dir.path().join("rerun");
    ok(&[
        "evaluate",
        "--manifest",
        s(&run.join(MANIFEST_FILE)),
        "--out",
        s(&rerun),
    ]);
    assert_eq!(
        std::fs::read(run.join(REPORT_FILE)).unwrap(),
        std::fs::read(rerun.join(REPORT_FILE)).unwrap()
    );
    assert_eq!(
        std::fs::read(run.join(PREDICTIONS_FILE)).unwrap(),
        std::fs::read(rerun.join(PREDICTIONS_FILE)).unwrap()
    );

    let preds = run.join(PREDICTIONS_FILE);
    let out = pgrisk(&[
        "error-analysis",
        "--dataset",
        s(&data),
        "--predictions",
        s(&preds),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let lexicon = dir.path().join("lexicon.json");
    std::fs::write(&lexicon, r#"{"finance": ["bank", "loan", "money"]}"#).unwrap();
    let analysis: Value = serde_json::from_str(&ok(&[
        "error-analysis",
        "--dataset",
        s(&data),
        "--predictions",
        s(&preds),
        "--lexicon",
        s(&lexicon),
        "--preprocessing",
        "lowercase_only",
        "--strategy",
        "smote_348_348",
    ]))
    .unwrap();
    for kind in [
        "false_positive",
        "false_negative",
        "true_positive",
        "true_negative",
    ] {
        assert!(analysis[kind]["finance"]["total"].is_u64(), "{kind}");
    }
}

#[test]
fn evaluate_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    write_dataset(&data, &confound_corpus(60, 4)).unwrap();
    let mut cfg = experiment_config(dir.path(), &data);
    cfg["strategies"] = json!(["full_138"]);
    cfg["preprocessing"] = json!(["lowercase_only"]);
    let path = dir.path().join("experiment.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out_dir = dir.path().join("custom");
    ok(&[
        "evaluate",
        "--config",
        s(&path),
        "--folds",
        "3",
        "--seed",
        "5",
        "--stratified",
        "--out",
        s(&out_dir),
    ]);
    let report: Value =
        serde_json::from_slice(&std::fs::read(out_dir.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["folds"], 3);
    assert_eq!(report["seed"], 5);
    assert_eq!(report["rows"][0]["report"]["stratified"], true);
    assert_eq!(
        report["rows"][0]["report"]["folds"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pgrisk(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        pgrisk(&["stats", "--store", s(&dir.path().join("none"))])
            .status
            .code(),
        Some(4)
    );

    let cfg = dir.path().join("experiment.json");
    std::fs::write(
        &cfg,
        experiment_config(dir.path(), &dir.path().join("missing.jsonl")).to_string(),
    )
    .unwrap();
    let out = pgrisk(&["evaluate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(
        stderr_events(&out).last().unwrap()["code"],
        "ingest:not_found"
    );
    let status: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run").join(STATUS_FILE)).unwrap())
            .unwrap();
    assert_eq!(status["status"], "incomplete");

    std::fs::write(&cfg, r#"{"data": {"dataset": "x"}, "surprise": true}"#).unwrap();
    assert_eq!(
        pgrisk(&["evaluate", "--config", s(&cfg)]).status.code(),
        Some(3)
    );

    // every item in one class: the subsample strategy cannot find targets
    let data = dir.path().join("one_class.jsonl");
    let mut ds = confound_corpus(40, 1);
    ds.items.retain(|i| i.label == Class::NonTarget);
    write_dataset(&data, &ds).unwrap();
    let mut c = experiment_config(dir.path(), &data);
    c["strategies"] = json!(["full_138"]);
    std::fs::write(&cfg, c.to_string()).unwrap();
    assert_eq!(
        pgrisk(&["evaluate", "--config", s(&cfg)]).status.code(),
        Some(6)
    );
}

#[test]
fn train_saves_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    write_dataset(&data, &confound_corpus(40, 9)).unwrap();

    let linear = dir.path().join("linear.json");
    std::fs::write(
        &linear,
        r#"{"kind": "linear", "l2": 0.0001, "learning_rate": 1.0, "epochs": 50, "seed": 0}"#,
    )
    .unwrap();
    let out = dir.path().join("lin");
    ok(&[
        "train",
        "--dataset",
        s(&data),
        "--backend",
        s(&linear),
        "--out",
        s(&out),
    ]);
    let model: Value =
        serde_json::from_slice(&std::fs::read(out.join("linear_model.json")).unwrap()).unwrap();
    assert_eq!(model["preprocessing"], "lowercase_only");

    let tf = dir.path().join("tf.json");
    std::fs::write(
        &tf,
        r#"{"kind": "transformer", "layers": 1, "hidden": 16, "heads": 2, "ff_dim": 32, "max_len": 64,
            "hyperparams": {"epochs": 1, "batch_size": 8}}"#,
    )
    .unwrap();
    let out = dir.path().join("tf");
    ok(&[
        "train",
        "--dataset",
        s(&data),
        "--backend",
        s(&tf),
        "--preprocessing",
        "lowercase_and_strip_punct",
        "--out",
        s(&out),
    ]);
    assert!(out.join("transformer.json").exists());
    assert!(out.join("vocab.txt").exists());

    let bad = pgrisk(&[
        "train",
        "--dataset",
        s(&data),
        "--backend",
        s(&tf),
        "--preprocessing",
        "stem",
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}
