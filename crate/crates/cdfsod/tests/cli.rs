use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cdfsod"));
    c.env_remove("CDFSOD_THREADS");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn write_lines(dir: &Path, name: &str, lines: &[Value]) -> PathBuf {
    let p = dir.join(name);
    let text: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    fs::write(&p, text.join("\n")).unwrap();
    p
}

fn dataset() -> Value {
    json!({
        "images": [
            {"id": 1, "width": 100, "height": 80, "file_name": "a.jpg"},
            {"id": 2, "width": 100, "height": 80, "file_name": "b.jpg"},
            {"id": 3, "width": 100, "height": 80, "file_name": "c.jpg"}
        ],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 20]},
            {"id": 2, "image_id": 2, "category_id": 2, "bbox": [40, 30, 15, 25]},
            {"id": 3, "image_id": 3, "category_id": 1, "bbox": [5, 5, 10, 10]},
            {"id": 4, "image_id": 3, "category_id": 2, "bbox": [60, 40, 20, 20]}
        ],
        "categories": [{"id": 1, "name": "apple"}, {"id": 2, "name": "car"}]
    })
}

fn perfect_detections() -> Value {
    let anns = dataset()["annotations"].clone();
    Value::Array(
        anns.as_array()
            .unwrap()
            .iter()
            .map(|a| json!({"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 0.9}))
            .collect(),
    )
}

const MOVEFREE: [(&str, f64); 9] = [
    ("D1_1shot", 66.18),
    ("D1_5shot", 64.58),
    ("D1_10shot", 62.57),
    ("D2_1shot", 60.43),
    ("D2_5shot", 58.89),
    ("D2_10shot", 59.00),
    ("D3_1shot", 48.75),
    ("D3_5shot", 49.28),
    ("D3_10shot", 48.00),
];

fn nine_maps() -> Value {
    Value::Object(MOVEFREE.iter().map(|(k, v)| (k.to_string(), json!(v))).collect())
}

#[test]
fn score_reproduces_leaderboard_value() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "maps.json", &nine_maps());
    let out = run_in(dir.path(), &["score", "--report", "maps.json"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Score 231.01"));
    let v = stdout_json(&out);
    assert!((v["result"]["score"].as_f64().unwrap() - 231.01).abs() < 0.005);
}

#[test]
fn score_accepts_a_nested_maps_object() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "r.json", &json!({ "maps": nine_maps() }));
    let out = run_in(dir.path(), &["score", "--report", "r.json"]);
    assert!(out.status.success());
}

#[test]
fn score_rejects_missing_slot() {
    let dir = TempDir::new().unwrap();
    let mut maps = nine_maps();
    maps.as_object_mut().unwrap().remove("D3_10shot");
    write(dir.path(), "maps.json", &maps);
    let out = run_in(dir.path(), &["score", "--report", "maps.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_rejected() {
    let out = bin().args(["score", "--report", "x.json", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn missing_file_is_an_io_error() {
    let out = bin().args(["score", "--report", "/nonexistent/maps.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_json_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("gt.json"), "{not json").unwrap();
    write(dir.path(), "d.json", &json!([]));
    let out = run_in(dir.path(), &["evaluate", "--gt", "gt.json", "--dets", "d.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dangling_reference_names_the_record() {
    let dir = TempDir::new().unwrap();
    let mut ds = dataset();
    ds["annotations"][1]["image_id"] = json!(77);
    write(dir.path(), "gt.json", &ds);
    write(dir.path(), "d.json", &json!([]));
    let out = run_in(dir.path(), &["evaluate", "--gt", "gt.json", "--dets", "d.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('2') && err.contains("77"), "{err}");
}

#[test]
fn perfect_detections_score_one_hundred() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "gt.json", &dataset());
    write(dir.path(), "d.json", &perfect_detections());
    let out = run_in(dir.path(), &["evaluate", "--gt", "gt.json", "--dets", "d.json", "--slot", "D2_5shot"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mAP 100.00"));
    let v = stdout_json(&out);
    assert_eq!(v["result"]["map"], json!(100.0));
    assert_eq!(v["result"]["slot"], json!("D2_5shot"));
    assert_eq!(v["tool"]["name"], json!("cdfsod"));
    assert_eq!(v["tool"]["version"], json!(env!("CARGO_PKG_VERSION")));
    assert_eq!(v["config"]["gt"], json!("gt.json"));
    assert_eq!(v["config"]["ap50_only"], json!(false));
}

#[test]
fn evaluation_output_ignores_thread_count() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "gt.json", &dataset());
    let mut dets = perfect_detections();
    dets.as_array_mut()
        .unwrap()
        .push(json!({"image_id": 1, "category_id": 2, "bbox": [12, 12, 18, 18], "score": 0.95}));
    dets[2]["bbox"] = json!([6, 6, 10, 10]);
    write(dir.path(), "d.json", &dets);
    let base = ["evaluate", "--gt", "gt.json", "--dets", "d.json"];
    let one = run_in(dir.path(), &[&base[..], &["--threads", "1"]].concat());
    let four = run_in(dir.path(), &[&base[..], &["--threads", "4"]].concat());
    let env = bin().current_dir(dir.path()).args(base).env("CDFSOD_THREADS", "3").output().unwrap();
    assert!(one.status.success());
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(one.stdout, env.stdout);
}

#[test]
fn episodes_are_byte_identical_per_seed_and_written_to_output() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "gt.json", &dataset());
    let args = ["sample-episodes", "--gt", "gt.json", "--shots", "1,2", "--seed", "42"];
    let a = run_in(dir.path(), &args);
    let b = run_in(dir.path(), &args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let v = stdout_json(&a);
    let eps = v["result"]["episodes"].as_array().unwrap();
    assert_eq!(eps.len(), 2);
    assert_eq!(eps[1]["support"]["1"].as_array().unwrap().len(), 2);
    assert_eq!(v["config"]["seed"], json!(42));

    let out = run_in(dir.path(), &[&args[..], &["-o", "ep.json"]].concat());
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let written: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ep.json")).unwrap()).unwrap();
    assert_eq!(written["result"], v["result"]);
}

#[test]
fn infeasible_episode_exits_one() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "gt.json", &dataset());
    let out = run_in(dir.path(), &["sample-episodes", "--gt", "gt.json", "--shots", "5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ensemble_writes_detections_to_output() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "a.json",
        &json!([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.9}]),
    );
    write(
        dir.path(),
        "b.json",
        &json!([
            {"image_id": 1, "category_id": 1, "bbox": [1, 0, 10, 10], "score": 1.0},
            {"image_id": 1, "category_id": 1, "bbox": [50, 50, 10, 10], "score": 0.1}
        ]),
    );
    let out = run_in(
        dir.path(),
        &["ensemble", "--weights", "a=1.0,b=0.7", "--iou", "0.5", "--floor", "0.1", "a.json", "b.json", "-o", "out.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dets: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out.json")).unwrap()).unwrap();
    let dets = dets.as_array().unwrap();
    // b's boxes become 0.7 and 0.07; the second drops below the floor and
    // the first is suppressed by a's 0.9
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0]["score"], json!(0.9));
    assert_eq!(dets[0]["source"], json!("a"));
    assert_eq!(stdout_json(&out)["result"]["kept"], json!(1));
}

#[test]
fn ensemble_rejects_unweighted_input() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "a.json", &json!([]));
    let out = run_in(dir.path(), &["ensemble", "--weights", "a=1", "a.json", "a.json"]);
    assert_eq!(out.status.code(), Some(1));
}

fn supports(dir: &Path) -> PathBuf {
    write_lines(
        dir,
        "sup.jsonl",
        &[
            json!({"id": "s1", "class_id": 1, "kind": "instance", "vector": [1.0, 0.0, 0.0]}),
            json!({"id": "s2", "class_id": 1, "kind": "instance", "vector": [0.8, 0.2, 0.0]}),
            json!({"id": "s3", "class_id": 2, "kind": "instance", "vector": [0.0, 1.0, 0.0]}),
            json!({"id": "g1", "class_id": 1, "kind": "image", "vector": [0.9, 0.1, 0.1]}),
            json!({"id": "g2", "class_id": 2, "kind": "image", "vector": [0.1, 0.9, 0.1]}),
            json!({"id": "t1", "class_id": 1, "kind": "text", "vector": [1.0, 0.0, 0.3]}),
            json!({"id": "t2", "class_id": 2, "kind": "text", "vector": [0.0, 1.0, 0.3]}),
        ],
    )
}

fn queries(dir: &Path) -> PathBuf {
    write_lines(
        dir,
        "q.jsonl",
        &[
            json!({"id": "near-one", "kind": "instance", "vector": [0.9, 0.1, 0.0]}),
            json!({"id": 7, "kind": "instance", "vector": [0.1, 0.9, 0.2]}),
        ],
    )
}

#[test]
fn every_fusion_method_classifies_the_queries() {
    let dir = TempDir::new().unwrap();
    supports(dir.path());
    queries(dir.path());
    for method in ["proto", "ifc", "nearest", "tempered"] {
        let out = run_in(
            dir.path(),
            &["fuse", "--support", "sup.jsonl", "--queries", "q.jsonl", "--method", method, "--softmax"],
        );
        assert!(out.status.success(), "{method}: {}", String::from_utf8_lossy(&out.stderr));
        let v = stdout_json(&out);
        let preds: Vec<u64> = v["result"]["queries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|q| q["predicted_class"].as_u64().unwrap())
            .collect();
        assert_eq!(preds, vec![1, 2], "{method}");
        assert_eq!(v["result"]["queries"][1]["id"], json!("7"));
    }
}

#[test]
fn nearest_reports_cosine_confidence() {
    let dir = TempDir::new().unwrap();
    supports(dir.path());
    write_lines(dir.path(), "q.jsonl", &[json!({"id": "q", "kind": "instance", "vector": [0.0, 2.0, 0.0]})]);
    let out = run_in(dir.path(), &["fuse", "--support", "sup.jsonl", "--queries", "q.jsonl", "--method", "nearest"]);
    let v = stdout_json(&out);
    assert_eq!(v["result"]["queries"][0]["confidence"], json!(1.0));
}

#[test]
fn proto_fusion_drops_incomplete_sources_with_a_warning() {
    let dir = TempDir::new().unwrap();
    write_lines(
        dir.path(),
        "sup.jsonl",
        &[
            json!({"id": "a", "class_id": 1, "kind": "instance", "vector": [1.0, 0.0]}),
            json!({"id": "b", "class_id": 2, "kind": "instance", "vector": [0.0, 1.0]}),
            json!({"id": "t", "class_id": 1, "kind": "text", "vector": [1.0, 0.0]}),
        ],
    );
    write_lines(dir.path(), "q.jsonl", &[json!({"id": "q", "kind": "instance", "vector": [1.0, 0.1]})]);
    let out = run_in(dir.path(), &["fuse", "--support", "sup.jsonl", "--queries", "q.jsonl"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    let sources: Vec<&str> = v["result"]["sources"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(sources, vec!["local"]);
    assert_eq!(v["warnings"].as_array().unwrap().len(), 2);
}

#[test]
fn refined_tempered_prototypes_accept_projection_file() {
    let dir = TempDir::new().unwrap();
    supports(dir.path());
    queries(dir.path());
    write(dir.path(), "proj.json", &json!({"gate_bias": [0.5, 0.5, 0.5]}));
    let out = run_in(
        dir.path(),
        &["fuse", "--support", "sup.jsonl", "--queries", "q.jsonl", "--method", "tempered", "--refine", "proj.json", "--alpha", "1"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let at_zero = run_in(
        dir.path(),
        &["fuse", "--support", "sup.jsonl", "--queries", "q.jsonl", "--method", "tempered", "--refine", "identity", "--alpha", "0"],
    );
    let plain = run_in(dir.path(), &["fuse", "--support", "sup.jsonl", "--queries", "q.jsonl", "--method", "tempered"]);
    assert_eq!(
        stdout_json(&at_zero)["result"]["queries"],
        stdout_json(&plain)["result"]["queries"]
    );
}

#[test]
fn bad_embedding_line_is_reported_with_its_number() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("sup.jsonl"),
        "{\"id\": \"a\", \"class_id\": 1, \"kind\": \"instance\", \"vector\": [1, 0]}\n{\"id\": \"b\", \"kind\": \"sound\", \"vector\": [1, 0]}\n",
    )
    .unwrap();
    queries(dir.path());
    let out = run_in(dir.path(), &["fuse", "--support", "sup.jsonl", "--queries", "q.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn domain_stats_reports_statistics() {
    let dir = TempDir::new().unwrap();
    write_lines(dir.path(), "x.jsonl", &[json!({"id": "a", "kind": "image", "vector": [0.0]})]);
    write_lines(dir.path(), "y.jsonl", &[json!({"id": "b", "kind": "image", "vector": [1.0]})]);
    let out = run_in(
        dir.path(),
        &["domain-stats", "--source", "x.jsonl", "--target", "y.jsonl", "--bandwidths", "1", "--iteration", "250", "--det-loss", "2"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &stdout_json(&out)["result"];
    let hand = 2.0 - 2.0 * (-0.5f64).exp();
    assert!((r["mmd"].as_f64().unwrap() - hand).abs() < 1e-12);
    assert_eq!(r["warmup_alpha"], json!(0.5));
    // single samples have zero spread, so the source channel is guarded
    assert_eq!(r["guarded_channels"], json!([0]));
    assert!(r["combined_objective"].as_f64().unwrap() > 2.0);
}

fn replay_fixture(dir: &Path) {
    write(dir, "gt.json", &dataset());
    let iteration = |score: f64| {
        json!([
            {"image_id": 1, "category_id": 2, "bbox": [60, 10, 10, 10], "score": score},
            {"image_id": 2, "category_id": 2, "bbox": [40, 30, 15, 25], "score": 0.99}
        ])
    };
    // numeric order puts preds_2 before preds_10 even though it sorts after
    // it as text
    write(dir, "preds_1.json", &iteration(0.5));
    write(dir, "preds_2.json", &iteration(0.55));
    write(dir, "preds_10.json", &iteration(0.9));
}

#[test]
fn selftrain_replays_files_in_numeric_order() {
    let dir = TempDir::new().unwrap();
    replay_fixture(dir.path());
    let out = run_in(
        dir.path(),
        &["selftrain", "--gt", "gt.json", "--scorer", "replay:preds_*.json", "--lambda", "0.6", "--iters", "3", "-o", "labels.json", "--trace", "trace.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("trace.json")).unwrap()).unwrap();
    let added: Vec<Value> = trace["result"].as_array().unwrap().iter().map(|t| t["added_ids"].clone()).collect();
    assert_eq!(added, vec![json!([]), json!([]), json!([5])]);

    let labels: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels["annotations"].as_array().unwrap().len(), 5);
    assert_eq!(labels["annotations"][4]["id"], json!(5));
    assert_eq!(labels["annotations"][4]["bbox"], json!([60.0, 10.0, 10.0, 10.0]));
    assert_eq!(stdout_json(&out)["result"]["final_labels"], json!(5));
}

#[test]
fn selftrain_with_too_few_replay_files_fails_with_iteration() {
    let dir = TempDir::new().unwrap();
    replay_fixture(dir.path());
    let out = run_in(dir.path(), &["selftrain", "--gt", "gt.json", "--scorer", "replay:preds_*.json", "--iters", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration 4"));
}

#[test]
fn selftrain_with_prototype_scorer() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "gt.json", &dataset());
    // the second proposal sits halfway between two prototypes, so its
    // confidence stays near 0.5 and below the threshold
    write_lines(
        dir.path(),
        "sup.jsonl",
        &[
            json!({"id": "s1", "class_id": 1, "kind": "instance", "vector": [1.0, 0.0, 0.0]}),
            json!({"id": "s3", "class_id": 2, "kind": "instance", "vector": [0.0, 1.0, 0.0]}),
        ],
    );
    write(
        dir.path(),
        "props.json",
        &json!([
            {"image_id": 2, "bbox": [70, 5, 10, 10], "score": 0.8, "vector": [1.0, 0.0, 0.0]},
            {"image_id": 2, "bbox": [5, 50, 10, 10], "score": 0.8, "vector": [0.5, 0.5, 0.0]}
        ]),
    );
    let out = run_in(
        dir.path(),
        &["selftrain", "--gt", "gt.json", "--scorer", "proto:sup.jsonl:props.json", "--iters", "2", "--reset-per-image"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["config"]["reset_per_image"], json!(true));
    // one trace row per (image, iteration) in reset mode
    assert_eq!(v["result"]["trace"].as_array().unwrap().len(), 6);
    let added = v["result"]["final_labels"].as_u64().unwrap() - v["result"]["initial_labels"].as_u64().unwrap();
    assert_eq!(added, 1);
    assert_eq!(v["result"]["labels"]["annotations"][4]["category_id"], json!(1));
}
