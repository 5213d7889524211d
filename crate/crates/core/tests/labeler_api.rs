use std::time::{Duration, Instant};

use hindsight_prior::data::{Label, PreferenceDataset};
use hindsight_prior::oracle::{HumanBridge, OracleKind};
use hindsight_prior::runner::{train, Method, QueryService, RunConfig, RunOptions};
use serde_json::{json, Value};

fn human_config() -> RunConfig {
    let json = json!({
        "method": "prior",
        "oracle": { "kind": "human" },
        "seed": 9,
        "total_steps": 300,
        "random_steps": 100,
        "intrinsic_steps": 100,
        "session_interval": 100,
        "wm_interval": 50,
        "segment_len": 8,
        "queries_per_session": 2,
        "feedback_budget": 2,
        "eval_interval": 300,
        "eval_episodes": 1,
        "human_wait_secs": 60.0,
        "reward": { "hidden": [8], "epochs": 2 },
        "agent": { "batch_size": 16 },
        "world_model": { "categoricals": 2, "classes": 3, "width": 8, "layers": 1, "heads": 2, "ffn": 8, "obs_hidden": 8, "obs_steps": 5, "dyn_steps": 2 }
    });
    serde_json::from_value(json).unwrap()
}

fn post_label(base: &str, body: Value) -> u16 {
    match ureq::post(&format!("{base}/labels")).send_json(body) {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(code, _)) => code,
        Err(e) => panic!("transport error: {e}"),
    }
}

#[test]
fn labels_posted_over_http_reach_the_preference_file() {
    let cfg = human_config();
    assert_eq!(cfg.oracle, OracleKind::Human);
    assert_eq!(cfg.method, Method::Prior);
    let dir = tempfile::tempdir().unwrap();
    let bridge = HumanBridge::new();
    let service = QueryService::start("127.0.0.1:0", bridge.clone(), Some(dir.path().join("metrics.csv"))).unwrap();
    let base = format!("http://127.0.0.1:{}", service.port());

    let out = dir.path().to_path_buf();
    let run = std::thread::spawn(move || train(&cfg, RunOptions { out_dir: Some(out), bridge: Some(bridge) }));

    let deadline = Instant::now() + Duration::from_secs(60);
    let pending = loop {
        let list: Vec<Value> = ureq::get(&format!("{base}/queries/pending")).call().unwrap().into_json().unwrap();
        if !list.is_empty() {
            break list;
        }
        assert!(Instant::now() < deadline, "no query was published");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(pending.len(), 2);
    let first = &pending[0];
    assert_eq!(first["segments"][0]["frames"].as_array().unwrap().len(), 8);
    assert_eq!(first["attention"][1].as_array().unwrap().len(), 8);
    let id_a = first["query_id"].as_u64().unwrap();
    let id_b = pending[1]["query_id"].as_u64().unwrap();

    assert_eq!(post_label(&base, json!({ "query_id": 999, "choice": "a" })), 404);
    assert_eq!(post_label(&base, json!({ "query_id": id_a, "choice": "sideways" })), 400);
    assert_eq!(post_label(&base, json!({ "query_id": id_a, "choice": "a" })), 200);
    assert_eq!(post_label(&base, json!({ "query_id": id_a, "choice": "b" })), 409);
    assert_eq!(post_label(&base, json!({ "query_id": id_b, "choice": "equal" })), 200);

    let record = run.join().unwrap().unwrap();
    assert_eq!(record.dataset_size, 2);

    let prefs = PreferenceDataset::read_jsonl(&dir.path().join("preferences.jsonl")).unwrap();
    let labeled_a = prefs.triplets().iter().find(|t| t.query_id == id_a).expect("labeled query stored");
    assert_eq!(labeled_a.label, Label::A);
    assert_eq!(labeled_a.labeler, "human");
    let labeled_b = prefs.triplets().iter().find(|t| t.query_id == id_b).unwrap();
    assert_eq!(labeled_b.label, Label::EQUAL);

    let metrics = ureq::get(&format!("{base}/metrics")).call().unwrap().into_string().unwrap();
    assert!(metrics.starts_with("step,episode,eval_return,eval_success,method,seed"));
    match ureq::get(&format!("{base}/nowhere")).call() {
        Err(ureq::Error::Status(404, _)) => {}
        other => panic!("expected 404, got {other:?}"),
    }
    service.shutdown();
}

#[test]
fn metrics_are_missing_until_a_run_writes_them() {
    let dir = tempfile::tempdir().unwrap();
    let service = QueryService::start("127.0.0.1:0", HumanBridge::new(), Some(dir.path().join("metrics.csv"))).unwrap();
    let url = format!("http://127.0.0.1:{}/metrics", service.port());
    assert!(matches!(ureq::get(&url).call(), Err(ureq::Error::Status(404, _))));
    let list: Vec<Value> = ureq::get(&format!("http://127.0.0.1:{}/queries/pending", service.port())).call().unwrap().into_json().unwrap();
    assert!(list.is_empty());
}
