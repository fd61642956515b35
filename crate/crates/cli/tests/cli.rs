use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;

use ralm::clustering::KMeansOptions;
use ralm::data::{read_jsonl, Event, UserSplit};
use ralm::lookalike::{evaluate, seeds_representations, Campaign, LookalikeModel};
use ralm::store::EmbeddingStore;

const CONF: &str = "users = 400\nm = 8\nh = 8\nk_a = 4\nrep_epochs = 2\nlookalike_epochs = 2\ncluster_k = 4\nrecluster_cadence_ms = 1000\n";

fn ralm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ralm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ralm(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A directory holding a generated dataset and both trained phases.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.conf"), CONF).unwrap();
        for cmd in ["gen", "train-rep", "train-lookalike"] {
            ok(dir.path(), &["--config", "run.conf", "--seed", "5", cmd]);
        }
        dir
    })
    .path()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(ralm(d, &[]).status.code(), Some(2));
    assert_eq!(ralm(d, &["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(ralm(d, &["gen", "--fields", "0"]).status.code(), Some(2));
    assert_eq!(ralm(d, &["--seed", "x", "gen"]).status.code(), Some(2));
    std::fs::write(d.join("bad.conf"), "cluster_size = 3\n").unwrap();
    assert_eq!(ralm(d, &["--config", "bad.conf", "gen"]).status.code(), Some(2));
    assert_eq!(ralm(d, &["--config", "absent.conf", "gen"]).status.code(), Some(2));
    assert_eq!(ralm(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn gen_is_deterministic_and_creates_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "7", "gen", "--users", "300", "--out", "a/nested"]);
    ok(d, &["--seed", "7", "gen", "--users", "300", "--out", "b"]);
    for name in [
        "users.jsonl",
        "items.jsonl",
        "events.jsonl",
        "schema.json",
        "truth.json",
    ] {
        let a = std::fs::read(d.join("a/nested").join(name)).unwrap();
        let b = std::fs::read(d.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn lookalike_before_representation_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--users", "200"]);
    let out = ralm(d, &["train-lookalike"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("universal.emb"));
}

#[test]
fn merge_modes_emit_comparable_metrics_and_retraining_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), CONF).unwrap();
    ok(d, &["--config", "run.conf", "gen"]);
    let mut headers = Vec::new();
    for merge in ["attention", "concat"] {
        ok(d, &["--config", "run.conf", "train-rep", "--merge", merge]);
        let csv = std::fs::read_to_string(d.join("artifacts/rep_metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4, "{merge}");
        headers.push(csv.lines().next().unwrap().to_string());
    }
    assert_eq!(headers[0], headers[1]);
    let first = std::fs::read(d.join("artifacts/representation.bin")).unwrap();
    ok(d, &["--config", "run.conf", "train-rep", "--merge", "concat"]);
    assert_eq!(first, std::fs::read(d.join("artifacts/representation.bin")).unwrap());
}

#[test]
fn eval_matches_the_library_metrics() {
    let d = trained();
    let stdout = ok(d, &["--config", "run.conf", "--seed", "5", "eval"]);
    for key in ["auc", "prec@10", "prec@50", "diversity@10", "gini@10"] {
        assert!(
            stdout.lines().any(|l| l.starts_with(key)),
            "{key} missing from {stdout}"
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("artifacts/eval.json")).unwrap()).unwrap();

    let universal = EmbeddingStore::load(&d.join("artifacts/universal.emb")).unwrap();
    let store = EmbeddingStore::load(&d.join("artifacts/lookalike.emb")).unwrap();
    let model = LookalikeModel::load(&d.join("artifacts/lookalike.bin")).unwrap();
    let events: Vec<Event> = read_jsonl(&d.join("data/events.jsonl")).unwrap();
    let split = UserSplit::new(universal.ids(), 0.2, 5).unwrap();
    let campaign = Campaign::build(&universal, &events, &split, 1);
    let opts = KMeansOptions {
        seed: 5,
        ..KMeansOptions::default()
    };
    let centroids: Vec<_> = seeds_representations(&store, &campaign, 4, opts, 0)
        .unwrap()
        .into_iter()
        .map(|r| r.centroids)
        .collect();
    let ev = evaluate(&model, store.vectors(), &campaign, &centroids, &[10, 50]).unwrap();
    assert_eq!(report["test_auc"].as_f64().unwrap(), ev.test_auc);
    for (k, p) in ev.prec_at {
        assert_eq!(report["prec_at"][k.to_string()].as_f64().unwrap(), p);
    }
}

#[test]
fn replay_report_matches_the_offline_fold() {
    let d = trained();
    ok(
        d,
        &[
            "--config",
            "run.conf",
            "--seed",
            "5",
            "replay",
            "--report",
            "replay.json",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("replay.json")).unwrap()).unwrap();
    let events: Vec<Event> = read_jsonl(&d.join("data/events.jsonl")).unwrap();
    let mut seeds: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.is_click == 1) {
        let s = seeds.entry(&e.item_id).or_default();
        s.retain(|u| *u != e.user_id);
        s.push(&e.user_id);
    }
    let summary = &report["summary"];
    assert_eq!(summary["candidates"].as_u64().unwrap() as usize, seeds.len());
    assert_eq!(
        summary["total_seeds"].as_u64().unwrap() as usize,
        seeds.values().map(Vec::len).sum::<usize>()
    );
    assert_eq!(summary["events"].as_u64().unwrap() as usize, events.len());
}

struct Server {
    child: Child,
    addr: String,
    lines: std::io::Lines<BufReader<std::process::ChildStdout>>,
}

impl Server {
    fn start(dir: &Path) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_ralm"))
            .args(["--config", "run.conf", "--seed", "5", "serve", "--bind", "127.0.0.1:0"])
            .current_dir(dir)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let first = lines.next().unwrap().unwrap();
        let addr = first.strip_prefix("listening on ").unwrap().to_string();
        Self { child, addr, lines }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    fn terminate(mut self) -> (bool, Vec<String>) {
        Command::new("kill")
            .args(["-TERM", &self.child.id().to_string()])
            .status()
            .unwrap();
        let status = self.child.wait().unwrap();
        (status.success(), self.lines.by_ref().map_while(Result::ok).collect())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}

#[test]
fn http_api_serves_scores_events_and_candidates() {
    let d = trained();
    let server = Server::start(d);
    let client = reqwest::blocking::Client::new();

    let health: serde_json::Value = client.get(server.url("/healthz")).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");
    assert!(health["snapshot_version"].as_u64().unwrap() >= 1);

    let r = client
        .post(server.url("/score"))
        .json(&serde_json::json!({"user_id": "u000", "top_n": 3}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    let body: serde_json::Value = r.json().unwrap();
    let results = body["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    let first = results[0]["candidate_id"].as_str().unwrap().to_string();
    for field in ["score", "global_sim", "local_sim", "seeds_version"] {
        assert!(results[0].get(field).is_some(), "{field}");
    }

    let filtered: serde_json::Value = client
        .post(server.url("/score"))
        .json(&serde_json::json!({"user_id": "u000", "top_n": 5, "candidates": [first, "nope"]}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(filtered["results"].as_array().unwrap().len(), 1);
    assert_eq!(filtered["skipped"], serde_json::json!(["nope"]));

    let missing = client
        .post(server.url("/score"))
        .json(&serde_json::json!({"user_id": "nobody", "top_n": 3}))
        .send()
        .unwrap();
    assert_eq!(missing.status(), 404);

    let accepted = client
        .post(server.url("/event"))
        .json(&serde_json::json!({"user_id": "u001", "candidate_id": "fresh", "ts": 1}))
        .send()
        .unwrap();
    assert_eq!(accepted.status(), 200);
    let bad = client.post(server.url("/event")).body("{not json").send().unwrap();
    assert_eq!(bad.status(), 400);

    let info: serde_json::Value = client
        .get(server.url(&format!("/candidates/{first}")))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert!(info["seed_count"].as_u64().unwrap() >= 1);
    assert_eq!(
        client.get(server.url("/candidates/unknown")).send().unwrap().status(),
        404
    );

    let (clean, rest) = server.terminate();
    assert!(clean);
    let stats = rest.iter().find_map(|l| l.strip_prefix("shutdown ")).unwrap();
    let stats: serde_json::Value = serde_json::from_str(stats).unwrap();
    assert_eq!(stats["ingest"]["rejected"], 1);
}

#[test]
fn serve_requires_trained_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ralm(dir.path(), &["serve", "--bind", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(1));
}
