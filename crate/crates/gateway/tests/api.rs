use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use equicrew_core::config::{RunConfig, Secrets};
use equicrew_core::run::Engine;
use equicrew_core::synthetic::{SyntheticMarket, SyntheticSpec};
use equicrew_gateway::{router, AppState, Worker};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

const TOKEN: &str = "s3cret";

struct Server {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
    worker: Option<Worker>,
}

impl Server {
    fn start(runs: &Path, static_dir: Option<PathBuf>) -> Self {
        let engine = Arc::new(Engine::new(runs, Secrets::default()));
        let worker = Worker::spawn(engine.clone(), Duration::from_millis(20));
        let app = router(AppState { engine, token: TOKEN.into() }, static_dir);
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                equicrew_gateway::serve(listener, app, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        Self {
            addr: addr_rx.recv().unwrap(),
            stop: Some(stop_tx),
            thread: Some(thread),
            worker: Some(worker),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    fn stop(mut self) {
        self.worker.take().unwrap().shutdown();
        let _ = self.stop.take().unwrap().send(());
        self.thread.take().unwrap().join().unwrap();
    }
}

struct Api<'a> {
    s: &'a Server,
    c: Client,
}

impl Api<'_> {
    fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.c.get(self.s.url(path)).bearer_auth(TOKEN).send().unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.c.post(self.s.url(path)).bearer_auth(TOKEN).json(&body).send().unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn wait_pending(&self, run: &str) -> Value {
        wait(|| {
            let (_, list) = self.get(&format!("/api/checkpoints?state=pending&run_id={run}"));
            list.as_array().and_then(|l| l.first().cloned())
        })
    }

    fn wait_status(&self, run: &str, status: &str) -> Value {
        wait(|| {
            let (_, r) = self.get(&format!("/api/runs/{run}"));
            (r["status"] == status).then_some(r)
        })
    }
}

fn wait<T>(mut f: impl FnMut() -> Option<T>) -> T {
    let start = Instant::now();
    loop {
        if let Some(v) = f() {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "timed out");
        std::thread::sleep(Duration::from_millis(25));
    }
}

struct Fixture {
    dir: tempfile::TempDir,
    cfg: RunConfig,
}

fn fixture(seed: u64) -> Fixture {
    let market = SyntheticMarket::generate(&SyntheticSpec {
        tickers: 120,
        seed,
        ..SyntheticSpec::default()
    });
    let dir = tempfile::tempdir().unwrap();
    market.write_fixture_dir(&dir.path().join("data")).unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        format!("universe_file = \"data/universe.toml\"\nas_of = \"{}\"\nseed = {seed}\nout_dir = \"runs\"\n", market.spec.as_of),
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    Fixture { dir, cfg }
}

impl Fixture {
    fn runs(&self) -> PathBuf {
        self.dir.path().join("runs")
    }
    fn create_run(&self) -> String {
        Engine::new(self.runs(), Secrets::default()).create_run(&self.cfg).unwrap().run_id
    }
}

#[test]
fn bearer_token_is_required() {
    let f = fixture(31);
    std::fs::create_dir_all(f.runs()).unwrap();
    let s = Server::start(&f.runs(), None);
    let c = Client::new();
    assert_eq!(c.get(s.url("/api/runs")).send().unwrap().status(), StatusCode::UNAUTHORIZED);
    assert_eq!(c.get(s.url("/api/runs")).bearer_auth("nope").send().unwrap().status(), StatusCode::UNAUTHORIZED);
    let r = c
        .post(s.url("/api/checkpoints/x--cp01/decision"))
        .json(&json!({"verdict": "approve", "reviewer": "ana"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let api = Api { s: &s, c };
    assert_eq!(api.get("/api/runs"), (StatusCode::OK, json!([])));
    assert_eq!(api.get("/api/checkpoints?state=pending"), (StatusCode::OK, json!([])));
    assert_eq!(api.get("/api/runs/run-20250606-999").0, StatusCode::NOT_FOUND);
    s.stop();
}

fn stage_dirs(runs: &Path, run: &str) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(runs.join(run))
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("stage-"))
        .collect();
    v.sort();
    v
}

#[test]
fn review_protocol_over_http() {
    let f = fixture(32);
    let run = f.create_run();
    let s = Server::start(&f.runs(), None);
    let api = Api { s: &s, c: Client::new() };

    // postmortem: approve
    let cp = api.wait_pending(&run);
    assert_eq!(cp["stage"], "postmortem");
    assert_eq!(stage_dirs(&f.runs(), &run), ["stage-1-postmortem"]);
    let (st, run_view) = api.get(&format!("/api/runs/{run}"));
    assert_eq!(st, StatusCode::OK);
    assert_eq!(run_view["status"], "awaiting-review");
    let id = cp["checkpoint_id"].as_str().unwrap().to_string();
    let (st, body) = api.post(&format!("/api/checkpoints/{id}/decision"), json!({"verdict": "approve", "reviewer": "ana"}));
    assert_eq!(st, StatusCode::OK, "{body}");
    assert_eq!(body["state"], "approved");
    // terminal states are immutable
    let (st, _) = api.post(&format!("/api/checkpoints/{id}/decision"), json!({"verdict": "reject", "reviewer": "bo"}));
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(api.get(&format!("/api/checkpoints/{id}")).1["decided_by"], "ana");

    // screening: reject, then an under-bound edit is refused, then approve the rerun
    let cp = api.wait_pending(&run);
    assert_eq!(cp["stage"], "screening");
    assert_eq!(stage_dirs(&f.runs(), &run), ["stage-1-postmortem", "stage-2-screening"]);
    let id = cp["checkpoint_id"].as_str().unwrap().to_string();
    api.post(&format!("/api/checkpoints/{id}/decision"), json!({"verdict": "reject", "reviewer": "ana", "note": "again"}));
    let cp2 = wait(|| {
        let c = api.wait_pending(&run);
        (c["checkpoint_id"] != id.as_str()).then_some(c)
    });
    assert_eq!(cp2["stage"], "screening");
    assert_eq!(cp2["attempt"], 2);
    let id2 = cp2["checkpoint_id"].as_str().unwrap().to_string();
    let full = api.get(&format!("/api/checkpoints/{id2}")).1;
    let mut short = full["report"].clone();
    short["candidates"]["tickers"].as_array_mut().unwrap().truncate(40);
    let (st, body) = api.post(
        &format!("/api/checkpoints/{id2}/decision"),
        json!({"verdict": "edit", "reviewer": "ana", "edited_report": short}),
    );
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("50..=100"), "{body}");
    let (st, _) = api.post(&format!("/api/checkpoints/{id2}/decision"), json!({"verdict": "edit", "reviewer": "ana"}));
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = api.post(&format!("/api/checkpoints/{id2}/decision"), json!({"verdict": "accumulate", "reviewer": "ana"}));
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    api.post(&format!("/api/checkpoints/{id2}/decision"), json!({"verdict": "approve", "reviewer": "ana"}));

    // analysis: identical edit; timing: approve
    let cp = api.wait_pending(&run);
    assert_eq!(cp["stage"], "analysis");
    let id = cp["checkpoint_id"].as_str().unwrap();
    let (st, body) = api.post(
        &format!("/api/checkpoints/{id}/decision"),
        json!({"verdict": "edit", "reviewer": "ana", "edited_report": cp["report"]}),
    );
    assert_eq!(st, StatusCode::OK, "{body}");
    assert_eq!(body["state"], "edited");
    let cp = api.wait_pending(&run);
    assert_eq!(cp["stage"], "timing");
    api.post(&format!("/api/checkpoints/{}/decision", cp["checkpoint_id"].as_str().unwrap()), json!({"verdict": "approve", "reviewer": "ana"}));

    // portfolio waits for publish
    api.wait_status(&run, "awaiting-publish");
    assert_eq!(api.get(&format!("/api/runs/{run}/allocation")).0, StatusCode::NOT_FOUND);
    let (st, body) = api.post(&format!("/api/runs/{run}/publish"), json!({"reviewer": "ana"}));
    assert_eq!(st, StatusCode::OK, "{body}");
    assert_eq!(body["status"], "completed");
    let (st, alloc) = api.get(&format!("/api/runs/{run}/allocation"));
    assert_eq!(st, StatusCode::OK);
    let w: f64 = alloc["positions"].as_array().unwrap().iter().map(|p| p["weight"].as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() <= 1e-9);
    let (st, _) = api.post(&format!("/api/runs/{run}/publish"), json!({"reviewer": "ana"}));
    assert_eq!(st, StatusCode::CONFLICT);

    let (_, detail) = api.get(&format!("/api/runs/{run}"));
    let states: Vec<&str> = detail["checkpoints"].as_array().unwrap().iter().map(|c| c["state"].as_str().unwrap()).collect();
    assert_eq!(states, ["approved", "rejected", "approved", "edited", "approved"]);
    s.stop();
}

#[test]
fn pending_list_spans_runs_and_survives_restart() {
    let f = fixture(33);
    let a = f.create_run();
    let b = f.create_run();
    let s = Server::start(&f.runs(), None);
    let api = Api { s: &s, c: Client::new() };
    api.wait_pending(&a);
    api.wait_pending(&b);
    let (_, all) = api.get("/api/checkpoints?state=pending");
    assert_eq!(all.as_array().unwrap().len(), 2);
    let first = all[0]["checkpoint_id"].as_str().unwrap().to_string();
    api.post(&format!("/api/checkpoints/{first}/decision"), json!({"verdict": "approve", "reviewer": "ana"}));
    let (_, all) = api.get("/api/checkpoints?state=pending");
    let remaining: Vec<&str> = all.as_array().unwrap().iter().map(|c| c["checkpoint_id"].as_str().unwrap()).collect();
    assert!(!remaining.contains(&first.as_str()));
    let survivor = if first.starts_with(&a) { b.clone() } else { a.clone() };
    let pending_before = api.wait_pending(&survivor);
    s.stop();

    // restart: the pending checkpoint is untouched and can still be decided
    let s = Server::start(&f.runs(), None);
    let api = Api { s: &s, c: Client::new() };
    let pending_after = api.wait_pending(&survivor);
    assert_eq!(pending_before, pending_after);
    let id = pending_after["checkpoint_id"].as_str().unwrap();
    let (st, _) = api.post(&format!("/api/checkpoints/{id}/decision"), json!({"verdict": "approve", "reviewer": "ana"}));
    assert_eq!(st, StatusCode::OK);
    let next = wait(|| {
        let c = api.wait_pending(&survivor);
        (c["checkpoint_id"] != id).then_some(c)
    });
    assert_eq!(next["stage"], "screening");
    s.stop();
}

#[test]
fn static_assets_are_served_without_token() {
    let f = fixture(34);
    std::fs::create_dir_all(f.runs()).unwrap();
    let assets = f.dir.path().join("console");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<!doctype html><title>console</title>").unwrap();
    let s = Server::start(&f.runs(), Some(assets));
    let r = Client::new().get(s.url("/")).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert!(r.text().unwrap().contains("console"));
    assert_eq!(Client::new().get(s.url("/api/runs")).send().unwrap().status(), StatusCode::UNAUTHORIZED);
    s.stop();
}
