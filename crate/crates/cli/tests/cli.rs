//! Behaviour of the `equicrew` binary: exit codes, flags, files and the served API.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use equicrew_core::market_data::{read_series_csv, write_series_csv};
use equicrew_quant::{compute_metric_vector, MetricConfig, MetricValue, PriceBar, PriceSeries};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_equicrew"));
    c.env_remove("CHAT_API_KEY")
        .env_remove("CHAT_API_URL")
        .env_remove("GATEWAY_TOKEN")
        .env("RUST_LOG", "error");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn equicrew")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn assert_code(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

fn gen(tickers: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    let o = run_in(dir.path(), &["gen-fixtures", "--out", ".", "--tickers", &tickers.to_string()]);
    assert_code(&o, 0);
    dir
}

fn first_line(o: &Output) -> String {
    stdout(o).lines().next().unwrap_or_default().to_string()
}

#[test]
fn help_lists_the_documented_flags() {
    let o = run_in(Path::new("."), &["run", "--help"]);
    assert_code(&o, 0);
    let text = stdout(&o);
    for flag in ["--config", "--auto-approve", "--seed", "--backend", "--out-dir"] {
        assert!(text.contains(flag), "run --help lacks {flag}:\n{text}");
    }
    let o = run_in(Path::new("."), &["serve", "--help"]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("--bind"));
    let o = run_in(Path::new("."), &["--help"]);
    for sub in ["snapshot", "run", "resume", "serve", "evaluate", "metrics", "gen-fixtures"] {
        assert!(stdout(&o).contains(sub), "top-level help lacks {sub}");
    }
}

#[test]
fn usage_errors_exit_64() {
    assert_code(&run_in(Path::new("."), &["bogus"]), 64);
    assert_code(&run_in(Path::new("."), &["run"]), 64);
    assert_code(&run_in(Path::new("."), &["run", "-c", "x.toml", "--backend", "oracle"]), 64);
    assert_code(&run_in(Path::new("."), &["evaluate"]), 64);
}

#[test]
fn auto_approved_run_publishes_and_is_deterministic() {
    let a = gen(80);
    let b = gen(80);
    let oa = run_in(a.path(), &["run", "-c", "run.toml", "--auto-approve"]);
    let ob = run_in(b.path(), &["run", "-c", "run.toml", "--auto-approve"]);
    assert_code(&oa, 0);
    assert_code(&ob, 0);
    assert!(stdout(&oa).contains("status: completed"));
    let id = first_line(&oa);
    assert_eq!(id, first_line(&ob));
    let csv = |d: &TempDir| std::fs::read(d.path().join("runs").join(&id).join("published/allocation.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));

    // a different seed may reorder but must still publish
    let oc = run_in(a.path(), &["run", "-c", "run.toml", "--auto-approve", "--seed", "99"]);
    assert_code(&oc, 0);
    assert_ne!(first_line(&oc), id);
}

#[test]
fn run_without_auto_approve_pauses_at_the_first_checkpoint() {
    let d = gen(70);
    let o = run_in(d.path(), &["run", "-c", "run.toml"]);
    assert_code(&o, 0);
    let text = stdout(&o);
    assert!(text.contains("status: awaiting-review"), "{text}");
    assert!(text.contains("/api/checkpoints/"), "{text}");
    let run = d.path().join("runs").join(first_line(&o));
    assert!(run.join("stage-1-postmortem").exists());
    assert!(!run.join("stage-2-screening").exists());
}

#[test]
fn chat_backend_without_key_exits_1_and_creates_nothing() {
    let d = gen(60);
    let o = run_in(d.path(), &["run", "-c", "run.toml", "--backend", "chat"]);
    assert_code(&o, 1);
    assert!(stderr(&o).contains("CHAT_API_KEY"), "{}", stderr(&o));
    let runs = d.path().join("runs");
    let count = std::fs::read_dir(&runs).map(|r| r.count()).unwrap_or(0);
    assert_eq!(count, 0);
}

#[test]
fn stage_failure_exits_3_and_names_the_stage() {
    let d = gen(30);
    let o = run_in(d.path(), &["run", "-c", "run.toml", "--auto-approve"]);
    assert_code(&o, 3);
    assert!(stderr(&o).contains("screening"), "{}", stderr(&o));
    // resume hits the same wall
    let o = run_in(d.path(), &["resume", &first_line(&o), "-c", "run.toml"]);
    assert_code(&o, 3);
}

#[test]
fn snapshot_ids_are_stable_and_bad_universes_exit_2() {
    let d = gen(60);
    let a = run_in(d.path(), &["snapshot", "-c", "run.toml", "--out-dir", "snaps"]);
    let b = run_in(d.path(), &["snapshot", "-c", "run.toml", "--out-dir", "snaps"]);
    assert_code(&a, 0);
    assert_code(&b, 0);
    assert_eq!(first_line(&a), first_line(&b));
    assert!(d.path().join("snaps").join(first_line(&a)).join("manifest.json").exists());

    std::fs::write(d.path().join("bad.toml"), "tickers = 5\n").unwrap();
    let o = run_in(d.path(), &["snapshot", "--universe", "bad.toml", "--as-of", "2025-06-06"]);
    assert_code(&o, 2);

    // ticker absent from the fixture
    let o = run_in(d.path(), &["metrics", "NOPE", "-c", "run.toml"]);
    assert_code(&o, 2);
}

fn parse_metrics(text: &str) -> BTreeMap<String, Option<f64>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap().to_string();
            let v = parts.next().unwrap();
            (name, if v == "unavailable" { None } else { Some(v.parse().unwrap()) })
        })
        .collect()
}

fn expected_metrics(data: &Path, ticker: &str, bench: &str, as_of: &str, window: usize) -> BTreeMap<String, Option<f64>> {
    let as_of = as_of.parse().unwrap();
    let load = |t: &str| {
        let bars = read_series_csv(&std::fs::read_to_string(data.join("prices").join(format!("{t}.csv"))).unwrap()).unwrap();
        let kept: Vec<PriceBar> = bars.into_iter().filter(|b| b.date <= as_of).collect();
        let start = kept.len().saturating_sub(window);
        PriceSeries::new(t, kept[start..].to_vec(), as_of).unwrap()
    };
    let v = compute_metric_vector(&load(ticker), &load(bench), &MetricConfig::default()).unwrap();
    v.iter()
        .map(|(m, x)| {
            let x = match x {
                MetricValue::Available(x) => Some(*x),
                MetricValue::Unavailable { .. } => None,
            };
            (m.to_string(), x)
        })
        .collect()
}

#[test]
fn metrics_prints_fourteen_exact_rows() {
    let d = gen(60);
    let o = run_in(d.path(), &["metrics", "XAAC", "-c", "run.toml"]);
    assert_code(&o, 0);
    let got = parse_metrics(&stdout(&o));
    assert_eq!(got.len(), 14);
    assert!(got.values().all(Option::is_some));
    // the run window keeps the latest 90 sessions
    let want = expected_metrics(&d.path().join("data"), "XAAC", "SPY", "2025-06-06", 90);
    assert_eq!(got, want);
}

#[test]
fn metrics_on_a_short_history_marks_what_it_cannot_compute() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(data.join("prices")).unwrap();
    let start: chrono::NaiveDate = "2025-06-02".parse().unwrap();
    let bars = |base: f64, step: f64| -> Vec<PriceBar> {
        (0..6)
            .map(|i| {
                let p = base + step * i as f64 + if i % 2 == 0 { 0.3 } else { -0.2 };
                let mut b = PriceBar::flat(start + chrono::Duration::days(i), p, 1_000_000 + 5_000 * i as u64);
                b.high = p + 0.5;
                b.low = p - 0.5;
                b
            })
            .collect()
    };
    std::fs::write(data.join("prices/AAA.csv"), write_series_csv(&bars(50.0, 0.4)).unwrap()).unwrap();
    std::fs::write(data.join("prices/SPY.csv"), write_series_csv(&bars(400.0, 1.0)).unwrap()).unwrap();
    std::fs::write(
        data.join("universe.toml"),
        "tickers = [\"AAA\"]\nbenchmarks = [\"SPY\"]\n[provider]\nkind = \"fixture\"\npath = \".\"\n",
    )
    .unwrap();
    let o = run_in(dir.path(), &["metrics", "AAA", "--universe", "data/universe.toml", "--as-of", "2025-06-07"]);
    assert_code(&o, 0);
    let got = parse_metrics(&stdout(&o));
    assert_eq!(got.len(), 14);
    assert!(got["return_5d"].is_some());
    assert!(got["price_vs_ma5"].is_some());
    assert!(got["return_21d"].is_none());
    assert!(got["rsi_14"].is_none());
    assert!(stdout(&o).contains("unavailable"));
    assert_eq!(got, expected_metrics(&data, "AAA", "SPY", "2025-06-07", 90));
}

fn add_days(date: &str, days: i64) -> String {
    (date.parse::<chrono::NaiveDate>().unwrap() + chrono::Duration::days(days)).to_string()
}

/// Weekly portfolio return straight from the fixture CSVs and the published weights.
fn oracle_week_return(data: &Path, allocation_csv: &Path, start: &str, end: &str) -> f64 {
    let price = |sym: &str, on: &str| -> f64 {
        let on: chrono::NaiveDate = on.parse().unwrap();
        let text = std::fs::read_to_string(data.join("prices").join(format!("{sym}.csv"))).unwrap();
        let mut last = None;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let d: chrono::NaiveDate = cols[0].parse().unwrap();
            if d <= on && d > on - chrono::Duration::days(7) {
                last = Some(cols[5].parse::<f64>().unwrap());
            }
        }
        last.unwrap()
    };
    csv_rows(allocation_csv)
        .iter()
        .map(|row| {
            let w: f64 = row[1].parse().unwrap();
            w * (price(&row[0], end) / price(&row[0], start) - 1.0)
        })
        .sum::<f64>()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').take(2).map(str::to_string).collect())
        .collect()
}

#[test]
fn evaluate_over_eight_chained_weeks() {
    let d = gen(90);
    let base = "2025-06-06";
    let mut ids = Vec::new();
    let mut prior: Option<PathBuf> = None;
    for k in 0..8 {
        let as_of = add_days(base, 7 * k);
        let mut args = vec!["run".to_string(), "-c".into(), "run.toml".into(), "--auto-approve".into(), "--as-of".into(), as_of];
        if let Some(p) = &prior {
            args.push("--prior-run".into());
            args.push(p.display().to_string());
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = run_in(d.path(), &args);
        assert_code(&o, 0);
        let id = first_line(&o);
        prior = Some(d.path().join("runs").join(&id));
        ids.push(id);
    }
    let mut args = vec!["evaluate", "-c", "run.toml"];
    // order on the command line does not matter
    let mut shuffled = ids.clone();
    shuffled.reverse();
    args.extend(shuffled.iter().map(String::as_str));
    let o = run_in(d.path(), &args);
    assert_code(&o, 0);

    let report: Value = serde_json::from_slice(&std::fs::read(d.path().join("runs/evaluation/report.json")).unwrap()).unwrap();
    let weekly = report["weekly"].as_array().unwrap();
    assert_eq!(weekly.len(), 8);
    for (k, (w, id)) in weekly.iter().zip(&ids).enumerate() {
        let start = add_days(base, 7 * k as i64);
        let end = add_days(&start, 7);
        let alloc = d.path().join("runs").join(id).join("published/allocation.csv");
        let want = oracle_week_return(&d.path().join("data"), &alloc, &start, &end);
        let got = w["portfolio_return"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-12, "week {k}: {got} vs {want}");
    }

    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["portfolio", "dia", "qqq", "spy"]);
    for r in &rows {
        let cum: f64 = r[1].parse().unwrap();
        let win: f64 = r[2].parse().unwrap();
        assert!((cum - report["cumulative"][r[0]].as_f64().unwrap()).abs() <= 5e-7);
        assert!((win - report["series_win_rates"][r[0]].as_f64().unwrap()).abs() <= 5e-5);
    }
    let growth = std::fs::read_to_string(d.path().join("runs/evaluation/growth.csv")).unwrap();
    assert_eq!(growth.lines().count(), 10);
    assert_eq!(growth.lines().next().unwrap(), "week,portfolio,dia,qqq,spy");
}

#[test]
fn evaluate_refuses_unpublished_runs() {
    let d = gen(60);
    let o = run_in(d.path(), &["run", "-c", "run.toml"]);
    assert_code(&o, 0);
    let o = run_in(d.path(), &["evaluate", "-c", "run.toml", &first_line(&o)]);
    assert_code(&o, 4);
    assert!(stderr(&o).contains("no published allocation"));
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(dir: &Path, token: &str) -> Self {
        let mut child = bin()
            .current_dir(dir)
            .env("GATEWAY_TOKEN", token)
            .args(["serve", "-c", "run.toml", "--bind", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
        Self { child, addr }
    }

    fn terminate(mut self) -> std::process::ExitStatus {
        let st = Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().unwrap();
        assert!(st.success());
        for _ in 0..100 {
            if let Some(s) = self.child.try_wait().unwrap() {
                return s;
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        self.child.kill().ok();
        panic!("server ignored SIGTERM");
    }
}

fn pending(client: &reqwest::blocking::Client, s: &Server, token: &str) -> Vec<Value> {
    let r = client
        .get(format!("{}/api/checkpoints?state=pending", s.addr))
        .bearer_auth(token)
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    r.json::<Vec<Value>>().unwrap()
}

#[test]
fn serve_exposes_the_review_api_and_survives_restart() {
    let d = gen(70);
    let token = "cli-test-token";

    let o = run_in(d.path(), &["serve", "-c", "run.toml", "--bind", "127.0.0.1:0"]);
    assert_code(&o, 1);
    assert!(stderr(&o).contains("GATEWAY_TOKEN"));

    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let busy = taken.local_addr().unwrap().to_string();
    let o = bin()
        .current_dir(d.path())
        .env("GATEWAY_TOKEN", token)
        .args(["serve", "-c", "run.toml", "--bind", &busy])
        .output()
        .unwrap();
    assert_code(&o, 1);

    let o = run_in(d.path(), &["run", "-c", "run.toml"]);
    assert_code(&o, 0);
    let run_id = first_line(&o);

    let client = reqwest::blocking::Client::new();
    let server = Server::start(d.path(), token);
    let r = client.get(format!("{}/api/runs", server.addr)).bearer_auth(token).send().unwrap();
    assert_eq!(r.status(), 200);
    let runs: Vec<Value> = r.json().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0]["run_id"], run_id.as_str());

    let before = pending(&client, &server, token);
    assert_eq!(before.len(), 1);
    let cp = before[0]["checkpoint_id"].as_str().unwrap().to_string();
    let r = client
        .post(format!("{}/api/checkpoints/{cp}/decision", server.addr))
        .json(&serde_json::json!({"verdict": "approve", "reviewer": "ana"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 401);

    let status = server.terminate();
    assert!(status.success(), "{status:?}");

    let server = Server::start(d.path(), token);
    let after = pending(&client, &server, token);
    assert_eq!(after.len(), 1);
    assert_eq!(after[0]["checkpoint_id"], cp.as_str());

    // approving through the restarted server lets the worker move the run on
    let r = client
        .post(format!("{}/api/checkpoints/{cp}/decision", server.addr))
        .bearer_auth(token)
        .json(&serde_json::json!({"verdict": "approve", "reviewer": "ana"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200, "{:?}", r.text());
    let mut next = Vec::new();
    for _ in 0..100 {
        next = pending(&client, &server, token);
        if next.iter().any(|c| c["checkpoint_id"] != cp.as_str()) {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(next.iter().any(|c| c["checkpoint_id"] != cp.as_str()), "no new checkpoint after approval");
    assert!(server.terminate().success());
}
