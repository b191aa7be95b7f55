//! Subcommands of the `equicrew` binary.
//!
//! Exit codes: 0 ok, 1 configuration or environment, 2 market data, 3 pipeline,
//! 4 evaluation, 64 usage.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use equicrew_core::config::{BackendKind, ConfigError, GatewaySettings, RunConfig, Secrets, UniverseFile};
use equicrew_core::evaluation::{evaluate, fetch_week_prices, EvaluationError, WeekInput};
use equicrew_core::market_data::{fetch_price_history, pin_snapshot, DataError, DiskCache, SnapshotRequest};
use equicrew_core::quant::{compute_metric_vector, MetricConfig, MetricValue};
use equicrew_core::run::{Engine, PipelineError, RunState, RunStatus};
use equicrew_core::synthetic::{SyntheticMarket, SyntheticSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("cannot evaluate: {0}")]
    Unpriceable(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl CliError {
    pub const USAGE: i32 = 64;

    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => Self::USAGE,
            CliError::Config(_) | CliError::Bind { .. } => 1,
            CliError::Data(_) => 2,
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Evaluation(_) | CliError::Unpriceable(_) => 4,
            CliError::Io { .. } => 3,
        }
    }
}

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "equicrew", version, about = "Multi-agent weekly equity pipeline with human review")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pin price history and headlines for a universe as of a date; prints the snapshot id.
    Snapshot(SnapshotArgs),
    /// Create a run and advance it until it completes or waits for review.
    Run(RunArgs),
    /// Resume a failed or paused run.
    Resume(ResumeArgs),
    /// Serve the review API and advance runs in the background.
    Serve(ServeArgs),
    /// Evaluate published allocations week by week against the benchmarks.
    Evaluate(EvaluateArgs),
    /// Print the metric vector of one ticker.
    Metrics(MetricsArgs),
    /// Write a synthetic fixture universe and a run configuration.
    GenFixtures(GenFixturesArgs),
}

#[derive(Debug, Args)]
pub struct SnapshotArgs {
    /// Run configuration supplying the universe and as-of date.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Universe file (overrides the configuration).
    #[arg(long)]
    pub universe: Option<PathBuf>,
    /// As-of date, YYYY-MM-DD (overrides the configuration).
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
    /// Directory receiving `<snapshot-id>/`.
    #[arg(long, default_value = "snapshots")]
    pub out_dir: PathBuf,
    /// Response cache; defaults to `<out-dir>/cache`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Approve every checkpoint and publish without a reviewer.
    #[arg(long)]
    pub auto_approve: bool,
    /// Seed for scripted agents.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Agent backend.
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Root directory for run directories.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// As-of date, YYYY-MM-DD (overrides the configuration).
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
    /// A previous run directory whose published allocation supplies prior holdings.
    #[arg(long)]
    pub prior_run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    pub run_id: String,
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Address to listen on, e.g. 127.0.0.1:8787.
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Runs to evaluate, in any order; each contributes the week after its as-of date.
    pub run_ids: Vec<String>,
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Where report.json, growth.csv and riskreturn.csv go; defaults to `<out-dir>/evaluation`.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub ticker: String,
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub universe: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenFixturesArgs {
    /// Directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub tickers: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "scripted" => Ok(BackendKind::Scripted),
        "chat" => Ok(BackendKind::Chat),
        other => Err(format!("unknown backend {other:?} (scripted or chat)")),
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(io_err(format!("resolving {}", p.display())))
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(&absolute(path)?)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Snapshot(a) => cmd_snapshot(a),
        Command::Run(a) => cmd_run(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::GenFixtures(a) => cmd_gen_fixtures(a),
    }
}

/// Universe, as-of date and pipeline windows from flags, falling back to a config file.
fn universe_and_date(
    config: Option<&Path>,
    universe: Option<&Path>,
    as_of: Option<NaiveDate>,
) -> Result<(UniverseFile, NaiveDate, RunConfig), CliError> {
    let cfg = config.map(load_config).transpose()?;
    let universe_path = match (universe, &cfg) {
        (Some(u), _) => absolute(u)?,
        (None, Some(c)) => c.universe_file.clone(),
        (None, None) => return Err(CliError::Usage("give --universe or --config".into())),
    };
    let as_of = as_of
        .or(cfg.as_ref().map(|c| c.as_of))
        .ok_or_else(|| CliError::Usage("give --as-of or --config".into()))?;
    // a universe that does not parse is a data problem here, not a run-config one
    let universe = UniverseFile::load(&universe_path).map_err(|e| CliError::Data(DataError::InvalidData(e.to_string())))?;
    let mut cfg = cfg.unwrap_or_else(|| run_config_defaults(&universe_path, as_of));
    cfg.as_of = as_of;
    Ok((universe, as_of, cfg))
}

fn run_config_defaults(universe: &Path, as_of: NaiveDate) -> RunConfig {
    let text = format!("universe_file = {:?}\nas_of = \"{as_of}\"\n", universe.display().to_string());
    RunConfig::parse(&text, Path::new("<defaults>")).expect("minimal config parses")
}

fn cmd_snapshot(a: SnapshotArgs) -> Result<(), CliError> {
    let (universe, as_of, cfg) = universe_and_date(a.config.as_deref(), a.universe.as_deref(), a.as_of)?;
    let provider = universe.build_provider(&Secrets::from_env())?;
    let cache_dir = a.cache_dir.unwrap_or_else(|| a.out_dir.join("cache"));
    let cache = DiskCache::new(&cache_dir);
    let request = SnapshotRequest {
        universe: universe.tickers.clone(),
        benchmarks: universe.benchmarks.clone(),
        as_of,
        window_days: cfg.pipeline.window_days,
        lookback_days: cfg.pipeline.lookback_days,
    };
    let staging = a.out_dir.join(format!(".staging-{}", std::process::id()));
    let result = pin_snapshot(provider.as_ref(), Some(&cache), &request, &staging);
    let snapshot = match result {
        Ok(s) => s,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            if let DataError::PartialFetchFailure(list) = &e {
                for (t, why) in list {
                    eprintln!("{t}: {why}");
                }
            }
            return Err(e.into());
        }
    };
    let dest = a.out_dir.join(snapshot.id());
    if dest.exists() {
        std::fs::remove_dir_all(&staging).map_err(io_err("removing staging directory"))?;
    } else {
        std::fs::rename(&staging, &dest).map_err(io_err(format!("writing {}", dest.display())))?;
    }
    out!("{}", snapshot.id());
    eprintln!("digest {}", snapshot.digest());
    Ok(())
}

fn engine_for(out_dir: PathBuf) -> Engine {
    Engine::new(out_dir, Secrets::from_env())
}

fn describe(state: &RunState, engine: &Engine, bind: &str) {
    match state.status {
        RunStatus::Completed => {
            out!("status: completed");
            out!("allocation: {}", engine.workspace.run_dir(&state.run_id).join("published/allocation.csv").display());
        }
        RunStatus::AwaitingReview => {
            let cp = state.current_stage().and_then(|s| state.stages[&s].checkpoint_id.clone()).unwrap_or_default();
            out!("status: awaiting-review");
            out!("checkpoint: http://{bind}/api/checkpoints/{cp}");
        }
        RunStatus::AwaitingPublish => {
            out!("status: awaiting-publish");
            out!("publish: POST http://{bind}/api/runs/{}/publish", state.run_id);
        }
        other => out!("status: {}", serde_json::to_value(other).unwrap_or_default().as_str().unwrap_or("?")),
    }
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    if a.auto_approve {
        cfg.auto_approve = true;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.backend {
        cfg.backend = b;
    }
    if let Some(d) = a.out_dir {
        cfg.out_dir = absolute(&d)?;
    }
    if let Some(d) = a.as_of {
        cfg.as_of = d;
    }
    if let Some(p) = a.prior_run {
        cfg.prior_run = Some(absolute(&p)?);
    }
    cfg.require_secrets(&Secrets::from_env())?;
    let engine = engine_for(cfg.out_dir.clone());
    let state = engine.create_run(&cfg)?;
    out!("{}", state.run_id);
    let state = match engine.advance(&state.run_id) {
        Ok(s) => s,
        Err(e) => {
            if let PipelineError::Stage { stage, .. } = &e {
                eprintln!("stage {stage} failed; fix the cause and run `equicrew resume {}`", state.run_id);
            }
            return Err(e.into());
        }
    };
    describe(&state, &engine, &cfg.gateway.bind);
    Ok(())
}

fn out_dir_of(config: Option<&Path>, out_dir: Option<PathBuf>) -> Result<(PathBuf, GatewaySettings), CliError> {
    let cfg = config.map(load_config).transpose()?;
    let gateway = cfg.as_ref().map(|c| c.gateway.clone()).unwrap_or_default();
    let dir = match (out_dir, cfg) {
        (Some(d), _) => absolute(&d)?,
        (None, Some(c)) => c.out_dir,
        (None, None) => absolute(Path::new("runs"))?,
    };
    Ok((dir, gateway))
}

fn cmd_resume(a: ResumeArgs) -> Result<(), CliError> {
    let (dir, gateway) = out_dir_of(a.config.as_deref(), a.out_dir)?;
    let engine = engine_for(dir);
    let state = engine.resume(&a.run_id)?;
    out!("{}", state.run_id);
    describe(&state, &engine, &gateway.bind);
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let (dir, gateway) = out_dir_of(a.config.as_deref(), a.out_dir)?;
    let token = std::env::var(&gateway.token_env)
        .ok()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| CliError::Config(ConfigError::Invalid(format!("environment variable {} is not set", gateway.token_env))))?;
    let bind = a.bind.unwrap_or(gateway.bind.clone());
    std::fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let engine = Arc::new(engine_for(dir));
    let rt = tokio::runtime::Runtime::new().map_err(io_err("starting runtime"))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await.map_err(|source| CliError::Bind {
            addr: bind.clone(),
            source,
        })?;
        let addr = listener.local_addr().map_err(io_err("reading bound address"))?;
        let worker = equicrew_gateway::Worker::spawn(engine.clone(), Duration::from_millis(gateway.poll_interval_ms));
        let app = equicrew_gateway::router(
            equicrew_gateway::AppState {
                engine,
                token: token.into(),
            },
            gateway.static_dir.clone(),
        );
        out!("listening on http://{addr}");
        equicrew_gateway::serve(listener, app, shutdown_signal())
            .await
            .map_err(io_err("serving"))?;
        tokio::task::spawn_blocking(move || worker.shutdown()).await.ok();
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    if a.run_ids.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one run id".into()));
    }
    let (dir, _) = out_dir_of(a.config.as_deref(), a.out_dir)?;
    let engine = engine_for(dir.clone());
    let secrets = Secrets::from_env();
    let mut runs = Vec::new();
    for id in &a.run_ids {
        let state = engine.workspace.state(id)?;
        runs.push(state);
    }
    runs.sort_by_key(|s| (s.as_of, s.run_id.clone()));

    let mut weeks = Vec::new();
    let mut problems = Vec::new();
    let mut benchmarks: Option<Vec<String>> = None;
    for state in &runs {
        let Some(allocation) = engine.workspace.published_allocation(&state.run_id)? else {
            problems.push(format!("{} has no published allocation", state.run_id));
            continue;
        };
        let run_dir = engine.workspace.run_dir(&state.run_id);
        let universe: UniverseFile = serde_json::from_slice(
            &std::fs::read(run_dir.join("universe.json")).map_err(io_err(format!("reading {}/universe.json", state.run_id)))?,
        )
        .map_err(|e| CliError::Data(DataError::InvalidData(e.to_string())))?;
        let provider = universe.build_provider(&secrets)?;
        let benches = benchmarks.get_or_insert_with(|| universe.benchmarks.clone()).clone();
        let start = state.as_of;
        let end = start + chrono::Duration::days(7);
        let mut symbols: Vec<String> = allocation.positions.iter().map(|p| p.symbol.clone()).collect();
        symbols.extend(benches.iter().cloned());
        let (prices, missing) = fetch_week_prices(provider.as_ref(), &symbols, start, end);
        let missing_positions: Vec<&String> = missing.iter().filter(|m| !benches.contains(m)).collect();
        if !missing_positions.is_empty() {
            problems.push(format!(
                "{} ({start} to {end}) cannot price {}",
                state.run_id,
                missing_positions.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ));
            continue;
        }
        weeks.push(WeekInput {
            label: state.run_id.clone(),
            allocation,
            start,
            end,
            prices,
        });
    }
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("{p}");
        }
        return Err(CliError::Unpriceable(format!("{} run(s) could not be priced", problems.len())));
    }
    let report = evaluate(&weeks, &benchmarks.unwrap_or_default())?;
    let report_dir = a.report_dir.unwrap_or_else(|| dir.join("evaluation"));
    std::fs::create_dir_all(&report_dir).map_err(io_err(format!("creating {}", report_dir.display())))?;
    report.write_to(&report_dir)?;
    for (k, why) in &report.excluded {
        eprintln!("excluded {k}: {why}");
    }
    out!("{}", report.table().trim_end());
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CliError> {
    let (universe, as_of, cfg) = universe_and_date(a.config.as_deref(), a.universe.as_deref(), a.as_of)?;
    let provider = universe.build_provider(&Secrets::from_env())?;
    let window = cfg.pipeline.window_days;
    let series = fetch_price_history(provider.as_ref(), None, &a.ticker, as_of, window)?;
    let bench_name = &universe.benchmarks[0];
    let bench = fetch_price_history(provider.as_ref(), None, bench_name, as_of, window)?;
    let windows: MetricConfig = cfg.windows.clone();
    let v = compute_metric_vector(&series, &bench, &windows).map_err(|e| CliError::Data(DataError::InvalidData(e.to_string())))?;
    out!("{} as of {as_of} ({} sessions, beta against {bench_name})", a.ticker, series.len());
    for (name, value) in v.iter() {
        match value {
            MetricValue::Available(x) => out!("{name:<17} {x:>24}"),
            MetricValue::Unavailable { unavailable } => out!("{name:<17} {:>24}  {unavailable}", "unavailable"),
        }
    }
    Ok(())
}

fn cmd_gen_fixtures(a: GenFixturesArgs) -> Result<(), CliError> {
    let mut spec = SyntheticSpec {
        tickers: a.tickers,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    if let Some(d) = a.as_of {
        spec.as_of = d;
    }
    let market = SyntheticMarket::generate(&spec);
    market.write_fixture_dir(&a.out.join("data"))?;
    let text = format!(
        "# Generated fixture run. Later weeks: --as-of {} and so on, seven days apart.\n\
         universe_file = \"data/universe.toml\"\n\
         as_of = \"{}\"\n\
         backend = \"scripted\"\n\
         seed = {}\n\
         out_dir = \"runs\"\n",
        spec.as_of + chrono::Duration::days(7),
        spec.as_of,
        a.seed
    );
    let path = a.out.join("run.toml");
    std::fs::write(&path, text).map_err(io_err(format!("writing {}", path.display())))?;
    out!("{}", path.display());
    Ok(())
}

