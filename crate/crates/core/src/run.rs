//! Run directories and the pipeline state machine.
//!
//! ```text
//! runs/<run-id>/
//!   run.json  config.json  universe.json  corpus.json  usage.json  .lock
//!   snapshot/                      pinned market data
//!   stage-N-<name>/                report.json, verdict.json, edited-report.json,
//!                                  rejected-attempt-K.json; allocation.{json,csv} for stage 5
//!   checkpoints/                   <id>.json, index.json, audit.jsonl
//!   transcript/<stage>.attempt-K.jsonl
//!   published/                     allocation.{json,csv} once published
//! ```
//!
//! Every mutation happens under the run's file lock; the API and the worker share
//! nothing but this directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{info, warn};

use crate::agents::{ChatBackend, ChatBackendSettings};
use crate::agents::scripted::ScriptedBackend;
use crate::agents::{bundled_crews, AgentBackend, AgentError, CrewSpec, TokenUsage};
use crate::config::{BackendKind, ConfigError, RunConfig, Secrets, UniverseFile};
use crate::fsutil::{read_json, write_atomic, write_json, FileLock};
use crate::hitl::{AuditEvent, Checkpoint, CheckpointState, CheckpointStore, HitlError, ReviewDecision, Verdict};
use crate::market_data::{
    bundled_corpus, fetch_price_history, load_delisted_corpus, pin_snapshot, DataError, DelistedCorpusEntry, DiskCache,
    Snapshot, SnapshotRequest,
};
use crate::pipeline::stages::{self, analysis_basis, StageContext, StageError};
use crate::pipeline::types::{
    AnalysisShortlist, CrewReport, FailureSignal, PortfolioAllocation, ScreeningShortlist, Stage, TimingSlate,
};
use crate::pipeline::{gates, GateError, MarketView};

pub const AUTO_REVIEWER: &str = "auto";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Created,
    Running,
    AwaitingReview,
    AwaitingPublish,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Pending,
    Running,
    AwaitingReview,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub status: StageStatus,
    pub attempt: u32,
    #[serde(default)]
    pub checkpoint_id: Option<String>,
    /// Downstream stages read the reviewer's edited report.
    #[serde(default)]
    pub edited: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPrior {
    pub symbol: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    #[serde(default)]
    pub stage: Option<Stage>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub status: RunStatus,
    pub as_of: NaiveDate,
    pub seed: u64,
    pub backend: BackendKind,
    pub auto_approve: bool,
    pub snapshot_id: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub stages: BTreeMap<Stage, StageState>,
    pub priors: Vec<String>,
    #[serde(default)]
    pub dropped_priors: Vec<DroppedPrior>,
    #[serde(default)]
    pub error: Option<RunFailure>,
}

impl RunState {
    /// The earliest stage that is not done.
    pub fn current_stage(&self) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| self.stages[s].status != StageStatus::Done)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
    #[error(transparent)]
    Hitl(#[from] HitlError),
    #[error("backend: {0}")]
    Backend(#[from] AgentError),
    #[error("run {0} not found")]
    RunNotFound(String),
    #[error("run {run_id} is {status:?}; cannot {action}")]
    InvalidState {
        run_id: String,
        status: RunStatus,
        action: &'static str,
    },
    #[error("market view: {0}")]
    Market(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PipelineError {
    /// Process exit code for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Backend(AgentError::BackendUnavailable(_)) => 1,
            PipelineError::Data(_) | PipelineError::Market(_) => 2,
            _ => 3,
        }
    }
}

/// Directory holding one sub-directory per run.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    /// `run-YYYYMMDD-NNN`, reserved by creating the directory.
    fn allocate(&self, as_of: NaiveDate) -> io::Result<(String, PathBuf)> {
        fs::create_dir_all(&self.root)?;
        for n in 1..=999 {
            let id = format!("run-{}-{n:03}", as_of.format("%Y%m%d"));
            let dir = self.run_dir(&id);
            match fs::create_dir(&dir) {
                Ok(()) => return Ok((id, dir)),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        Err(io::Error::other(format!("no free run id for {as_of}")))
    }

    pub fn state(&self, run_id: &str) -> Result<RunState, PipelineError> {
        let path = self.run_dir(run_id).join("run.json");
        if !path.is_file() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(PipelineError::RunNotFound(run_id.to_string()));
        }
        Ok(read_json(&path)?)
    }

    /// All runs, sorted by id.
    pub fn list(&self) -> Result<Vec<RunState>, PipelineError> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let path = entry?.path().join("run.json");
            if path.is_file() {
                out.push(read_json::<RunState>(&path)?);
            }
        }
        out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(out)
    }

    pub fn checkpoints(&self, run_id: &str) -> CheckpointStore {
        CheckpointStore::open(&self.run_dir(run_id), run_id)
    }

    /// Locates a checkpoint from its id (`<run-id>--cpNN`).
    pub fn checkpoint(&self, checkpoint_id: &str) -> Result<Checkpoint, PipelineError> {
        let run_id = checkpoint_id
            .split_once("--")
            .map(|(r, _)| r)
            .ok_or_else(|| HitlError::NotFound(checkpoint_id.to_string()))?;
        self.state(run_id).map_err(|_| HitlError::NotFound(checkpoint_id.to_string()))?;
        Ok(self.checkpoints(run_id).get(checkpoint_id)?)
    }

    /// The published allocation, if the run has one.
    pub fn published_allocation(&self, run_id: &str) -> Result<Option<PortfolioAllocation>, PipelineError> {
        self.state(run_id)?;
        let path = self.run_dir(run_id).join("published").join("allocation.json");
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(read_json(&path)?))
    }
}

fn stage_dir(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(stage.dir_name())
}

fn transcript_path(run_dir: &Path, stage: Stage, attempt: u32) -> PathBuf {
    run_dir.join("transcript").join(format!("{stage}.attempt-{attempt}.jsonl"))
}

/// The report downstream stages consume: the reviewer's edit when there is one.
pub fn effective_report(run_dir: &Path, stage: Stage) -> Result<CrewReport, PipelineError> {
    let dir = stage_dir(run_dir, stage);
    let edited = dir.join("edited-report.json");
    let path = if edited.is_file() { edited } else { dir.join("report.json") };
    Ok(read_json(&path)?)
}

fn payload<T: DeserializeOwned>(run_dir: &Path, stage: Stage) -> Result<T, PipelineError> {
    let report = effective_report(run_dir, stage)?;
    T::deserialize(&report.candidates).map_err(|e| PipelineError::Io(io::Error::new(io::ErrorKind::InvalidData, e)))
}

/// Builds the agent backend a run's configuration asks for.
pub fn backend_for(cfg: &RunConfig, secrets: &Secrets) -> Result<Arc<dyn AgentBackend>, PipelineError> {
    Ok(match cfg.backend {
        BackendKind::Scripted => Arc::new(ScriptedBackend),
        BackendKind::Chat => {
            cfg.require_secrets(secrets)?;
            Arc::new(ChatBackend::new(ChatBackendSettings {
                endpoint: cfg.chat_endpoint(secrets),
                api_key: secrets.chat_api_key.clone().unwrap_or_default(),
                model: cfg.chat.model.clone(),
                temperature: cfg.chat.temperature,
                max_tokens: cfg.chat.max_tokens,
                timeout: Duration::from_secs(cfg.chat.timeout_secs),
                min_interval: Duration::from_millis(cfg.chat.min_interval_ms),
                retry: cfg.chat.retry,
            })?)
        }
    })
}

pub struct Engine {
    pub workspace: Workspace,
    secrets: Secrets,
    crews: BTreeMap<Stage, CrewSpec>,
    backend_override: Option<Arc<dyn AgentBackend>>,
}

struct Loaded {
    dir: PathBuf,
    cfg: RunConfig,
    market: MarketView,
    corpus: Vec<DelistedCorpusEntry>,
}

impl Engine {
    pub fn new(root: impl Into<PathBuf>, secrets: Secrets) -> Self {
        Self {
            workspace: Workspace::new(root),
            secrets,
            crews: bundled_crews(),
            backend_override: None,
        }
    }

    /// Replaces the configured backend for every run (tests, fault injection).
    pub fn with_backend(mut self, backend: Arc<dyn AgentBackend>) -> Self {
        self.backend_override = Some(backend);
        self
    }

    pub fn with_crews(mut self, crews: BTreeMap<Stage, CrewSpec>) -> Self {
        self.crews = crews;
        self
    }

    fn lock(&self, run_id: &str) -> Result<FileLock, PipelineError> {
        self.workspace.state(run_id)?;
        Ok(FileLock::acquire(&self.workspace.run_dir(run_id).join(".lock"))?)
    }

    fn save(&self, state: &mut RunState) -> Result<(), PipelineError> {
        state.updated_at = Utc::now();
        write_json(&self.workspace.run_dir(&state.run_id).join("run.json"), state)?;
        Ok(())
    }

    /// Validates the configuration, pins the snapshot and records a new run.
    /// Nothing is left behind when pinning fails.
    pub fn create_run(&self, cfg: &RunConfig) -> Result<RunState, PipelineError> {
        cfg.validate()?;
        let universe = UniverseFile::load(&cfg.universe_file)?;
        let backend_check = match &self.backend_override {
            Some(_) => Ok(()),
            None => backend_for(cfg, &self.secrets).map(|_| ()),
        };
        backend_check?;
        let corpus = match &cfg.corpus_file {
            Some(p) => load_delisted_corpus(p)?,
            None => bundled_corpus(),
        };
        let provider = universe.build_provider(&self.secrets)?;
        let cache = cfg.cache_dir.as_ref().map(DiskCache::new);

        let mut requested: Vec<String> = cfg.prior_holdings.clone();
        if let Some(prev) = &cfg.prior_run {
            let alloc: PortfolioAllocation = read_json(&prev.join("published").join("allocation.json"))?;
            requested.extend(alloc.positions.into_iter().map(|p| p.symbol));
        }
        let mut seen = BTreeSet::new();
        requested.retain(|s| seen.insert(s.clone()));
        let mut snapshot_universe = universe.tickers.clone();
        let mut priors = Vec::new();
        let mut dropped_priors = Vec::new();
        for p in requested {
            if universe.benchmarks.contains(&p) {
                dropped_priors.push(DroppedPrior {
                    symbol: p,
                    reason: "benchmark tracker, not a candidate".into(),
                });
                continue;
            }
            if !universe.tickers.contains(&p) {
                if let Err(e) = fetch_price_history(provider.as_ref(), cache.as_ref(), &p, cfg.as_of, cfg.pipeline.window_days) {
                    warn!(symbol = %p, error = %e, "dropping prior holding");
                    dropped_priors.push(DroppedPrior {
                        symbol: p,
                        reason: e.to_string(),
                    });
                    continue;
                }
                snapshot_universe.push(p.clone());
            }
            priors.push(p);
        }

        let (run_id, dir) = self.workspace.allocate(cfg.as_of)?;
        let request = SnapshotRequest {
            universe: snapshot_universe,
            benchmarks: universe.benchmarks.clone(),
            as_of: cfg.as_of,
            window_days: cfg.pipeline.window_days,
            lookback_days: cfg.pipeline.lookback_days,
        };
        let snapshot = match pin_snapshot(provider.as_ref(), cache.as_ref(), &request, &dir.join("snapshot")) {
            Ok(s) => s,
            Err(e) => {
                let _ = fs::remove_dir_all(&dir);
                return Err(e.into());
            }
        };
        write_json(&dir.join("config.json"), cfg)?;
        write_json(&dir.join("universe.json"), &universe)?;
        write_json(&dir.join("corpus.json"), &corpus)?;
        let now = Utc::now();
        let mut state = RunState {
            run_id: run_id.clone(),
            status: RunStatus::Created,
            as_of: cfg.as_of,
            seed: cfg.seed,
            backend: cfg.backend,
            auto_approve: cfg.auto_approve,
            snapshot_id: snapshot.id().to_string(),
            created_at: now,
            updated_at: now,
            stages: Stage::ALL
                .into_iter()
                .map(|s| {
                    (
                        s,
                        StageState {
                            status: StageStatus::Pending,
                            attempt: 1,
                            checkpoint_id: None,
                            edited: false,
                            error: None,
                        },
                    )
                })
                .collect(),
            priors,
            dropped_priors,
            error: None,
        };
        self.save(&mut state)?;
        self.audit(&run_id, "run_created", None, "pipeline", None)?;
        info!(run = %run_id, snapshot = %state.snapshot_id, "run created");
        Ok(state)
    }

    fn audit(&self, run_id: &str, event: &str, stage: Option<Stage>, actor: &str, note: Option<String>) -> Result<(), PipelineError> {
        self.workspace.checkpoints(run_id).record_event(AuditEvent {
            at: Utc::now(),
            run_id: run_id.to_string(),
            event: event.to_string(),
            stage,
            checkpoint_id: None,
            actor: actor.to_string(),
            note,
        })?;
        Ok(())
    }

    fn load(&self, state: &RunState) -> Result<Loaded, PipelineError> {
        let dir = self.workspace.run_dir(&state.run_id);
        let cfg: RunConfig = read_json(&dir.join("config.json"))?;
        let universe: UniverseFile = read_json(&dir.join("universe.json"))?;
        let corpus: Vec<DelistedCorpusEntry> = read_json(&dir.join("corpus.json"))?;
        let snapshot = Snapshot::load(&dir.join("snapshot"))?;
        let market = MarketView::new(snapshot, universe.sectors.clone(), state.priors.clone(), cfg.windows.clone())
            .map_err(PipelineError::Market)?;
        Ok(Loaded { dir, cfg, market, corpus })
    }

    /// Drives the run until it needs a human (or publishes, with auto-approve) or fails.
    pub fn advance(&self, run_id: &str) -> Result<RunState, PipelineError> {
        let _lock = self.lock(run_id)?;
        let mut loaded: Option<Loaded> = None;
        loop {
            let mut state = self.workspace.state(run_id)?;
            match state.status {
                RunStatus::Completed | RunStatus::Failed => return Ok(state),
                RunStatus::AwaitingPublish => {
                    if state.auto_approve {
                        return self.publish_locked(state, AUTO_REVIEWER);
                    }
                    return Ok(state);
                }
                RunStatus::AwaitingReview => {
                    if !self.absorb_decision(&mut state)? {
                        return Ok(state);
                    }
                }
                RunStatus::Created | RunStatus::Running => {
                    let Some(stage) = state.current_stage() else {
                        state.status = RunStatus::AwaitingPublish;
                        self.save(&mut state)?;
                        continue;
                    };
                    if loaded.is_none() {
                        loaded = Some(self.load(&state)?);
                    }
                    self.execute(&mut state, stage, loaded.as_ref().expect("loaded"))?;
                }
            }
        }
    }

    /// Applies the decision on the current checkpoint. False while it is still pending.
    fn absorb_decision(&self, state: &mut RunState) -> Result<bool, PipelineError> {
        let stage = state.current_stage().expect("a stage awaits review");
        let st = state.stages.get_mut(&stage).expect("stage state");
        let id = st.checkpoint_id.clone().expect("checkpoint recorded");
        let cp = self.workspace.checkpoints(&state.run_id).get(&id)?;
        let dir = self.workspace.run_dir(&state.run_id);
        match cp.state {
            CheckpointState::Pending => return Ok(false),
            CheckpointState::Approved => {
                st.status = StageStatus::Done;
                st.edited = false;
            }
            CheckpointState::Edited => {
                let report = cp.edited_report.as_ref().expect("edited checkpoint carries a report");
                write_json(&stage_dir(&dir, stage).join("edited-report.json"), report)?;
                st.status = StageStatus::Done;
                st.edited = true;
            }
            CheckpointState::Rejected => {
                archive_attempt(&stage_dir(&dir, stage), st.attempt)?;
                st.attempt += 1;
                st.status = StageStatus::Pending;
                st.checkpoint_id = None;
            }
        }
        state.status = RunStatus::Running;
        self.save(state)?;
        Ok(true)
    }

    fn execute(&self, state: &mut RunState, stage: Stage, l: &Loaded) -> Result<(), PipelineError> {
        let attempt = state.stages[&stage].attempt;
        let sdir = stage_dir(&l.dir, stage);
        let transcript = transcript_path(&l.dir, stage, attempt);
        match fs::remove_file(&transcript) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
        for f in ["report.json", "verdict.json", "edited-report.json", "cohort.json", "allocation.json", "allocation.csv"] {
            match fs::remove_file(sdir.join(f)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        state.status = RunStatus::Running;
        state.error = None;
        if let Some(s) = state.stages.get_mut(&stage) {
            s.status = StageStatus::Running;
            s.error = None;
        }
        self.save(state)?;
        info!(run = %state.run_id, %stage, attempt, "stage started");

        let backend = match &self.backend_override {
            Some(b) => b.clone(),
            None => backend_for(&l.cfg, &self.secrets)?,
        };
        let caps = l.cfg.caps.to_caps();
        let ctx = StageContext {
            market: &l.market,
            backend: backend.as_ref(),
            crews: &self.crews,
            settings: &l.cfg.pipeline,
            caps: &caps,
            seed: state.seed,
            attempt,
            repair_budget: l.cfg.chat.repair_budget,
            transcript: Some(&transcript),
        };
        let result = self.run_stage(&ctx, stage, l, &sdir);
        let (report, usage, counts) = match result {
            Ok(v) => v,
            Err(source) => {
                let message = source.to_string();
                write_json(
                    &sdir.join("verdict.json"),
                    &json!({"stage": stage, "attempt": attempt, "passed": false, "error": message}),
                )?;
                let s = state.stages.get_mut(&stage).expect("stage state");
                s.status = StageStatus::Failed;
                s.error = Some(message.clone());
                state.status = RunStatus::Failed;
                state.error = Some(RunFailure {
                    stage: Some(stage),
                    message: message.clone(),
                });
                self.save(state)?;
                self.audit(&state.run_id, "stage_failed", Some(stage), "pipeline", Some(message))?;
                warn!(run = %state.run_id, %stage, error = %source, "stage failed");
                return Err(PipelineError::Stage { stage, source });
            }
        };
        write_json(&sdir.join("report.json"), &report)?;
        write_json(
            &sdir.join("verdict.json"),
            &json!({"stage": stage, "attempt": attempt, "passed": true, "counts": counts}),
        )?;
        self.record_usage(&l.dir, stage, attempt, usage)?;

        let st = state.stages.get_mut(&stage).expect("stage state");
        if stage.has_checkpoint() {
            let store = self.workspace.checkpoints(&state.run_id);
            let cp = store.create(stage, attempt, report, Utc::now())?;
            st.checkpoint_id = Some(cp.checkpoint_id.clone());
            st.status = StageStatus::AwaitingReview;
            state.status = RunStatus::AwaitingReview;
            self.save(state)?;
            if state.auto_approve {
                store.decide(
                    &ReviewDecision {
                        checkpoint_id: cp.checkpoint_id,
                        verdict: Verdict::Approve,
                        edited_report: None,
                        note: String::new(),
                        reviewer: AUTO_REVIEWER.into(),
                    },
                    Utc::now(),
                )?;
            }
        } else {
            st.status = StageStatus::Done;
            state.status = RunStatus::AwaitingPublish;
            self.save(state)?;
        }
        Ok(())
    }

    fn run_stage(
        &self,
        ctx: &StageContext<'_>,
        stage: Stage,
        l: &Loaded,
        sdir: &Path,
    ) -> Result<(CrewReport, TokenUsage, serde_json::Value), StageError> {
        let io_err = |e: PipelineError| StageError::Cohort(e.to_string());
        Ok(match stage {
            Stage::Postmortem => {
                let o = stages::run_postmortem_stage(ctx, &l.corpus)?;
                let counts = json!({"signals": o.payload.len()});
                (o.report, o.usage, counts)
            }
            Stage::Screening => {
                let signals: Vec<FailureSignal> = payload(&l.dir, Stage::Postmortem).map_err(io_err)?;
                let o = stages::run_screening_stage(ctx, &signals)?;
                let counts = json!({"tickers": o.payload.tickers.len()});
                (o.report, o.usage, counts)
            }
            Stage::Analysis => {
                let shortlist: ScreeningShortlist = payload(&l.dir, Stage::Screening).map_err(io_err)?;
                let (_, benchmark, _) = analysis_basis(&l.market, &shortlist)?;
                write_json(&sdir.join("cohort.json"), &benchmark).map_err(|e| StageError::Cohort(e.to_string()))?;
                let o = stages::run_analysis_stage(ctx, &shortlist)?;
                let counts = json!({"entries": o.payload.entries.len(), "cohort_size": benchmark.cohort_size});
                (o.report, o.usage, counts)
            }
            Stage::Timing => {
                let analysis: AnalysisShortlist = payload(&l.dir, Stage::Analysis).map_err(io_err)?;
                let o = stages::run_timing_stage(ctx, &analysis)?;
                let counts = json!({"decisions": o.payload.decisions.len(), "buys": o.payload.entry_candidates.len()});
                (o.report, o.usage, counts)
            }
            Stage::Portfolio => {
                let slate: TimingSlate = payload(&l.dir, Stage::Timing).map_err(io_err)?;
                let o = stages::run_portfolio_stage(ctx, &slate)?;
                let write = |name: &str, bytes: &[u8]| {
                    write_atomic(&sdir.join(name), bytes).map_err(|e| StageError::Cohort(e.to_string()))
                };
                let mut json_bytes = serde_json::to_vec_pretty(&o.allocation).expect("serializable");
                json_bytes.push(b'\n');
                write("allocation.json", &json_bytes)?;
                write("allocation.csv", o.allocation.to_csv().as_bytes())?;
                let counts = json!({"proposals": o.proposal.proposals.len(), "positions": o.allocation.positions.len()});
                (o.report, o.usage, counts)
            }
        })
    }

    fn record_usage(&self, dir: &Path, stage: Stage, attempt: u32, usage: TokenUsage) -> Result<(), PipelineError> {
        let path = dir.join("usage.json");
        let mut all: BTreeMap<String, TokenUsage> = if path.is_file() { read_json(&path)? } else { BTreeMap::new() };
        all.insert(format!("{stage}.attempt-{attempt}"), usage);
        write_json(&path, &all)?;
        Ok(())
    }

    /// Token usage summed over every stage attempt of a run.
    pub fn usage(&self, run_id: &str) -> Result<TokenUsage, PipelineError> {
        let path = self.workspace.run_dir(run_id).join("usage.json");
        let all: BTreeMap<String, TokenUsage> = if path.is_file() { read_json(&path)? } else { BTreeMap::new() };
        let mut total = TokenUsage::default();
        for u in all.values() {
            total += *u;
        }
        Ok(total)
    }

    /// Records a reviewer decision after validating any edited report against the
    /// stage gates. The run advances on the next [`Engine::advance`].
    pub fn decide(&self, decision: &ReviewDecision) -> Result<Checkpoint, PipelineError> {
        let cp = self.workspace.checkpoint(&decision.checkpoint_id)?;
        let _lock = self.lock(&cp.run_id)?;
        let state = self.workspace.state(&cp.run_id)?;
        let store = self.workspace.checkpoints(&cp.run_id);
        let cp = store.get(&decision.checkpoint_id)?;
        if cp.state != CheckpointState::Pending {
            return Err(HitlError::CheckpointNotPending {
                id: cp.checkpoint_id,
                state: cp.state,
            }
            .into());
        }
        if decision.verdict == Verdict::Edit {
            let edited = decision.edited_report.as_ref().ok_or(HitlError::MissingEditedReport)?;
            let l = self.load(&state)?;
            validate_edit(&l.dir, &l.market, cp.stage, edited)
                .map_err(|e| HitlError::EditValidationFailed(e.to_string()))?;
        }
        Ok(store.decide(decision, Utc::now())?)
    }

    /// Copies the final allocation to `published/` and completes the run.
    pub fn publish(&self, run_id: &str, actor: &str) -> Result<RunState, PipelineError> {
        let _lock = self.lock(run_id)?;
        let state = self.workspace.state(run_id)?;
        self.publish_locked(state, actor)
    }

    fn publish_locked(&self, mut state: RunState, actor: &str) -> Result<RunState, PipelineError> {
        if state.status != RunStatus::AwaitingPublish {
            return Err(PipelineError::InvalidState {
                run_id: state.run_id,
                status: state.status,
                action: "publish",
            });
        }
        let dir = self.workspace.run_dir(&state.run_id);
        let from = stage_dir(&dir, Stage::Portfolio);
        for f in ["allocation.json", "allocation.csv"] {
            write_atomic(&dir.join("published").join(f), &fs::read(from.join(f))?)?;
        }
        state.status = RunStatus::Completed;
        self.save(&mut state)?;
        self.audit(&state.run_id, "published", Some(Stage::Portfolio), actor, None)?;
        info!(run = %state.run_id, "allocation published");
        Ok(state)
    }

    /// Moves a failed run back to running and re-executes the failed stage.
    pub fn resume(&self, run_id: &str) -> Result<RunState, PipelineError> {
        {
            let _lock = self.lock(run_id)?;
            let mut state = self.workspace.state(run_id)?;
            if state.status == RunStatus::Failed {
                for s in state.stages.values_mut() {
                    if s.status == StageStatus::Failed {
                        s.status = StageStatus::Pending;
                    }
                }
                state.status = RunStatus::Running;
                state.error = None;
                self.save(&mut state)?;
                self.audit(run_id, "resumed", None, "pipeline", None)?;
            }
        }
        self.advance(run_id)
    }
}

fn archive_attempt(sdir: &Path, attempt: u32) -> io::Result<()> {
    for (from, to) in [
        ("report.json", format!("rejected-attempt-{attempt}.json")),
        ("verdict.json", format!("rejected-attempt-{attempt}-verdict.json")),
    ] {
        if sdir.join(from).is_file() {
            fs::rename(sdir.join(from), sdir.join(to))?;
        }
    }
    for f in ["cohort.json"] {
        match fs::remove_file(sdir.join(f)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
    }
    Ok(())
}

/// Runs the stage gate over a reviewer's edited report, using the run's accepted
/// upstream reports.
pub fn validate_edit(run_dir: &Path, market: &MarketView, stage: Stage, edited: &CrewReport) -> Result<(), GateError> {
    if edited.crew_name != stage {
        return Err(GateError::WrongCrew {
            expected: stage,
            found: edited.crew_name,
        });
    }
    let upstream = |s: Stage| -> Result<CrewReport, GateError> {
        effective_report(run_dir, s).map_err(|e| GateError::Schema(format!("upstream {s} report: {e}")))
    };
    let typed = |r: &CrewReport| -> Result<serde_json::Value, GateError> { Ok(r.candidates.clone()) };
    let c = &edited.candidates;
    match stage {
        Stage::Postmortem => gates::postmortem(c).map(|_| ()),
        Stage::Screening => gates::screening(c, market).map(|_| ()),
        Stage::Analysis => {
            let shortlist: ScreeningShortlist = serde_json::from_value(typed(&upstream(Stage::Screening)?)?)
                .map_err(|e| GateError::Schema(e.to_string()))?;
            let (_, benchmark, eligible) =
                analysis_basis(market, &shortlist).map_err(|e| GateError::Schema(e.to_string()))?;
            gates::analysis(c, market, &eligible, &benchmark).map(|_| ())
        }
        Stage::Timing => {
            let analysis: AnalysisShortlist = serde_json::from_value(typed(&upstream(Stage::Analysis)?)?)
                .map_err(|e| GateError::Schema(e.to_string()))?;
            gates::timing(c, market, &analysis).map(|_| ())
        }
        Stage::Portfolio => {
            let slate: TimingSlate = serde_json::from_value(typed(&upstream(Stage::Timing)?)?)
                .map_err(|e| GateError::Schema(e.to_string()))?;
            gates::portfolio(c, &slate).map(|_| ())
        }
    }
}
