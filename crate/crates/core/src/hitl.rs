//! Review checkpoints: a per-run record store (`checkpoints/<id>.json`), an index and
//! an append-only audit log. Callers serialize writers with the run lock.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::{append_line, read_json, write_json};
use crate::pipeline::types::{CrewReport, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointState {
    Pending,
    Approved,
    Edited,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approve,
    Edit,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub checkpoint_id: String,
    pub run_id: String,
    pub stage: Stage,
    /// Stage attempt that produced the report (re-executions after a reject count up).
    pub attempt: u32,
    pub report: CrewReport,
    pub state: CheckpointState,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub decided_by: Option<String>,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub edited_report: Option<CrewReport>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewDecision {
    pub checkpoint_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_report: Option<CrewReport>,
    #[serde(default)]
    pub note: String,
    pub reviewer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub at: DateTime<Utc>,
    pub run_id: String,
    pub event: String,
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default)]
    pub checkpoint_id: Option<String>,
    pub actor: String,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    checkpoint_id: String,
    stage: Stage,
    attempt: u32,
    state: CheckpointState,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum HitlError {
    #[error("checkpoint {0} not found")]
    NotFound(String),
    #[error("run {run_id} already has pending checkpoint {existing}")]
    DuplicatePendingCheckpoint { run_id: String, existing: String },
    #[error("checkpoint {id} is {state:?}, not pending")]
    CheckpointNotPending { id: String, state: CheckpointState },
    #[error("edited report rejected: {0}")]
    EditValidationFailed(String),
    #[error("an edit verdict requires edited_report")]
    MissingEditedReport,
    #[error("edited_report is only allowed with an edit verdict")]
    UnexpectedEditedReport,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub struct CheckpointStore {
    dir: PathBuf,
    run_id: String,
}

impl CheckpointStore {
    pub const DIR: &'static str = "checkpoints";

    pub fn open(run_dir: &Path, run_id: &str) -> Self {
        Self {
            dir: run_dir.join(Self::DIR),
            run_id: run_id.to_string(),
        }
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join("index.json")
    }

    fn record_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    fn index(&self) -> Result<Vec<IndexEntry>, HitlError> {
        match read_json(&self.index_path()) {
            Ok(v) => Ok(v),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn write(&self, cp: &Checkpoint) -> Result<(), HitlError> {
        write_json(&self.record_path(&cp.checkpoint_id), cp)?;
        let mut index = self.index()?;
        let entry = IndexEntry {
            checkpoint_id: cp.checkpoint_id.clone(),
            stage: cp.stage,
            attempt: cp.attempt,
            state: cp.state,
            created_at: cp.created_at,
        };
        match index.iter_mut().find(|e| e.checkpoint_id == cp.checkpoint_id) {
            Some(e) => *e = entry,
            None => index.push(entry),
        }
        write_json(&self.index_path(), &index)?;
        Ok(())
    }

    pub fn create(&self, stage: Stage, attempt: u32, report: CrewReport, now: DateTime<Utc>) -> Result<Checkpoint, HitlError> {
        let index = self.index()?;
        if let Some(p) = index.iter().find(|e| e.state == CheckpointState::Pending) {
            return Err(HitlError::DuplicatePendingCheckpoint {
                run_id: self.run_id.clone(),
                existing: p.checkpoint_id.clone(),
            });
        }
        let cp = Checkpoint {
            checkpoint_id: format!("{}--cp{:02}", self.run_id, index.len() + 1),
            run_id: self.run_id.clone(),
            stage,
            attempt,
            report,
            state: CheckpointState::Pending,
            created_at: now,
            decided_by: None,
            decided_at: None,
            edited_report: None,
            note: None,
        };
        self.write(&cp)?;
        self.record_event(AuditEvent {
            at: now,
            run_id: self.run_id.clone(),
            event: "checkpoint_created".into(),
            stage: Some(stage),
            checkpoint_id: Some(cp.checkpoint_id.clone()),
            actor: "pipeline".into(),
            note: None,
        })?;
        Ok(cp)
    }

    pub fn get(&self, id: &str) -> Result<Checkpoint, HitlError> {
        match read_json(&self.record_path(id)) {
            Ok(cp) => Ok(cp),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(HitlError::NotFound(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    /// Every checkpoint in creation order.
    pub fn list(&self) -> Result<Vec<Checkpoint>, HitlError> {
        self.index()?.iter().map(|e| self.get(&e.checkpoint_id)).collect()
    }

    pub fn pending(&self) -> Result<Option<Checkpoint>, HitlError> {
        match self.index()?.into_iter().find(|e| e.state == CheckpointState::Pending) {
            Some(e) => self.get(&e.checkpoint_id).map(Some),
            None => Ok(None),
        }
    }

    /// Records a decision. Edited reports must already have passed stage validation.
    pub fn decide(&self, decision: &ReviewDecision, now: DateTime<Utc>) -> Result<Checkpoint, HitlError> {
        let mut cp = self.get(&decision.checkpoint_id)?;
        if cp.state != CheckpointState::Pending {
            return Err(HitlError::CheckpointNotPending {
                id: cp.checkpoint_id,
                state: cp.state,
            });
        }
        match (decision.verdict, &decision.edited_report) {
            (Verdict::Edit, None) => return Err(HitlError::MissingEditedReport),
            (Verdict::Approve | Verdict::Reject, Some(_)) => return Err(HitlError::UnexpectedEditedReport),
            _ => {}
        }
        cp.state = match decision.verdict {
            Verdict::Approve => CheckpointState::Approved,
            Verdict::Edit => CheckpointState::Edited,
            Verdict::Reject => CheckpointState::Rejected,
        };
        cp.decided_by = Some(decision.reviewer.clone());
        cp.decided_at = Some(now);
        cp.edited_report = decision.edited_report.clone();
        cp.note = (!decision.note.is_empty()).then(|| decision.note.clone());
        self.write(&cp)?;
        self.record_event(AuditEvent {
            at: now,
            run_id: self.run_id.clone(),
            event: format!("{:?}", cp.state).to_lowercase(),
            stage: Some(cp.stage),
            checkpoint_id: Some(cp.checkpoint_id.clone()),
            actor: decision.reviewer.clone(),
            note: cp.note.clone(),
        })?;
        Ok(cp)
    }

    pub fn record_event(&self, event: AuditEvent) -> Result<(), HitlError> {
        append_line(
            &self.dir.join("audit.jsonl"),
            &serde_json::to_string(&event).expect("serializable"),
        )?;
        Ok(())
    }

    pub fn audit(&self) -> Result<Vec<AuditEvent>, HitlError> {
        let text = match fs::read_to_string(self.dir.join("audit.jsonl")) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| HitlError::Io(io::Error::new(io::ErrorKind::InvalidData, e))))
            .collect()
    }
}

/// Pending checkpoints across every run under `root`, newest first.
pub fn list_pending(root: &Path, run_id: Option<&str>) -> Result<Vec<Checkpoint>, HitlError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        let Some(name) = entry.file_name().to_str().map(str::to_string) else {
            continue;
        };
        if run_id.is_some_and(|r| r != name) || !entry.path().join(CheckpointStore::DIR).is_dir() {
            continue;
        }
        if let Some(cp) = CheckpointStore::open(&entry.path(), &name).pending()? {
            out.push(cp);
        }
    }
    out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| b.checkpoint_id.cmp(&a.checkpoint_id)));
    Ok(out)
}
