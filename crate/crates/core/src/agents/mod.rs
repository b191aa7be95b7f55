//! Agents and crews: declarative specs, prompt rendering, pluggable backends and
//! validated structured reports.

mod chat;
pub mod prompt;
pub mod schema;
pub mod scripted;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use chat::{ChatBackend, ChatBackendSettings};
pub use prompt::{estimate_tokens, render_prompt, truncate_context, RenderedPrompt};
pub use schema::{extract_block, parse_structured_output, ReportBody, SchemaName};
pub use scripted::ScriptedBackend;

use crate::config::BackendKind;
use crate::fsutil::{append_line, sha256_hex};
use crate::pipeline::gates::GateError;
use crate::pipeline::types::{CrewReport, Stage};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("prompt template: {0}")]
    Template(String),
    #[error("context has no key {0:?} required by the prompt template")]
    MissingContextKey(String),
    #[error("prompt needs ~{estimated} tokens, budget is {budget}")]
    ContextBudgetExceeded { estimated: usize, budget: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out after {attempts} attempt(s)")]
    BackendTimeout { attempts: u32 },
    #[error("backend still failing after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("reply contains no structured block")]
    NoStructuredBlock,
    #[error("reply violates schema {schema}: {message}")]
    SchemaViolation { schema: SchemaName, message: String },
    #[error("scripted backend has no rule for agent {0:?}")]
    UnknownAgent(String),
    #[error("context is missing {0}")]
    BadContext(String),
    #[error(transparent)]
    Gate(#[from] GateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: String,
    pub crew: Stage,
    pub role_title: String,
    pub goal: String,
    pub prompt_template: String,
    pub output_schema: SchemaName,
    pub max_context_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrewSpec {
    pub crew_name: Stage,
    pub agents: Vec<AgentSpec>,
    pub has_summary_agent: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentDef {
    agent_id: String,
    role_title: String,
    goal: String,
    prompt_template: String,
    output_schema: SchemaName,
    #[serde(default = "default_max_items")]
    max_context_items: usize,
}

fn default_max_items() -> usize {
    120
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CrewFile {
    crew_name: Stage,
    has_summary_agent: bool,
    agents: Vec<AgentDef>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CrewSpecError {
    #[error("crew definition does not parse: {0}")]
    Parse(String),
    #[error("crew {crew} has {count} agents; crews have 3 to 5")]
    AgentCount { crew: Stage, count: usize },
    #[error("crew {crew}: has_summary_agent must be {expected}")]
    SummaryFlag { crew: Stage, expected: bool },
    #[error("crew {crew}: {message}")]
    Invalid { crew: Stage, message: String },
}

/// Context keys the pipeline supplies to each crew.
pub fn context_contract(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Postmortem => &["as_of", "corpus"],
        Stage::Screening => &["as_of", "failure_signals", "tickers", "target_count"],
        Stage::Analysis => &["as_of", "candidates", "cohort_benchmark", "prior_holdings", "target_count"],
        Stage::Timing => &["as_of", "entries", "target_buys"],
        Stage::Portfolio => &["as_of", "buys", "caps", "target_positions"],
    }
}

fn report_schema(stage: Stage) -> SchemaName {
    match stage {
        Stage::Postmortem => SchemaName::PostmortemReport,
        Stage::Screening => SchemaName::ScreeningReport,
        Stage::Analysis => SchemaName::AnalysisReport,
        Stage::Timing => SchemaName::TimingReport,
        Stage::Portfolio => SchemaName::PortfolioReport,
    }
}

impl CrewSpec {
    pub fn parse(text: &str) -> Result<Self, CrewSpecError> {
        let file: CrewFile = toml::from_str(text).map_err(|e| CrewSpecError::Parse(e.to_string()))?;
        let crew = file.crew_name;
        let spec = CrewSpec {
            crew_name: crew,
            has_summary_agent: file.has_summary_agent,
            agents: file
                .agents
                .into_iter()
                .map(|a| AgentSpec {
                    agent_id: a.agent_id,
                    crew,
                    role_title: a.role_title,
                    goal: a.goal,
                    prompt_template: a.prompt_template,
                    output_schema: a.output_schema,
                    max_context_items: a.max_context_items,
                })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CrewSpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| CrewSpecError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CrewSpecError> {
        let crew = self.crew_name;
        let invalid = |message: String| CrewSpecError::Invalid { crew, message };
        if !(3..=5).contains(&self.agents.len()) {
            return Err(CrewSpecError::AgentCount {
                crew,
                count: self.agents.len(),
            });
        }
        let expected = crew != Stage::Portfolio;
        if self.has_summary_agent != expected {
            return Err(CrewSpecError::SummaryFlag { crew, expected });
        }
        let mut ids = HashSet::new();
        let contract = context_contract(crew);
        for (i, a) in self.agents.iter().enumerate() {
            if !ids.insert(&a.agent_id) {
                return Err(invalid(format!("duplicate agent id {}", a.agent_id)));
            }
            if a.crew != crew {
                return Err(invalid(format!("agent {} belongs to crew {}", a.agent_id, a.crew)));
            }
            if a.max_context_items == 0 {
                return Err(invalid(format!("agent {} has max_context_items 0", a.agent_id)));
            }
            let last = i + 1 == self.agents.len();
            if last && a.output_schema != report_schema(crew) {
                return Err(invalid(format!("final agent must emit {}", report_schema(crew))));
            }
            if !last && a.output_schema.is_report() {
                return Err(invalid(format!("only the final agent may emit a report; {} does", a.agent_id)));
            }
            let keys = prompt::placeholders(&a.prompt_template).map_err(|e| invalid(format!("{}: {e}", a.agent_id)))?;
            for k in keys {
                if !contract.contains(&k.as_str()) && !prompt::BUILTIN_PLACEHOLDERS.contains(&k.as_str()) {
                    return Err(invalid(format!(
                        "agent {} uses placeholder {{{k}}} outside the crew's context contract",
                        a.agent_id
                    )));
                }
            }
        }
        Ok(())
    }
}

const BUNDLED_CREWS: [(Stage, &str); 5] = [
    (Stage::Postmortem, include_str!("../../crews/postmortem.toml")),
    (Stage::Screening, include_str!("../../crews/screening.toml")),
    (Stage::Analysis, include_str!("../../crews/analysis.toml")),
    (Stage::Timing, include_str!("../../crews/timing.toml")),
    (Stage::Portfolio, include_str!("../../crews/portfolio.toml")),
];

/// The crew definitions shipped in `crews/`.
pub fn bundled_crews() -> BTreeMap<Stage, CrewSpec> {
    BUNDLED_CREWS
        .iter()
        .map(|(stage, text)| {
            let spec = CrewSpec::parse(text).unwrap_or_else(|e| panic!("bundled {stage} crew: {e}"));
            (*stage, spec)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, o: Self) {
        self.input_tokens += o.input_tokens;
        self.output_tokens += o.output_tokens;
    }
}

/// Seed material for one stage execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationMeta {
    pub seed: u64,
    /// 1 for the first execution of a stage, incremented on each rejection.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub raw_text: String,
    pub usage: TokenUsage,
}

/// A (previous reply, complaint) pair sent back during a repair re-prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repair {
    pub reply: String,
    pub complaint: String,
}

pub trait AgentBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Whether failed parses may be retried with a repair re-prompt.
    fn supports_repair(&self) -> bool;

    fn complete(
        &self,
        agent: &AgentSpec,
        prompt: &RenderedPrompt,
        meta: InvocationMeta,
        repairs: &[Repair],
    ) -> Result<BackendReply, AgentError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutput {
    pub agent_id: String,
    pub raw_text: String,
    pub parsed: Option<Value>,
    pub parse_attempts: u32,
    pub backend_kind: BackendKind,
    pub token_usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub agent_id: String,
    /// 1-based completion number for this agent (repairs increment it).
    pub call: u32,
    pub system: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_note: Option<String>,
    pub raw_text: String,
    pub parse_status: String,
    pub token_usage: TokenUsage,
}

pub type Gate<'a> = &'a dyn Fn(&Value) -> Result<(), GateError>;

pub struct InvokeOptions<'a> {
    pub token_budget: usize,
    pub repair_budget: u32,
    pub meta: InvocationMeta,
    /// Extra validation applied after the schema check; failures consume the repair budget.
    pub gate: Option<Gate<'a>>,
    /// JSONL file receiving one record per completion.
    pub transcript: Option<&'a Path>,
}

fn record(path: Option<&Path>, rec: &TranscriptRecord) -> Result<(), AgentError> {
    if let Some(p) = path {
        append_line(p, &serde_json::to_string(rec).expect("serializable"))
            .map_err(|e| AgentError::BackendUnavailable(format!("transcript write failed: {e}")))?;
    }
    Ok(())
}

/// One agent turn: render, complete, parse and gate, with repair re-prompts on
/// backends that support them.
pub fn invoke_agent(
    agent: &AgentSpec,
    inbound: &Map<String, Value>,
    prior_outputs: Option<&Value>,
    backend: &dyn AgentBackend,
    opts: &InvokeOptions<'_>,
) -> Result<AgentOutput, AgentError> {
    let prompt = render_prompt(agent, inbound, prior_outputs, opts.token_budget)?;
    let mut repairs: Vec<Repair> = Vec::new();
    let mut usage = TokenUsage::default();
    loop {
        let call = repairs.len() as u32 + 1;
        let base = TranscriptRecord {
            agent_id: agent.agent_id.clone(),
            call,
            system: prompt.system.clone(),
            prompt: prompt.user.clone(),
            repair_note: repairs.last().map(|r| r.complaint.clone()),
            raw_text: String::new(),
            parse_status: String::new(),
            token_usage: TokenUsage::default(),
        };
        let reply = match backend.complete(agent, &prompt, opts.meta, &repairs) {
            Ok(r) => r,
            Err(e) => {
                record(
                    opts.transcript,
                    &TranscriptRecord {
                        parse_status: format!("backend error: {e}"),
                        ..base
                    },
                )?;
                return Err(e);
            }
        };
        usage += reply.usage;
        let outcome = parse_structured_output(&reply.raw_text, agent.output_schema).and_then(|v| {
            if let Some(gate) = opts.gate {
                gate(&v)?;
            }
            Ok(v)
        });
        record(
            opts.transcript,
            &TranscriptRecord {
                raw_text: reply.raw_text.clone(),
                parse_status: match &outcome {
                    Ok(_) => "ok".into(),
                    Err(e) => format!("error: {e}"),
                },
                token_usage: reply.usage,
                ..base
            },
        )?;
        match outcome {
            Ok(parsed) => {
                return Ok(AgentOutput {
                    agent_id: agent.agent_id.clone(),
                    raw_text: reply.raw_text,
                    parsed: Some(parsed),
                    parse_attempts: call,
                    backend_kind: backend.kind(),
                    token_usage: usage,
                })
            }
            Err(e) if backend.supports_repair() && (repairs.len() as u32) < opts.repair_budget => {
                repairs.push(Repair {
                    reply: reply.raw_text,
                    complaint: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Error)]
pub enum CrewError {
    #[error("crew {crew} aborted: agent {agent_id} failed: {source}")]
    CrewAborted {
        crew: Stage,
        agent_id: String,
        source: AgentError,
    },
    #[error("agent {agent_id}: {source}")]
    Agent { agent_id: String, source: AgentError },
}

impl CrewError {
    pub fn agent_error(&self) -> &AgentError {
        match self {
            CrewError::CrewAborted { source, .. } | CrewError::Agent { source, .. } => source,
        }
    }
}

pub struct CrewRunOptions<'a> {
    pub token_budget: usize,
    pub repair_budget: u32,
    pub meta: InvocationMeta,
    pub produced_at: DateTime<Utc>,
    /// Applied to the final agent's parsed report.
    pub report_gate: Option<Gate<'a>>,
    pub transcript: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrewRun {
    pub report: CrewReport,
    pub outputs: Vec<AgentOutput>,
}

impl CrewRun {
    pub fn usage(&self) -> TokenUsage {
        let mut u = TokenUsage::default();
        for o in &self.outputs {
            u += o.token_usage;
        }
        u
    }
}

/// sha256 of the compact JSON of the inbound context (object keys sorted).
pub fn inputs_digest(inbound: &Map<String, Value>) -> String {
    sha256_hex(serde_json::to_string(inbound).expect("serializable").as_bytes())
}

/// Runs the crew's agents in order; each sees the inbound context plus every earlier
/// agent's parsed output under `prior_outputs`.
pub fn run_crew(
    crew: &CrewSpec,
    inbound: &Map<String, Value>,
    backend: &dyn AgentBackend,
    opts: &CrewRunOptions<'_>,
) -> Result<CrewRun, CrewError> {
    let mut outputs: Vec<AgentOutput> = Vec::new();
    let mut prior: Vec<Value> = Vec::new();
    let last = crew.agents.len() - 1;
    for (i, agent) in crew.agents.iter().enumerate() {
        let prior_value = Value::Array(prior.clone());
        let invoke = InvokeOptions {
            token_budget: opts.token_budget,
            repair_budget: opts.repair_budget,
            meta: opts.meta,
            gate: if i == last { opts.report_gate } else { None },
            transcript: opts.transcript,
        };
        let out = invoke_agent(agent, inbound, Some(&prior_value), backend, &invoke).map_err(|source| {
            if i == last {
                CrewError::Agent {
                    agent_id: agent.agent_id.clone(),
                    source,
                }
            } else {
                CrewError::CrewAborted {
                    crew: crew.crew_name,
                    agent_id: agent.agent_id.clone(),
                    source,
                }
            }
        })?;
        prior.push(json!({"agent_id": agent.agent_id, "output": out.parsed.clone().unwrap_or(Value::Null)}));
        outputs.push(out);
    }
    let final_agent = &crew.agents[last];
    let body: ReportBody<Value> = serde_json::from_value(outputs[last].parsed.clone().unwrap_or(Value::Null))
        .map_err(|e| CrewError::Agent {
            agent_id: final_agent.agent_id.clone(),
            source: AgentError::SchemaViolation {
                schema: final_agent.output_schema,
                message: e.to_string(),
            },
        })?;
    Ok(CrewRun {
        report: CrewReport {
            crew_name: crew.crew_name,
            produced_at: opts.produced_at,
            inputs_digest: inputs_digest(inbound),
            sections: body.sections,
            candidates: body.candidates,
            rationale: body.rationale,
            references: body.references,
        },
        outputs,
    })
}
