//! Registered output schemas and fenced-block extraction.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AgentError;
use crate::pipeline::types::{
    AnalysisShortlist, FailureSignal, PortfolioProposal, ProposalRecord, RiskFlag, ScreeningShortlist, Section,
    TimingSlate,
};
use crate::sentiment::SentimentLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaName {
    TickerFindings,
    TickerSentiment,
    TickerScores,
    SectorNotes,
    RiskFlags,
    RiskReview,
    AllocationProposal,
    PostmortemReport,
    ScreeningReport,
    AnalysisReport,
    TimingReport,
    PortfolioReport,
}

impl fmt::Display for SchemaName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

pub const SCREENING_CAP: usize = 100;
pub const ANALYSIS_CAP: usize = 50;
pub const ENTRY_CAP: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickerFinding {
    pub symbol: String,
    pub patterns: Vec<String>,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickerFindings {
    pub findings: Vec<TickerFinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickerSentimentRecord {
    pub symbol: String,
    pub score: f64,
    pub label: SentimentLabel,
    #[serde(default)]
    pub failure_flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickerSentiments {
    pub sentiment: Vec<TickerSentimentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickerScore {
    pub symbol: String,
    pub score: f64,
    #[serde(default)]
    pub basis: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickerScores {
    pub scores: Vec<TickerScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorNote {
    pub symbol: String,
    pub sector: String,
    pub thematic_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectorNotes {
    pub notes: Vec<SectorNote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskFlagRecord {
    pub symbol: String,
    pub risk_flags: Vec<RiskFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskFlags {
    pub flags: Vec<RiskFlagRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskAdjustment {
    pub symbol: String,
    /// Applied to the proposed weight; within [0, 1].
    pub multiplier: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskReview {
    pub adjustments: Vec<RiskAdjustment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationProposal {
    pub proposals: Vec<ProposalRecord>,
}

/// What a summary agent (or the portfolio crew's last agent) returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportBody<C> {
    pub sections: Vec<Section>,
    pub rationale: String,
    pub references: Vec<String>,
    pub candidates: C,
}

type Check = Result<(), String>;

fn typed<T: DeserializeOwned>(v: &Value) -> Result<T, String> {
    T::deserialize(v).map_err(|e| e.to_string())
}

fn unique<'a>(what: &str, symbols: impl IntoIterator<Item = &'a str>) -> Check {
    let mut seen = HashSet::new();
    for s in symbols {
        if !seen.insert(s) {
            return Err(format!("duplicate symbol {s} in {what}"));
        }
    }
    Ok(())
}

fn finite(what: &str, x: f64) -> Check {
    if x.is_finite() {
        Ok(())
    } else {
        Err(format!("{what} is not a finite number"))
    }
}

fn fraction(what: &str, x: f64) -> Check {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(format!("{what} = {x} is outside [0, 1]"))
    }
}

fn at_most(what: &str, n: usize, cap: usize) -> Check {
    if n > cap {
        Err(format!("{what} holds {n} items, above the maximum of {cap}"))
    } else {
        Ok(())
    }
}

pub fn check_shortlist(s: &ScreeningShortlist) -> Check {
    at_most("screening shortlist", s.tickers.len(), SCREENING_CAP)?;
    unique("screening shortlist", s.tickers.iter().map(|t| t.symbol.as_str()))
}

pub fn check_analysis(a: &AnalysisShortlist) -> Check {
    at_most("analysis shortlist", a.entries.len(), ANALYSIS_CAP)?;
    unique("analysis shortlist", a.entries.iter().map(|e| e.symbol.as_str()))?;
    for e in &a.entries {
        if e.metric_vector.ticker != e.symbol {
            return Err(format!("entry {} carries the metric vector of {}", e.symbol, e.metric_vector.ticker));
        }
        for (k, v) in &e.cohort_delta {
            finite(&format!("{}.cohort_delta.{k}", e.symbol), *v)?;
        }
    }
    Ok(())
}

pub fn check_slate(s: &TimingSlate) -> Check {
    at_most("entry candidates", s.entry_candidates.len(), ENTRY_CAP)?;
    unique("timing decisions", s.decisions.iter().map(|d| d.symbol.as_str()))?;
    unique("entry candidates", s.entry_candidates.iter().map(String::as_str))?;
    for d in &s.decisions {
        fraction(&format!("{}.confidence", d.symbol), d.confidence)?;
        for (k, v) in &d.metrics {
            finite(&format!("{}.metrics.{k}", d.symbol), *v)?;
        }
    }
    Ok(())
}

fn check_proposals(p: &[ProposalRecord]) -> Check {
    unique("proposals", p.iter().map(|r| r.symbol.as_str()))?;
    for r in p {
        finite(&format!("{}.weight", r.symbol), r.weight)?;
        if r.weight < 0.0 {
            return Err(format!("{}.weight is negative", r.symbol));
        }
        fraction(&format!("{}.confidence", r.symbol), r.confidence)?;
    }
    Ok(())
}

fn check_report<C: DeserializeOwned>(v: &Value, inner: impl Fn(&C) -> Check) -> Check {
    let body: ReportBody<C> = typed(v)?;
    inner(&body.candidates)
}

impl SchemaName {
    /// Structural validation plus the schema's upper caps.
    pub fn check(self, v: &Value) -> Check {
        match self {
            SchemaName::TickerFindings => {
                let t: TickerFindings = typed(v)?;
                unique("findings", t.findings.iter().map(|f| f.symbol.as_str()))
            }
            SchemaName::TickerSentiment => {
                let t: TickerSentiments = typed(v)?;
                unique("sentiment", t.sentiment.iter().map(|f| f.symbol.as_str()))
            }
            SchemaName::TickerScores => {
                let t: TickerScores = typed(v)?;
                unique("scores", t.scores.iter().map(|f| f.symbol.as_str()))?;
                t.scores.iter().try_for_each(|s| finite(&format!("{}.score", s.symbol), s.score))
            }
            SchemaName::SectorNotes => {
                let t: SectorNotes = typed(v)?;
                unique("notes", t.notes.iter().map(|f| f.symbol.as_str()))
            }
            SchemaName::RiskFlags => {
                let t: RiskFlags = typed(v)?;
                unique("flags", t.flags.iter().map(|f| f.symbol.as_str()))
            }
            SchemaName::RiskReview => {
                let t: RiskReview = typed(v)?;
                unique("adjustments", t.adjustments.iter().map(|f| f.symbol.as_str()))?;
                t.adjustments
                    .iter()
                    .try_for_each(|a| fraction(&format!("{}.multiplier", a.symbol), a.multiplier))
            }
            SchemaName::AllocationProposal => check_proposals(&typed::<AllocationProposal>(v)?.proposals),
            SchemaName::PostmortemReport => check_report(v, |c: &Vec<FailureSignal>| {
                if c.is_empty() {
                    Err("postmortem report lists no failure signals".into())
                } else {
                    Ok(())
                }
            }),
            SchemaName::ScreeningReport => check_report(v, check_shortlist),
            SchemaName::AnalysisReport => check_report(v, check_analysis),
            SchemaName::TimingReport => check_report(v, check_slate),
            SchemaName::PortfolioReport => check_report(v, |p: &PortfolioProposal| check_proposals(&p.proposals)),
        }
    }

    pub fn is_report(self) -> bool {
        matches!(
            self,
            SchemaName::PostmortemReport
                | SchemaName::ScreeningReport
                | SchemaName::AnalysisReport
                | SchemaName::TimingReport
                | SchemaName::PortfolioReport
        )
    }

    /// One-line shape hint included in system prompts.
    pub fn describe(self) -> &'static str {
        match self {
            SchemaName::TickerFindings => r#"{"findings":[{"symbol":str,"patterns":[str],"evidence":[str]}]}"#,
            SchemaName::TickerSentiment => {
                r#"{"sentiment":[{"symbol":str,"score":num,"label":"positive|neutral|negative","failure_flags":[str]}]}"#
            }
            SchemaName::TickerScores => r#"{"scores":[{"symbol":str,"score":num,"basis":{metric:num}}]}"#,
            SchemaName::SectorNotes => r#"{"notes":[{"symbol":str,"sector":str,"thematic_note":str}]}"#,
            SchemaName::RiskFlags => {
                r#"{"flags":[{"symbol":str,"risk_flags":["negative_momentum|negative_slope|extreme_zscore|fading_volume|negative_sortino|negative_headlines|inconsistent_signals|missing_data"]}]}"#
            }
            SchemaName::RiskReview => r#"{"adjustments":[{"symbol":str,"multiplier":0..1,"reason":str}]}"#,
            SchemaName::AllocationProposal => {
                r#"{"proposals":[{"symbol":str,"weight":num,"confidence":0..1,"sector":str,"rationale":str}]}"#
            }
            SchemaName::PostmortemReport => {
                r#"{"sections":[{"heading":str,"body":str}],"rationale":str,"references":[str],"candidates":[{"signal":str,"affected_sectors":[str],"mitigation":str,"references":[str]}]}"#
            }
            SchemaName::ScreeningReport => {
                r#"{"sections":[...],"rationale":str,"references":[str],"candidates":{"as_of":date,"tickers":[{"symbol":str,"rationale":str,"sentiment_label":str,"citations":[{"kind":"metric","symbol":str,"metric":str,"value":num}|{"kind":"headline","symbol":str,"text":str}]}]}} (50 to 100 tickers)"#
            }
            SchemaName::AnalysisReport => {
                r#"{"sections":[...],"rationale":str,"references":[str],"candidates":{"as_of":date,"entries":[{"symbol":str,"metric_vector":{...},"cohort_delta":{metric:num},"sector":str,"thematic_note":str}]}} (35 to 50 entries)"#
            }
            SchemaName::TimingReport => {
                r#"{"sections":[...],"rationale":str,"references":[str],"candidates":{"as_of":date,"decisions":[{"symbol":str,"action":"buy|hold|sell","confidence":0..1,"risk_flags":[str],"justification":str,"metrics":{metric:num}}],"entry_candidates":[str]}} (20 to 30 buys)"#
            }
            SchemaName::PortfolioReport => {
                r#"{"sections":[...],"rationale":str,"references":[str],"candidates":{"as_of":date,"proposals":[{"symbol":str,"weight":num,"confidence":0..1,"sector":str,"rationale":str}]}}"#
            }
        }
    }
}

/// First well-formed JSON object or array: fenced blocks first, then the whole text.
pub fn extract_block(raw: &str) -> Option<Value> {
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let Some(close) = body.find("```") else {
            break;
        };
        if let Ok(v @ (Value::Object(_) | Value::Array(_))) = serde_json::from_str::<Value>(body[..close].trim()) {
            return Some(v);
        }
        rest = &body[close + 3..];
    }
    match serde_json::from_str::<Value>(raw.trim()) {
        Ok(v @ (Value::Object(_) | Value::Array(_))) => Some(v),
        _ => None,
    }
}

/// Extracts and validates one structured block. Repair re-prompts are driven by
/// [`super::invoke_agent`], which calls this once per attempt.
pub fn parse_structured_output(raw: &str, schema: SchemaName) -> Result<Value, AgentError> {
    let v = extract_block(raw).ok_or(AgentError::NoStructuredBlock)?;
    schema
        .check(&v)
        .map_err(|message| AgentError::SchemaViolation { schema, message })?;
    Ok(v)
}

/// Wraps a payload as the fenced block agents are asked to produce.
pub fn fenced(v: &Value) -> String {
    format!("```json\n{}\n```", serde_json::to_string_pretty(v).expect("serializable"))
}
