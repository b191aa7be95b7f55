//! Stage gates: cardinality bounds, subset discipline and anti-hallucination checks.
//! The same functions validate agent output and reviewer edits.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;

use super::market::MarketView;
use super::types::{
    Action, AnalysisShortlist, Citation, FailureSignal, PortfolioProposal, ScreeningShortlist, Stage, TimingSlate,
    TIMING_METRICS,
};
use crate::agents::schema;
use crate::quant::{CohortBenchmark, MetricVector};

/// Largest tolerated gap between a quoted metric and the engine's value.
pub const METRIC_TOLERANCE: f64 = 1e-6;
/// Largest tolerated gap for cohort deltas.
pub const DELTA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GateError {
    #[error("{stage}: {count} items, outside {min}..={max}{}", histogram_suffix(.histogram))]
    CardinalityViolation {
        stage: Stage,
        count: usize,
        min: usize,
        max: usize,
        histogram: Option<BTreeMap<String, usize>>,
    },
    #[error("cited symbol {0} is not in the snapshot")]
    UnknownSymbolCited(String),
    #[error("{symbol}: cited headline {text:?} is not in the snapshot")]
    UnknownHeadlineCited { symbol: String, text: String },
    #[error("{0}: rationale cites no metric or headline")]
    MissingCitation(String),
    #[error("{symbol}.{metric}: quoted {quoted}, engine {}", engine.map(|e| e.to_string()).unwrap_or_else(|| "unavailable".into()))]
    MetricMismatch {
        symbol: String,
        metric: String,
        quoted: f64,
        engine: Option<f64>,
    },
    #[error("{symbol}: metric {metric} is not allowed here")]
    DisallowedMetric { symbol: String, metric: String },
    #[error("duplicate symbol {0}")]
    DuplicateSymbol(String),
    #[error("{symbol} is not eligible: {reason}")]
    NotEligible { symbol: String, reason: String },
    #[error("decisions inconsistent: {0}")]
    DecisionMismatch(String),
    #[error("payload does not match the stage schema: {0}")]
    Schema(String),
    #[error("report belongs to crew {found}, expected {expected}")]
    WrongCrew { expected: Stage, found: Stage },
}

fn histogram_suffix(h: &Option<BTreeMap<String, usize>>) -> String {
    match h {
        Some(h) => format!(
            " (risk flags: {})",
            h.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
        ),
        None => String::new(),
    }
}

fn typed<T: DeserializeOwned>(v: &Value) -> Result<T, GateError> {
    T::deserialize(v).map_err(|e| GateError::Schema(e.to_string()))
}

fn bounds(stage: Stage, count: usize, histogram: Option<BTreeMap<String, usize>>) -> Result<(), GateError> {
    let (min, max) = stage.bounds().expect("bounded stage");
    if count < min || count > max {
        return Err(GateError::CardinalityViolation {
            stage,
            count,
            min,
            max,
            histogram,
        });
    }
    Ok(())
}

fn unique<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Result<(), GateError> {
    let mut seen = HashSet::new();
    for s in symbols {
        if !seen.insert(s) {
            return Err(GateError::DuplicateSymbol(s.to_string()));
        }
    }
    Ok(())
}

fn check_metric(v: &MetricVector, symbol: &str, metric: &str, quoted: f64) -> Result<(), GateError> {
    let engine = v.get(metric);
    match engine {
        Some(e) if (quoted - e).abs() <= METRIC_TOLERANCE => Ok(()),
        _ => Err(GateError::MetricMismatch {
            symbol: symbol.to_string(),
            metric: metric.to_string(),
            quoted,
            engine,
        }),
    }
}

pub fn postmortem(candidates: &Value) -> Result<Vec<FailureSignal>, GateError> {
    let signals: Vec<FailureSignal> = typed(candidates)?;
    if signals.is_empty() {
        return Err(GateError::Schema("no failure signals".into()));
    }
    Ok(signals)
}

pub fn screening(candidates: &Value, market: &MarketView) -> Result<ScreeningShortlist, GateError> {
    let s: ScreeningShortlist = typed(candidates)?;
    schema::check_shortlist(&s).map_err(GateError::Schema)?;
    unique(s.tickers.iter().map(|t| t.symbol.as_str()))?;
    for t in &s.tickers {
        if !market.snapshot.contains(&t.symbol) {
            return Err(GateError::UnknownSymbolCited(t.symbol.clone()));
        }
    }
    bounds(Stage::Screening, s.tickers.len(), None)?;
    for t in &s.tickers {
        if t.citations.is_empty() {
            return Err(GateError::MissingCitation(t.symbol.clone()));
        }
        for c in &t.citations {
            match c {
                Citation::Metric { symbol, metric, value } => {
                    let v = market.vector(symbol).ok_or_else(|| GateError::UnknownSymbolCited(symbol.clone()))?;
                    check_metric(v, symbol, metric, *value)?;
                }
                Citation::Headline { symbol, text } => {
                    if !market.snapshot.contains(symbol) {
                        return Err(GateError::UnknownSymbolCited(symbol.clone()));
                    }
                    if !market.snapshot.headlines(symbol).iter().any(|h| &h.headline == text) {
                        return Err(GateError::UnknownHeadlineCited {
                            symbol: symbol.clone(),
                            text: text.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(s)
}

/// `eligible`: the accepted screening shortlist plus surviving prior holdings.
pub fn analysis(
    candidates: &Value,
    market: &MarketView,
    eligible: &BTreeSet<String>,
    cohort: &CohortBenchmark,
) -> Result<AnalysisShortlist, GateError> {
    let a: AnalysisShortlist = typed(candidates)?;
    schema::check_analysis(&a).map_err(GateError::Schema)?;
    unique(a.entries.iter().map(|e| e.symbol.as_str()))?;
    for e in &a.entries {
        if !market.snapshot.contains(&e.symbol) {
            return Err(GateError::UnknownSymbolCited(e.symbol.clone()));
        }
        if !eligible.contains(&e.symbol) {
            return Err(GateError::NotEligible {
                symbol: e.symbol.clone(),
                reason: "neither shortlisted nor a prior holding".into(),
            });
        }
    }
    bounds(Stage::Analysis, a.entries.len(), None)?;
    for e in &a.entries {
        let engine = market.vector(&e.symbol).ok_or_else(|| GateError::UnknownSymbolCited(e.symbol.clone()))?;
        for (name, quoted) in e.metric_vector.iter() {
            match (quoted.value(), engine.get(name)) {
                (Some(q), _) => check_metric(engine, &e.symbol, name, q)?,
                (None, Some(actual)) => {
                    return Err(GateError::MetricMismatch {
                        symbol: e.symbol.clone(),
                        metric: name.to_string(),
                        quoted: f64::NAN,
                        engine: Some(actual),
                    })
                }
                (None, None) => {}
            }
        }
        let expected = engine.cohort_delta(cohort);
        for (metric, want) in &expected {
            let got = e.cohort_delta.get(metric).copied();
            if got.is_none_or(|g| (g - want).abs() > DELTA_TOLERANCE) {
                return Err(GateError::MetricMismatch {
                    symbol: e.symbol.clone(),
                    metric: format!("cohort_delta.{metric}"),
                    quoted: got.unwrap_or(f64::NAN),
                    engine: Some(*want),
                });
            }
        }
        if let Some(extra) = e.cohort_delta.keys().find(|k| !expected.contains_key(*k)) {
            return Err(GateError::MetricMismatch {
                symbol: e.symbol.clone(),
                metric: format!("cohort_delta.{extra}"),
                quoted: e.cohort_delta[extra],
                engine: None,
            });
        }
    }
    Ok(a)
}

pub fn timing(candidates: &Value, market: &MarketView, analysis: &AnalysisShortlist) -> Result<TimingSlate, GateError> {
    let s: TimingSlate = typed(candidates)?;
    schema::check_slate(&s).map_err(GateError::Schema)?;
    let evaluated: BTreeSet<&str> = analysis.entries.iter().map(|e| e.symbol.as_str()).collect();
    let decided: BTreeSet<&str> = s.decisions.iter().map(|d| d.symbol.as_str()).collect();
    if let Some(x) = decided.difference(&evaluated).next() {
        return Err(if market.snapshot.contains(x) {
            GateError::NotEligible {
                symbol: x.to_string(),
                reason: "not in the analysis shortlist".into(),
            }
        } else {
            GateError::UnknownSymbolCited(x.to_string())
        });
    }
    if let Some(x) = evaluated.difference(&decided).next() {
        return Err(GateError::DecisionMismatch(format!("no decision for {x}")));
    }
    let buys: BTreeSet<&str> = s
        .decisions
        .iter()
        .filter(|d| d.action == Action::Buy)
        .map(|d| d.symbol.as_str())
        .collect();
    let listed: BTreeSet<&str> = s.entry_candidates.iter().map(String::as_str).collect();
    if buys != listed {
        return Err(GateError::DecisionMismatch(
            "entry_candidates must be exactly the buy decisions".into(),
        ));
    }
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for d in &s.decisions {
        for f in &d.risk_flags {
            *histogram.entry(f.code().to_string()).or_default() += 1;
        }
    }
    bounds(Stage::Timing, buys.len(), Some(histogram))?;
    for d in &s.decisions {
        let engine = market.vector(&d.symbol).ok_or_else(|| GateError::UnknownSymbolCited(d.symbol.clone()))?;
        for (metric, quoted) in &d.metrics {
            if !TIMING_METRICS.contains(&metric.as_str()) {
                return Err(GateError::DisallowedMetric {
                    symbol: d.symbol.clone(),
                    metric: metric.clone(),
                });
            }
            check_metric(engine, &d.symbol, metric, *quoted)?;
        }
    }
    Ok(s)
}

/// Proposals must come from the slate's buys; sells and holds are ineligible.
pub fn portfolio(candidates: &Value, slate: &TimingSlate) -> Result<PortfolioProposal, GateError> {
    let p: PortfolioProposal = typed(candidates)?;
    unique(p.proposals.iter().map(|r| r.symbol.as_str()))?;
    for r in &p.proposals {
        if !slate.entry_candidates.contains(&r.symbol) {
            return Err(GateError::NotEligible {
                symbol: r.symbol.clone(),
                reason: "not a buy candidate this week".into(),
            });
        }
        if !(r.weight.is_finite() && r.weight >= 0.0) {
            return Err(GateError::Schema(format!("{}: weight {} is not a non-negative number", r.symbol, r.weight)));
        }
    }
    Ok(p)
}
