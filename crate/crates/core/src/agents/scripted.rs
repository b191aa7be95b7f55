//! Deterministic rule per agent role. The reply is a pure function of the agent id,
//! the rendered inputs and the invocation seed; re-executions after a rejection
//! (`attempt > 1`) add seeded noise to the ranking scores so a re-run can differ.

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::schema::{
    fenced, AllocationProposal, ReportBody, RiskAdjustment, RiskFlagRecord, RiskFlags, RiskReview, SectorNote,
    SectorNotes, TickerFinding, TickerFindings, TickerScore, TickerScores, TickerSentimentRecord, TickerSentiments,
};
use super::{AgentBackend, AgentError, AgentSpec, BackendReply, InvocationMeta, RenderedPrompt, Repair, TokenUsage};
use crate::config::BackendKind;
use crate::market_data::NewsHeadline;
use crate::pipeline::types::{
    Action, AnalysisEntry, AnalysisShortlist, Citation, FailureSignal, PortfolioProposal, ProposalRecord, RiskFlag,
    ScreeningShortlist, Section, ShortlistEntry, TimingDecision, TimingSlate, TIMING_METRICS,
};
use crate::quant::MetricVector;
use crate::sentiment::{failure_patterns, mitigation_for, summarize, SentimentLabel, FAILURE_PATTERNS};

/// Scale of the seeded score noise applied on re-executions.
pub const RERUN_NOISE: f64 = 0.5;
pub const EXTREME_ZSCORE: f64 = 2.0;
pub const FADING_VOLUME: f64 = -0.02;
pub const MIN_VOLATILITY: f64 = 0.05;
pub const VOLATILITY_OUTLIER: f64 = 1.5;
/// Fewest buys the timing summary aims for before giving up.
pub const MIN_BUYS: usize = 20;

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedBackend;

impl AgentBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn supports_repair(&self) -> bool {
        false
    }

    fn complete(
        &self,
        agent: &AgentSpec,
        prompt: &RenderedPrompt,
        meta: InvocationMeta,
        _repairs: &[Repair],
    ) -> Result<BackendReply, AgentError> {
        Ok(BackendReply {
            raw_text: respond(&agent.agent_id, &prompt.view, meta)?,
            usage: TokenUsage::default(),
        })
    }
}

/// The scripted reply for `agent_id` given the agent's view of its inputs.
pub fn respond(agent_id: &str, view: &Value, meta: InvocationMeta) -> Result<String, AgentError> {
    let r = Rules { view, meta, agent_id };
    let out = match agent_id {
        "failure_pattern_analyst" => r.failure_patterns()?,
        "sentiment_analyst" => r.corpus_sentiment()?,
        "postmortem_summary" => r.postmortem_summary()?,
        "sentiment_screener" => r.screening_sentiment()?,
        "trend_screener" => r.trend_scores()?,
        "screening_summary" => r.screening_summary()?,
        "quant_analyst" => r.quant_scores()?,
        "sector_analyst" => r.sector_notes()?,
        "analysis_summary" => r.analysis_summary()?,
        "momentum_analyst" => r.momentum_scores()?,
        "risk_flagger" => r.risk_flags()?,
        "timing_summary" => r.timing_summary()?,
        "allocator" => r.allocator()?,
        "risk_manager" => r.risk_manager()?,
        "portfolio_reviewer" => r.portfolio_reviewer()?,
        other => return Err(AgentError::UnknownAgent(other.to_string())),
    };
    Ok(format!("{}\n", fenced(&out)))
}

// ---------------------------------------------------------------------------
// shared helpers (public so tests can rebuild rankings independently)

/// Cross-sectional z-scores with the population standard deviation; all zeros when
/// the values do not vary.
pub fn zscores(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd <= 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Seeded standard-normal noise for one (seed, agent, symbol).
pub fn rerun_noise(seed: u64, agent_id: &str, symbol: &str) -> f64 {
    let digest = Sha256::digest(format!("{seed}:{agent_id}:{symbol}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes));
    StandardNormal.sample(&mut rng)
}

fn num(v: Option<&Value>) -> Option<f64> {
    v.and_then(Value::as_f64)
}

fn pct(x: f64) -> String {
    format!("{:+.2}%", x * 100.0)
}

fn desc_then_symbol(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

struct Rules<'a> {
    view: &'a Value,
    meta: InvocationMeta,
    agent_id: &'a str,
}

impl Rules<'_> {
    fn bad(&self, what: &str) -> AgentError {
        AgentError::BadContext(format!("{what} (agent {})", self.agent_id))
    }

    fn list(&self, key: &str) -> Result<&Vec<Value>, AgentError> {
        self.view.get(key).and_then(Value::as_array).ok_or_else(|| self.bad(key))
    }

    fn field<T: DeserializeOwned>(&self, key: &str) -> Result<T, AgentError> {
        T::deserialize(self.view.get(key).ok_or_else(|| self.bad(key))?).map_err(|e| self.bad(&format!("{key}: {e}")))
    }

    fn as_of(&self) -> Result<NaiveDate, AgentError> {
        self.field("as_of")
    }

    fn count(&self, key: &str) -> Result<usize, AgentError> {
        self.field(key)
    }

    fn prior<T: DeserializeOwned>(&self, agent: &str) -> Result<T, AgentError> {
        let out = self
            .list("prior_outputs")?
            .iter()
            .find(|p| p.get("agent_id").and_then(Value::as_str) == Some(agent))
            .and_then(|p| p.get("output"))
            .ok_or_else(|| self.bad(&format!("prior output of {agent}")))?;
        T::deserialize(out).map_err(|e| self.bad(&format!("prior output of {agent}: {e}")))
    }

    fn noise(&self, symbol: &str) -> f64 {
        if self.meta.attempt > 1 {
            RERUN_NOISE * rerun_noise(self.meta.seed, self.agent_id, symbol)
        } else {
            0.0
        }
    }

    fn headlines(item: &Value) -> Vec<NewsHeadline> {
        item.get("headlines")
            .and_then(|h| Vec::<NewsHeadline>::deserialize(h).ok())
            .unwrap_or_default()
    }

    fn symbol(item: &Value, key: &str) -> Result<String, AgentError> {
        item.get(key)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AgentError::BadContext(format!("item without {key}")))
    }

    // ---- postmortem ----

    fn failure_patterns(&self) -> Result<Value, AgentError> {
        let findings = self
            .list("corpus")?
            .iter()
            .map(|e| {
                let mut patterns: Vec<String> = Vec::new();
                let mut evidence = Vec::new();
                for h in Self::headlines(e) {
                    let found = failure_patterns(&h.headline);
                    if !found.is_empty() {
                        evidence.push(h.headline.clone());
                    }
                    for p in found {
                        if !patterns.iter().any(|q| q == p) {
                            patterns.push(p.to_string());
                        }
                    }
                }
                patterns.sort_by_key(|p| FAILURE_PATTERNS.iter().position(|(c, _)| c == p));
                Ok(TickerFinding {
                    symbol: Self::symbol(e, "ticker")?,
                    patterns,
                    evidence,
                })
            })
            .collect::<Result<_, AgentError>>()?;
        Ok(to_value(&TickerFindings { findings }))
    }

    fn sentiment_of(items: &[Value], key: &str, keep_flag: impl Fn(&str) -> bool) -> Result<Value, AgentError> {
        let sentiment = items
            .iter()
            .map(|e| {
                let s = summarize(&Self::headlines(e));
                Ok(TickerSentimentRecord {
                    symbol: Self::symbol(e, key)?,
                    score: s.score,
                    label: s.label,
                    failure_flags: s.failure_flags.into_iter().filter(|f| keep_flag(f)).collect(),
                })
            })
            .collect::<Result<_, AgentError>>()?;
        Ok(to_value(&TickerSentiments { sentiment }))
    }

    fn corpus_sentiment(&self) -> Result<Value, AgentError> {
        Self::sentiment_of(self.list("corpus")?, "ticker", |_| true)
    }

    fn postmortem_summary(&self) -> Result<Value, AgentError> {
        let findings: TickerFindings = self.prior("failure_pattern_analyst")?;
        let sentiment: TickerSentiments = self.prior("sentiment_analyst")?;
        let by_symbol: HashMap<&str, &TickerFinding> = findings.findings.iter().map(|f| (f.symbol.as_str(), f)).collect();
        let mut sectors: Vec<(String, Vec<String>)> = Vec::new();
        for e in self.list("corpus")? {
            let sector = e.get("sector").and_then(Value::as_str).unwrap_or("Unclassified").to_string();
            let t = Self::symbol(e, "ticker")?;
            match sectors.iter_mut().find(|(s, _)| *s == sector) {
                Some((_, ts)) => ts.push(t),
                None => sectors.push((sector, vec![t])),
            }
        }
        let mut signals = Vec::new();
        for (sector, tickers) in &sectors {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for t in tickers {
                for p in by_symbol.get(t.as_str()).map(|f| f.patterns.as_slice()).unwrap_or_default() {
                    if let Some(i) = FAILURE_PATTERNS.iter().position(|(c, _)| c == p) {
                        *counts.entry(i).or_default() += 1;
                    }
                }
            }
            // most frequent pattern; ties go to the earlier pattern in the table
            let Some((&idx, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                continue;
            };
            let code = FAILURE_PATTERNS[idx].0;
            let references = tickers
                .iter()
                .filter_map(|t| {
                    let f = by_symbol.get(t.as_str())?;
                    let h = f.evidence.iter().find(|h| failure_patterns(h).contains(&code))?;
                    Some(format!("{t}: {h}"))
                })
                .collect();
            signals.push(FailureSignal {
                signal: code.to_string(),
                affected_sectors: vec![sector.clone()],
                mitigation: mitigation_for(code).to_string(),
                references,
            });
        }
        let mean_score = if sentiment.sentiment.is_empty() {
            0.0
        } else {
            sentiment.sentiment.iter().map(|s| s.score).sum::<f64>() / sentiment.sentiment.len() as f64
        };
        let mut distinct: Vec<&str> = signals.iter().map(|s| s.signal.as_str()).collect();
        distinct.sort();
        distinct.dedup();
        let body = ReportBody {
            sections: vec![
                Section {
                    heading: "Failure patterns".into(),
                    body: signals
                        .iter()
                        .map(|s| format!("{}: {}", s.affected_sectors.join(", "), s.signal))
                        .collect::<Vec<_>>()
                        .join("; "),
                },
                Section {
                    heading: "Sentiment".into(),
                    body: format!(
                        "Mean headline score {mean_score:.3} across {} firms.",
                        sentiment.sentiment.len()
                    ),
                },
                Section {
                    heading: "Mitigations".into(),
                    body: distinct.iter().map(|c| mitigation_for(c)).collect::<Vec<_>>().join("; "),
                },
            ],
            rationale: format!(
                "{} sector groups reviewed; each signal is the most frequent distress pattern in its group and is penalized during screening.",
                sectors.len()
            ),
            references: findings.findings.iter().map(|f| f.symbol.clone()).collect(),
            candidates: signals,
        };
        Ok(to_value(&body))
    }

    // ---- screening ----

    fn postmortem_codes(&self) -> Result<HashSet<String>, AgentError> {
        let signals: Vec<FailureSignal> = self.field("failure_signals")?;
        Ok(signals.into_iter().map(|s| s.signal).collect())
    }

    fn screening_sentiment(&self) -> Result<Value, AgentError> {
        let codes = self.postmortem_codes()?;
        Self::sentiment_of(self.list("tickers")?, "symbol", |f| codes.contains(f))
    }

    fn metrics_of(item: &Value, holder: &str) -> BTreeMap<String, f64> {
        item.get(holder)
            .and_then(Value::as_object)
            .map(|m| m.iter().filter_map(|(k, v)| Some((k.clone(), v.as_f64()?))).collect())
            .unwrap_or_default()
    }

    /// Scores `Σ sign·z(metric)` over the items that have every metric.
    fn zscore_composite(
        &self,
        items: &[Value],
        holder: &str,
        terms: &[(&str, f64)],
    ) -> Result<Vec<TickerScore>, AgentError> {
        let mut rows: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
        for item in items {
            let metrics = Self::metrics_of(item, holder);
            if terms.iter().all(|(m, _)| metrics.contains_key(*m)) {
                let basis = terms.iter().map(|(m, _)| (m.to_string(), metrics[*m])).collect();
                rows.push((Self::symbol(item, "symbol")?, basis));
            }
        }
        let mut scores = vec![0.0; rows.len()];
        for (m, sign) in terms {
            let col: Vec<f64> = rows.iter().map(|(_, b)| b[*m]).collect();
            for (s, z) in scores.iter_mut().zip(zscores(&col)) {
                *s += sign * z;
            }
        }
        Ok(rows
            .into_iter()
            .zip(scores)
            .map(|((symbol, basis), score)| TickerScore {
                score: score + self.noise(&symbol),
                symbol,
                basis,
            })
            .collect())
    }

    fn trend_scores(&self) -> Result<Value, AgentError> {
        let scores = self.zscore_composite(self.list("tickers")?, "metrics", &[("return_21d", 1.0), ("return_5d", 1.0)])?;
        Ok(to_value(&TickerScores { scores }))
    }

    fn screening_summary(&self) -> Result<Value, AgentError> {
        let sentiment: TickerSentiments = self.prior("sentiment_screener")?;
        let trend: TickerScores = self.prior("trend_screener")?;
        let sent: HashMap<&str, &TickerSentimentRecord> = sentiment.sentiment.iter().map(|s| (s.symbol.as_str(), s)).collect();
        let items: HashMap<String, &Value> = self
            .list("tickers")?
            .iter()
            .filter_map(|v| Some((v.get("symbol")?.as_str()?.to_string(), v)))
            .collect();
        let mut ranked: Vec<(String, f64)> = trend
            .scores
            .iter()
            .map(|t| {
                let (s, flags) = sent.get(t.symbol.as_str()).map(|s| (s.score, s.failure_flags.len())).unwrap_or((0.0, 0));
                (t.symbol.clone(), t.score + s - 0.5 * flags as f64)
            })
            .collect();
        ranked.sort_by(desc_then_symbol);
        let n = self.count("target_count")?.clamp(50, 100).min(ranked.len());
        let trend_by: HashMap<&str, &TickerScore> = trend.scores.iter().map(|t| (t.symbol.as_str(), t)).collect();
        let tickers: Vec<ShortlistEntry> = ranked[..n]
            .iter()
            .map(|(symbol, composite)| {
                let basis = &trend_by[symbol.as_str()].basis;
                let s = sent.get(symbol.as_str());
                let label = s.map(|s| s.label).unwrap_or(SentimentLabel::Neutral);
                let headlines = items.get(symbol).map(|v| Self::headlines(v)).unwrap_or_default();
                let mut citations: Vec<Citation> = ["return_21d", "return_5d"]
                    .iter()
                    .map(|m| Citation::Metric {
                        symbol: symbol.clone(),
                        metric: m.to_string(),
                        value: basis[*m],
                    })
                    .collect();
                if let Some(h) = headlines.first() {
                    citations.push(Citation::Headline {
                        symbol: symbol.clone(),
                        text: h.headline.clone(),
                    });
                }
                ShortlistEntry {
                    symbol: symbol.clone(),
                    rationale: format!(
                        "composite {composite:.3}: 21-day return {}, 5-day return {}, {} sentiment over {} headline(s)",
                        pct(basis["return_21d"]),
                        pct(basis["return_5d"]),
                        serde_json::to_value(label).expect("label").as_str().unwrap_or("neutral"),
                        headlines.len()
                    ),
                    sentiment_label: label,
                    citations,
                }
            })
            .collect();
        let flagged = sentiment.sentiment.iter().filter(|s| !s.failure_flags.is_empty()).count();
        let body = ReportBody {
            sections: vec![
                Section {
                    heading: "Shortlist".into(),
                    body: format!("{} of {} scored tickers shortlisted.", tickers.len(), ranked.len()),
                },
                Section {
                    heading: "Excluded".into(),
                    body: format!(
                        "{} tickers lacked 5- or 21-day history; {flagged} carried postmortem failure flags.",
                        items.len() - ranked.len()
                    ),
                },
            ],
            rationale: "Composite = trend z-scores + headline sentiment - 0.5 per postmortem failure flag.".into(),
            references: vec!["trend_screener".into(), "sentiment_screener".into()],
            candidates: ScreeningShortlist {
                as_of: self.as_of()?,
                tickers,
            },
        };
        Ok(to_value(&body))
    }

    // ---- analysis ----

    fn quant_scores(&self) -> Result<Value, AgentError> {
        let scores = self.zscore_composite(
            self.list("candidates")?,
            "metric_vector",
            &[("sharpe", 1.0), ("return_21d", 1.0), ("max_drawdown", -1.0)],
        )?;
        Ok(to_value(&TickerScores { scores }))
    }

    fn sector_notes(&self) -> Result<Value, AgentError> {
        let cands = self.list("candidates")?;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let rows: Vec<(String, String, Option<f64>)> = cands
            .iter()
            .map(|c| {
                let sector = c.get("sector").and_then(Value::as_str).unwrap_or("Unclassified").to_string();
                let r = num(c.get("metric_vector").and_then(|m| m.get("return_21d")));
                if let Some(r) = r {
                    let e = sums.entry(sector.clone()).or_default();
                    e.0 += r;
                    e.1 += 1;
                }
                Ok((Self::symbol(c, "symbol")?, sector, r))
            })
            .collect::<Result<_, AgentError>>()?;
        let notes = rows
            .into_iter()
            .map(|(symbol, sector, r)| {
                let thematic_note = match (r, sums.get(&sector)) {
                    (Some(r), Some((s, k))) => format!(
                        "{sector}: 21-day return {} against a sector average of {} across {k} candidates",
                        pct(r),
                        pct(s / *k as f64)
                    ),
                    _ => format!("{sector}: 21-day return unavailable"),
                };
                SectorNote {
                    symbol,
                    sector,
                    thematic_note,
                }
            })
            .collect();
        Ok(to_value(&SectorNotes { notes }))
    }

    fn analysis_summary(&self) -> Result<Value, AgentError> {
        let scores: TickerScores = self.prior("quant_analyst")?;
        let notes: SectorNotes = self.prior("sector_analyst")?;
        let note_by: HashMap<&str, &SectorNote> = notes.notes.iter().map(|n| (n.symbol.as_str(), n)).collect();
        let cands: HashMap<String, &Value> = self
            .list("candidates")?
            .iter()
            .filter_map(|v| Some((v.get("symbol")?.as_str()?.to_string(), v)))
            .collect();
        let mut ranked: Vec<(String, f64)> = scores.scores.iter().map(|s| (s.symbol.clone(), s.score)).collect();
        ranked.sort_by(desc_then_symbol);
        let n = self.count("target_count")?.clamp(35, 50).min(ranked.len());
        let entries = ranked[..n]
            .iter()
            .map(|(symbol, _)| {
                let c = cands.get(symbol).ok_or_else(|| self.bad(&format!("candidate {symbol}")))?;
                let metric_vector: MetricVector = self.sub(c, "metric_vector")?;
                let cohort_delta: BTreeMap<String, f64> = self.sub(c, "cohort_delta")?;
                let sector = c.get("sector").and_then(Value::as_str).unwrap_or("Unclassified").to_string();
                Ok(AnalysisEntry {
                    symbol: symbol.clone(),
                    metric_vector,
                    cohort_delta,
                    thematic_note: note_by.get(symbol.as_str()).map(|n| n.thematic_note.clone()).unwrap_or_default(),
                    sector,
                })
            })
            .collect::<Result<Vec<_>, AgentError>>()?;
        let priors: Vec<String> = self.field("prior_holdings")?;
        let kept_priors = entries.iter().filter(|e| priors.contains(&e.symbol)).count();
        let body = ReportBody {
            sections: vec![
                Section {
                    heading: "Selection".into(),
                    body: format!("{} of {} scored candidates selected.", entries.len(), ranked.len()),
                },
                Section {
                    heading: "Prior holdings".into(),
                    body: format!("{kept_priors} of {} prior holdings retained.", priors.len()),
                },
            ],
            rationale: "Ranked by z(sharpe) + z(21-day return) - z(max drawdown) across the cohort.".into(),
            references: vec!["quant_analyst".into(), "sector_analyst".into()],
            candidates: AnalysisShortlist {
                as_of: self.as_of()?,
                entries,
            },
        };
        Ok(to_value(&body))
    }

    fn sub<T: DeserializeOwned>(&self, v: &Value, key: &str) -> Result<T, AgentError> {
        T::deserialize(v.get(key).ok_or_else(|| self.bad(key))?).map_err(|e| self.bad(&format!("{key}: {e}")))
    }

    // ---- timing ----

    fn timing_rows(&self) -> Result<Vec<(String, BTreeMap<String, f64>, Vec<NewsHeadline>)>, AgentError> {
        self.list("entries")?
            .iter()
            .map(|e| Ok((Self::symbol(e, "symbol")?, Self::metrics_of(e, "metrics"), Self::headlines(e))))
            .collect()
    }

    fn momentum_scores(&self) -> Result<Value, AgentError> {
        let scores = self
            .timing_rows()?
            .into_iter()
            .filter_map(|(symbol, m, _)| {
                let sortino = *m.get("sortino")?;
                let basis = m.into_iter().filter(|(k, _)| TIMING_METRICS.contains(&k.as_str())).collect();
                Some(TickerScore {
                    score: sortino,
                    symbol,
                    basis,
                })
            })
            .collect();
        Ok(to_value(&TickerScores { scores }))
    }

    fn risk_flags(&self) -> Result<Value, AgentError> {
        let flags = self
            .timing_rows()?
            .into_iter()
            .map(|(symbol, m, headlines)| RiskFlagRecord {
                symbol,
                risk_flags: flags_for(&m, &headlines),
            })
            .collect();
        Ok(to_value(&RiskFlags { flags }))
    }

    fn timing_summary(&self) -> Result<Value, AgentError> {
        let flags: RiskFlags = self.prior("risk_flagger")?;
        let flag_by: HashMap<&str, &Vec<RiskFlag>> = flags.flags.iter().map(|f| (f.symbol.as_str(), &f.risk_flags)).collect();
        let rows = self.timing_rows()?;
        let mut clean: Vec<(String, f64)> = rows
            .iter()
            .filter(|(s, _, _)| flag_by.get(s.as_str()).is_none_or(|f| f.is_empty()))
            .filter_map(|(s, m, _)| Some((s.clone(), m.get("sortino")? + self.noise(s))))
            .collect();
        clean.sort_by(desc_then_symbol);
        let target = self.count("target_buys")?.clamp(MIN_BUYS, 30);
        let n_clean = target.min(clean.len());
        clean.truncate(n_clean);
        // fallback: below the minimum, admit single-flag entries by sortino
        let mut fallback: Vec<(String, f64)> = Vec::new();
        if n_clean < MIN_BUYS {
            fallback = rows
                .iter()
                .filter(|(s, _, _)| {
                    flag_by
                        .get(s.as_str())
                        .is_some_and(|f| primary_flags(f) == 1 && !f.contains(&RiskFlag::MissingData))
                })
                .filter_map(|(s, m, _)| Some((s.clone(), m.get("sortino")? + self.noise(s))))
                .collect();
            fallback.sort_by(desc_then_symbol);
            fallback.truncate(MIN_BUYS - n_clean);
        }
        let n_buys = clean.len() + fallback.len();
        let buy_rank: HashMap<&str, usize> =
            clean.iter().chain(&fallback).enumerate().map(|(i, (s, _))| (s.as_str(), i)).collect();
        let mut histogram: BTreeMap<&str, usize> = BTreeMap::new();
        let decisions: Vec<TimingDecision> = rows
            .iter()
            .map(|(symbol, m, _)| {
                let f = flag_by.get(symbol.as_str()).map(|f| f.to_vec()).unwrap_or_default();
                for flag in &f {
                    *histogram.entry(flag.code()).or_default() += 1;
                }
                let (action, confidence) = match buy_rank.get(symbol.as_str()) {
                    Some(&rank) => (Action::Buy, 0.9 - 0.4 * rank as f64 / n_buys.max(1) as f64),
                    None if primary_flags(&f) >= 2 => (Action::Sell, 0.3),
                    None => (Action::Hold, 0.5),
                };
                let metrics: BTreeMap<String, f64> = m
                    .iter()
                    .filter(|(k, _)| TIMING_METRICS.contains(&k.as_str()))
                    .map(|(k, v)| (k.clone(), *v))
                    .collect();
                let describe = |k: &str, f: &dyn Fn(f64) -> String| metrics.get(k).map(|v| f(*v)).unwrap_or_else(|| "n/a".into());
                let flags_text = if f.is_empty() {
                    "no risk flags".to_string()
                } else {
                    format!("flags: {}", f.iter().map(|x| x.code()).collect::<Vec<_>>().join(", "))
                };
                TimingDecision {
                    symbol: symbol.clone(),
                    action,
                    confidence,
                    justification: format!(
                        "sortino {}, 21-day momentum {}, slope {} per session; {flags_text}",
                        describe("sortino", &|v| format!("{v:.2}")),
                        describe("momentum_21d", &pct),
                        describe("regression_slope", &|v| format!("{:+.3}%", v * 100.0)),
                    ),
                    risk_flags: f,
                    metrics,
                }
            })
            .collect();
        let entry_candidates: Vec<String> = clean.iter().chain(&fallback).map(|(s, _)| s.clone()).collect();
        let count = |a: Action| decisions.iter().filter(|d| d.action == a).count();
        let body = ReportBody {
            sections: vec![
                Section {
                    heading: "Decisions".into(),
                    body: format!(
                        "{} buy, {} hold, {} sell.",
                        count(Action::Buy),
                        count(Action::Hold),
                        count(Action::Sell)
                    ),
                },
                Section {
                    heading: "Risk flags".into(),
                    body: histogram.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join(", "),
                },
            ],
            rationale: if fallback.is_empty() {
                "Unflagged entries ranked by sortino; two or more primary flags trigger a sell.".into()
            } else {
                format!(
                    "Unflagged entries ranked by sortino; only {n_clean} were unflagged, so {} entries with a single primary flag were admitted by sortino. Two or more primary flags trigger a sell.",
                    fallback.len()
                )
            },
            references: vec!["momentum_analyst".into(), "risk_flagger".into()],
            candidates: TimingSlate {
                as_of: self.as_of()?,
                decisions,
                entry_candidates,
            },
        };
        Ok(to_value(&body))
    }

    // ---- portfolio ----

    fn buys(&self) -> Result<Vec<(String, String, f64, Option<f64>)>, AgentError> {
        self.list("buys")?
            .iter()
            .map(|b| {
                Ok((
                    Self::symbol(b, "symbol")?,
                    b.get("sector").and_then(Value::as_str).unwrap_or("Unclassified").to_string(),
                    num(b.get("confidence")).ok_or_else(|| self.bad("buy confidence"))?,
                    num(b.get("volatility_ann")),
                ))
            })
            .collect()
    }

    fn allocator(&self) -> Result<Value, AgentError> {
        let mut buys = self.buys()?;
        buys.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        let n = self.count("target_positions")?.clamp(15, 30).min(buys.len());
        let raw: Vec<f64> = buys[..n]
            .iter()
            .map(|(_, _, c, v)| c / v.unwrap_or(1.0).max(MIN_VOLATILITY))
            .collect();
        let total: f64 = raw.iter().sum();
        let proposals = buys[..n]
            .iter()
            .zip(&raw)
            .map(|((symbol, sector, c, v), r)| ProposalRecord {
                symbol: symbol.clone(),
                weight: if total > 0.0 { r / total } else { 1.0 / n as f64 },
                confidence: *c,
                sector: sector.clone(),
                rationale: format!(
                    "confidence {c:.2}, annualized volatility {}",
                    v.map(|v| format!("{:.1}%", v * 100.0)).unwrap_or_else(|| "n/a".into())
                ),
            })
            .collect();
        Ok(to_value(&AllocationProposal { proposals }))
    }

    fn risk_manager(&self) -> Result<Value, AgentError> {
        let proposal: AllocationProposal = self.prior("allocator")?;
        let vol: HashMap<String, f64> = self.buys()?.into_iter().filter_map(|(s, _, _, v)| Some((s, v?))).collect();
        let mut vols: Vec<f64> = proposal.proposals.iter().filter_map(|p| vol.get(&p.symbol).copied()).collect();
        vols.sort_by(f64::total_cmp);
        let median = match vols.len() {
            0 => return Ok(to_value(&RiskReview { adjustments: vec![] })),
            n if n % 2 == 1 => vols[n / 2],
            n => (vols[n / 2 - 1] + vols[n / 2]) / 2.0,
        };
        let adjustments = proposal
            .proposals
            .iter()
            .filter_map(|p| {
                let v = *vol.get(&p.symbol)?;
                (v > VOLATILITY_OUTLIER * median).then(|| RiskAdjustment {
                    symbol: p.symbol.clone(),
                    multiplier: 0.5,
                    reason: format!(
                        "volatility {:.1}% exceeds {VOLATILITY_OUTLIER}x the proposal median of {:.1}%",
                        v * 100.0,
                        median * 100.0
                    ),
                })
            })
            .collect();
        Ok(to_value(&RiskReview { adjustments }))
    }

    fn portfolio_reviewer(&self) -> Result<Value, AgentError> {
        let proposal: AllocationProposal = self.prior("allocator")?;
        let review: RiskReview = self.prior("risk_manager")?;
        let mult: HashMap<&str, &RiskAdjustment> = review.adjustments.iter().map(|a| (a.symbol.as_str(), a)).collect();
        let mut proposals = proposal.proposals.clone();
        for p in &mut proposals {
            if let Some(a) = mult.get(p.symbol.as_str()) {
                p.weight *= a.multiplier;
                p.rationale = format!("{}; {}", p.rationale, a.reason);
            }
        }
        let total: f64 = proposals.iter().map(|p| p.weight).sum();
        if total > 0.0 {
            for p in &mut proposals {
                p.weight /= total;
            }
        }
        let body = ReportBody {
            sections: vec![
                Section {
                    heading: "Proposed weights".into(),
                    body: format!("{} positions proposed before the concentration normalizer.", proposals.len()),
                },
                Section {
                    heading: "Risk adjustments".into(),
                    body: if review.adjustments.is_empty() {
                        "none".into()
                    } else {
                        review.adjustments.iter().map(|a| format!("{} x{}", a.symbol, a.multiplier)).collect::<Vec<_>>().join(", ")
                    },
                },
            ],
            rationale: "Confidence over volatility, outliers halved, renormalized.".into(),
            references: vec!["allocator".into(), "risk_manager".into()],
            candidates: PortfolioProposal {
                as_of: self.as_of()?,
                proposals,
            },
        };
        Ok(to_value(&body))
    }
}

/// Flags other than `inconsistent_signals`, which only restates a momentum/slope split.
pub fn primary_flags(flags: &[RiskFlag]) -> usize {
    flags.iter().filter(|f| **f != RiskFlag::InconsistentSignals).count()
}

/// Risk flags for one timing entry, in enum order.
pub fn flags_for(m: &BTreeMap<String, f64>, headlines: &[NewsHeadline]) -> Vec<RiskFlag> {
    let mut f = Vec::new();
    let get = |k: &str| m.get(k).copied();
    let (mom, slope, z, vol, sortino) = (
        get("momentum_21d"),
        get("regression_slope"),
        get("zscore_5d"),
        get("volume_trend"),
        get("sortino"),
    );
    if mom.is_some_and(|x| x < 0.0) {
        f.push(RiskFlag::NegativeMomentum);
    }
    if slope.is_some_and(|x| x < 0.0) {
        f.push(RiskFlag::NegativeSlope);
    }
    if z.is_some_and(|x| x.abs() > EXTREME_ZSCORE) {
        f.push(RiskFlag::ExtremeZscore);
    }
    if vol.is_some_and(|x| x < FADING_VOLUME) {
        f.push(RiskFlag::FadingVolume);
    }
    if sortino.is_some_and(|x| x < 0.0) {
        f.push(RiskFlag::NegativeSortino);
    }
    if summarize(headlines).label == SentimentLabel::Negative {
        f.push(RiskFlag::NegativeHeadlines);
    }
    if let (Some(a), Some(b)) = (mom, slope) {
        if (a < 0.0) != (b < 0.0) {
            f.push(RiskFlag::InconsistentSignals);
        }
    }
    if [mom, slope, z, vol, sortino].iter().any(Option::is_none) {
        f.push(RiskFlag::MissingData);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscores_of_constant_are_zero() {
        assert_eq!(zscores(&[2.0, 2.0, 2.0]), [0.0, 0.0, 0.0]);
        let z = zscores(&[1.0, 2.0, 3.0]);
        assert!((z[2] - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn noise_is_seeded() {
        assert_eq!(rerun_noise(1, "a", "X"), rerun_noise(1, "a", "X"));
        assert_ne!(rerun_noise(1, "a", "X"), rerun_noise(2, "a", "X"));
    }

    #[test]
    fn unknown_agent_is_an_error() {
        let meta = InvocationMeta { seed: 0, attempt: 1 };
        assert!(matches!(respond("oracle", &Value::Null, meta), Err(AgentError::UnknownAgent(_))));
    }

    #[test]
    fn flag_rules() {
        let m: BTreeMap<String, f64> = [
            ("momentum_21d", 0.05),
            ("regression_slope", -0.001),
            ("zscore_5d", 2.5),
            ("volume_trend", 0.0),
            ("sortino", 1.0),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
        assert_eq!(
            flags_for(&m, &[]),
            [RiskFlag::NegativeSlope, RiskFlag::ExtremeZscore, RiskFlag::InconsistentSignals]
        );
        assert_eq!(flags_for(&BTreeMap::new(), &[]), [RiskFlag::MissingData]);
    }
}
