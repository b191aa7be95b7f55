//! One function per stage: build the context, run the crew, gate the report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, NaiveTime, Utc};
use serde_json::Value;
use thiserror::Error;

use super::gates::{self, GateError};
use super::market::MarketView;
use super::types::{
    AnalysisShortlist, CrewReport, Diagnostics, FailureSignal, PortfolioAllocation, PortfolioProposal, Position,
    ScreeningShortlist, Stage, TimingSlate,
};
use crate::agents::{run_crew, AgentBackend, AgentError, CrewError, CrewRunOptions, CrewSpec, InvocationMeta, TokenUsage};
use crate::config::PipelineSettings;
use crate::fsutil::sha256_hex;
use crate::market_data::DelistedCorpusEntry;
use crate::quant::weights::{concentration, normalize, Caps, Proposal};
use crate::quant::{CohortBenchmark, SESSIONS_PER_YEAR};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("the delisted-firm corpus has no headlines on or before the as-of date")]
    EmptyCorpus,
    #[error(transparent)]
    Crew(#[from] CrewError),
    #[error("gate rejected the report: {0}")]
    Gate(#[from] GateError),
    #[error("infeasible allocation: {0}")]
    InfeasibleAllocation(String),
    #[error("no crew definition for stage {0}")]
    MissingCrew(Stage),
    #[error("cohort: {0}")]
    Cohort(String),
}

impl StageError {
    /// The gate failure behind this error, whether raised directly or inside an agent.
    pub fn gate_error(&self) -> Option<&GateError> {
        match self {
            StageError::Gate(g) => Some(g),
            StageError::Crew(c) => match c.agent_error() {
                AgentError::Gate(g) => Some(g),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn agent_error(&self) -> Option<&AgentError> {
        match self {
            StageError::Crew(c) => Some(c.agent_error()),
            _ => None,
        }
    }
}

/// Seed for one stage attempt, derived from the run seed.
pub fn stage_seed(seed: u64, stage: Stage, attempt: u32) -> u64 {
    let digest = sha256_hex(format!("{seed}:{stage}:{attempt}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Reports are stamped with logical time (as-of day, 21:00 UTC) so replays match.
pub fn logical_time(as_of: chrono::NaiveDate) -> DateTime<Utc> {
    as_of.and_time(NaiveTime::from_hms_opt(21, 0, 0).expect("valid time")).and_utc()
}

pub struct StageContext<'a> {
    pub market: &'a MarketView,
    pub backend: &'a dyn AgentBackend,
    pub crews: &'a BTreeMap<Stage, CrewSpec>,
    pub settings: &'a PipelineSettings,
    pub caps: &'a Caps,
    pub seed: u64,
    pub attempt: u32,
    pub repair_budget: u32,
    pub transcript: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome<T> {
    pub report: CrewReport,
    pub payload: T,
    pub usage: TokenUsage,
}

impl StageContext<'_> {
    fn crew(&self, stage: Stage) -> Result<&CrewSpec, StageError> {
        self.crews.get(&stage).ok_or(StageError::MissingCrew(stage))
    }

    fn run<T>(
        &self,
        stage: Stage,
        inbound: &serde_json::Map<String, Value>,
        gate: &dyn Fn(&Value) -> Result<T, GateError>,
    ) -> Result<StageOutcome<T>, StageError> {
        let check = |body: &Value| gate(body.get("candidates").unwrap_or(&Value::Null)).map(|_| ());
        let opts = CrewRunOptions {
            token_budget: self.settings.token_budget,
            repair_budget: self.repair_budget,
            meta: InvocationMeta {
                seed: stage_seed(self.seed, stage, self.attempt),
                attempt: self.attempt,
            },
            produced_at: logical_time(self.market.snapshot.as_of()),
            report_gate: Some(&check),
            transcript: self.transcript,
        };
        let run = run_crew(self.crew(stage)?, inbound, self.backend, &opts)?;
        let payload = gate(&run.report.candidates)?;
        Ok(StageOutcome {
            usage: run.usage(),
            report: run.report,
            payload,
        })
    }
}

pub fn run_postmortem_stage(
    ctx: &StageContext<'_>,
    corpus: &[DelistedCorpusEntry],
) -> Result<StageOutcome<Vec<FailureSignal>>, StageError> {
    let inbound = ctx.market.postmortem_context(corpus);
    if inbound["corpus"].as_array().is_none_or(Vec::is_empty) {
        return Err(StageError::EmptyCorpus);
    }
    ctx.run(Stage::Postmortem, &inbound, &gates::postmortem)
}

pub fn run_screening_stage(
    ctx: &StageContext<'_>,
    signals: &[FailureSignal],
) -> Result<StageOutcome<ScreeningShortlist>, StageError> {
    let inbound = ctx.market.screening_context(signals, ctx.settings.targets.screening);
    ctx.run(Stage::Screening, &inbound, &|c| gates::screening(c, ctx.market))
}

/// Cohort and benchmark the analysis stage (and its gate) use for a given shortlist.
pub fn analysis_basis(
    market: &MarketView,
    shortlist: &ScreeningShortlist,
) -> Result<(Vec<String>, CohortBenchmark, BTreeSet<String>), StageError> {
    let cohort = market.analysis_cohort(shortlist);
    let benchmark = market.cohort_benchmark(&cohort).map_err(StageError::Cohort)?;
    Ok((cohort, benchmark, market.eligible_for_analysis(shortlist)))
}

pub fn run_analysis_stage(
    ctx: &StageContext<'_>,
    shortlist: &ScreeningShortlist,
) -> Result<StageOutcome<AnalysisShortlist>, StageError> {
    let (cohort, benchmark, eligible) = analysis_basis(ctx.market, shortlist)?;
    let inbound = ctx.market.analysis_context(&cohort, &benchmark, ctx.settings.targets.analysis);
    ctx.run(Stage::Analysis, &inbound, &|c| gates::analysis(c, ctx.market, &eligible, &benchmark))
}

pub fn run_timing_stage(
    ctx: &StageContext<'_>,
    analysis: &AnalysisShortlist,
) -> Result<StageOutcome<TimingSlate>, StageError> {
    let inbound = ctx.market.timing_context(analysis, ctx.settings.targets.buys);
    ctx.run(Stage::Timing, &inbound, &|c| gates::timing(c, ctx.market, analysis))
}

#[derive(Debug, Clone)]
pub struct PortfolioOutcome {
    pub report: CrewReport,
    pub proposal: PortfolioProposal,
    pub allocation: PortfolioAllocation,
    pub usage: TokenUsage,
}

pub fn run_portfolio_stage(ctx: &StageContext<'_>, slate: &TimingSlate) -> Result<PortfolioOutcome, StageError> {
    let (min, _) = Stage::Portfolio.bounds().expect("bounded");
    if slate.entry_candidates.len() < min {
        return Err(StageError::InfeasibleAllocation(format!(
            "{} buy candidates, at least {min} needed",
            slate.entry_candidates.len()
        )));
    }
    let inbound = ctx.market.portfolio_context(slate, ctx.caps, ctx.settings.targets.positions);
    let out = ctx.run(Stage::Portfolio, &inbound, &|c| gates::portfolio(c, slate))?;
    let allocation = allocate(ctx.market, &out.payload, ctx.caps)?;
    Ok(PortfolioOutcome {
        report: out.report,
        proposal: out.payload,
        allocation,
        usage: out.usage,
    })
}

/// Applies the deterministic normalizer to agent-proposed weights and attaches
/// diagnostics.
pub fn allocate(market: &MarketView, proposal: &PortfolioProposal, caps: &Caps) -> Result<PortfolioAllocation, StageError> {
    let proposals: Vec<Proposal> = proposal
        .proposals
        .iter()
        .map(|p| Proposal {
            symbol: p.symbol.clone(),
            weight: p.weight,
            confidence: p.confidence,
            sector: market.sector(&p.symbol).to_string(),
        })
        .collect();
    let weighted = normalize(&proposals, caps).map_err(|e| StageError::InfeasibleAllocation(e.to_string()))?;
    let (max_weight, sector_max_share) = concentration(&weighted);
    let rationale: BTreeMap<&str, &str> =
        proposal.proposals.iter().map(|p| (p.symbol.as_str(), p.rationale.as_str())).collect();
    let positions: Vec<Position> = weighted
        .iter()
        .map(|w| Position {
            symbol: w.symbol.clone(),
            weight: w.weight,
            rationale: rationale.get(w.symbol.as_str()).copied().unwrap_or_default().to_string(),
            sector: w.sector.clone(),
        })
        .collect();
    let pairs: Vec<(String, f64)> = positions.iter().map(|p| (p.symbol.clone(), p.weight)).collect();
    Ok(PortfolioAllocation {
        as_of: proposal.as_of,
        diagnostics: Diagnostics {
            expected_volatility: expected_volatility(market, &pairs),
            max_weight,
            sector_max_share,
        },
        positions,
    })
}

/// sqrt(w' S w * 252) with S the sample covariance of daily returns over the last
/// `risk_window` sessions every position traded. Zero when fewer than two such returns exist.
pub fn expected_volatility(market: &MarketView, weights: &[(String, f64)]) -> f64 {
    let mut common: Option<BTreeSet<chrono::NaiveDate>> = None;
    let mut closes: Vec<BTreeMap<chrono::NaiveDate, f64>> = Vec::new();
    for (s, _) in weights {
        let m: BTreeMap<_, _> = market
            .snapshot
            .series(s)
            .map(|series| series.bars().iter().map(|b| (b.date, b.adjusted_close)).collect())
            .unwrap_or_default();
        let dates: BTreeSet<_> = m.keys().copied().collect();
        common = Some(match common {
            None => dates,
            Some(c) => c.intersection(&dates).copied().collect(),
        });
        closes.push(m);
    }
    let dates: Vec<_> = common.unwrap_or_default().into_iter().collect();
    let take = (market.metric_config.risk_window + 1).min(dates.len());
    let dates = &dates[dates.len() - take..];
    if dates.len() < 3 {
        return 0.0;
    }
    let returns: Vec<Vec<f64>> = closes
        .iter()
        .map(|m| dates.windows(2).map(|d| m[&d[1]] / m[&d[0]] - 1.0).collect())
        .collect();
    let n = dates.len() - 1;
    let means: Vec<f64> = returns.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let mut var = 0.0;
    for i in 0..weights.len() {
        for j in 0..weights.len() {
            let cov = (0..n)
                .map(|t| (returns[i][t] - means[i]) * (returns[j][t] - means[j]))
                .sum::<f64>()
                / (n as f64 - 1.0);
            var += weights[i].1 * weights[j].1 * cov;
        }
    }
    (var.max(0.0) * SESSIONS_PER_YEAR).sqrt()
}
