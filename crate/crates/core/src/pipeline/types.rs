use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::quant::MetricVector;
use crate::sentiment::SentimentLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Postmortem,
    Screening,
    Analysis,
    Timing,
    Portfolio,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Postmortem,
        Stage::Screening,
        Stage::Analysis,
        Stage::Timing,
        Stage::Portfolio,
    ];

    /// 1-based position in the pipeline.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Postmortem => "postmortem",
            Stage::Screening => "screening",
            Stage::Analysis => "analysis",
            Stage::Timing => "timing",
            Stage::Portfolio => "portfolio",
        }
    }

    pub fn dir_name(self) -> String {
        format!("stage-{}-{}", self.number(), self.name())
    }

    pub fn next(self) -> Option<Stage> {
        Stage::ALL.get(self.number()).copied()
    }

    pub fn has_checkpoint(self) -> bool {
        self != Stage::Portfolio
    }

    /// Inclusive list-size bounds the stage output must satisfy.
    pub fn bounds(self) -> Option<(usize, usize)> {
        match self {
            Stage::Postmortem => None,
            Stage::Screening => Some((50, 100)),
            Stage::Analysis => Some((35, 50)),
            Stage::Timing => Some((20, 30)),
            Stage::Portfolio => Some((15, 30)),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub heading: String,
    pub body: String,
}

/// Structured output of one crew. `candidates` holds the stage payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrewReport {
    pub crew_name: Stage,
    pub produced_at: chrono::DateTime<chrono::Utc>,
    pub inputs_digest: String,
    pub sections: Vec<Section>,
    pub candidates: serde_json::Value,
    pub rationale: String,
    pub references: Vec<String>,
}

// ---- postmortem ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSignal {
    pub signal: String,
    pub affected_sectors: Vec<String>,
    pub mitigation: String,
    pub references: Vec<String>,
}

// ---- screening ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Citation {
    Metric { symbol: String, metric: String, value: f64 },
    Headline { symbol: String, text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortlistEntry {
    pub symbol: String,
    pub rationale: String,
    pub sentiment_label: SentimentLabel,
    pub citations: Vec<Citation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningShortlist {
    pub as_of: NaiveDate,
    pub tickers: Vec<ShortlistEntry>,
}

// ---- analysis ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisEntry {
    pub symbol: String,
    pub metric_vector: MetricVector,
    /// Available metrics only: value minus the cohort mean.
    pub cohort_delta: BTreeMap<String, f64>,
    pub sector: String,
    pub thematic_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisShortlist {
    pub as_of: NaiveDate,
    pub entries: Vec<AnalysisEntry>,
}

// ---- timing ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Buy,
    Hold,
    Sell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskFlag {
    NegativeMomentum,
    NegativeSlope,
    ExtremeZscore,
    FadingVolume,
    NegativeSortino,
    NegativeHeadlines,
    InconsistentSignals,
    MissingData,
}

impl RiskFlag {
    pub fn code(self) -> &'static str {
        match self {
            RiskFlag::NegativeMomentum => "negative_momentum",
            RiskFlag::NegativeSlope => "negative_slope",
            RiskFlag::ExtremeZscore => "extreme_zscore",
            RiskFlag::FadingVolume => "fading_volume",
            RiskFlag::NegativeSortino => "negative_sortino",
            RiskFlag::NegativeHeadlines => "negative_headlines",
            RiskFlag::InconsistentSignals => "inconsistent_signals",
            RiskFlag::MissingData => "missing_data",
        }
    }
}

/// The only metrics timing decisions may quote.
pub const TIMING_METRICS: [&str; 5] = ["sortino", "zscore_5d", "momentum_21d", "regression_slope", "volume_trend"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingDecision {
    pub symbol: String,
    pub action: Action,
    pub confidence: f64,
    pub risk_flags: Vec<RiskFlag>,
    pub justification: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSlate {
    pub as_of: NaiveDate,
    pub decisions: Vec<TimingDecision>,
    pub entry_candidates: Vec<String>,
}

// ---- portfolio ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRecord {
    pub symbol: String,
    pub weight: f64,
    pub confidence: f64,
    pub sector: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioProposal {
    pub as_of: NaiveDate,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub symbol: String,
    pub weight: f64,
    pub rationale: String,
    pub sector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Annualized, from the sample covariance of daily returns over the risk window.
    pub expected_volatility: f64,
    pub max_weight: f64,
    pub sector_max_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioAllocation {
    pub as_of: NaiveDate,
    pub positions: Vec<Position>,
    pub diagnostics: Diagnostics,
}

impl PortfolioAllocation {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["symbol", "weight", "sector", "rationale"]).expect("in-memory write");
        for p in &self.positions {
            w.write_record([p.symbol.as_str(), &p.weight.to_string(), &p.sector, &p.rationale])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn symbols(&self) -> Vec<&str> {
        self.positions.iter().map(|p| p.symbol.as_str()).collect()
    }
}
