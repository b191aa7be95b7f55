//! Engine-side view of one pinned snapshot: metric vectors, sectors, prior holdings,
//! and the inbound context each crew receives.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use super::types::{AnalysisShortlist, FailureSignal, ScreeningShortlist, TimingSlate, TIMING_METRICS};
use crate::config::UNCLASSIFIED;
use crate::market_data::{end_of_day, DelistedCorpusEntry, Snapshot};
use crate::quant::weights::Caps;
use crate::quant::{compute_metric_vector, global_mean_benchmark, CohortBenchmark, MetricConfig, MetricVector};

/// Metrics shown to the screening crew.
pub const SCREENING_METRICS: [&str; 5] = ["return_21d", "return_5d", "zscore_5d", "volatility_ann", "rsi_14"];

pub struct MarketView {
    pub snapshot: Snapshot,
    pub sectors: BTreeMap<String, String>,
    /// Prior holdings that made it into the snapshot.
    pub priors: Vec<String>,
    pub metric_config: MetricConfig,
    vectors: BTreeMap<String, MetricVector>,
    /// Tickers whose vector could not be computed at all, with the reason.
    pub vector_errors: BTreeMap<String, String>,
}

impl MarketView {
    /// Computes every universe ticker's metric vector against the first benchmark.
    pub fn new(
        snapshot: Snapshot,
        sectors: BTreeMap<String, String>,
        priors: Vec<String>,
        metric_config: MetricConfig,
    ) -> Result<Self, String> {
        let bench_name = snapshot
            .manifest
            .benchmarks
            .first()
            .ok_or_else(|| "snapshot has no benchmark".to_string())?
            .clone();
        let bench = snapshot
            .series(&bench_name)
            .ok_or_else(|| format!("benchmark {bench_name} missing from snapshot"))?
            .clone();
        let results: Vec<(String, Result<MetricVector, String>)> = snapshot
            .universe()
            .par_iter()
            .map(|t| {
                let r = match snapshot.series(t) {
                    Some(s) => compute_metric_vector(s, &bench, &metric_config).map_err(|e| e.to_string()),
                    None => Err("no series".into()),
                };
                (t.clone(), r)
            })
            .collect();
        let mut vectors = BTreeMap::new();
        let mut vector_errors = BTreeMap::new();
        for (t, r) in results {
            match r {
                Ok(v) => {
                    vectors.insert(t, v);
                }
                Err(e) => {
                    vector_errors.insert(t, e);
                }
            }
        }
        let priors = priors.into_iter().filter(|p| snapshot.contains(p)).collect();
        Ok(Self {
            snapshot,
            sectors,
            priors,
            metric_config,
            vectors,
            vector_errors,
        })
    }

    pub fn vector(&self, symbol: &str) -> Option<&MetricVector> {
        self.vectors.get(symbol)
    }

    pub fn sector(&self, symbol: &str) -> &str {
        self.sectors.get(symbol).map(String::as_str).unwrap_or(UNCLASSIFIED)
    }

    fn pick(&self, symbol: &str, names: &[&str]) -> Map<String, Value> {
        let mut m = Map::new();
        if let Some(v) = self.vector(symbol) {
            for n in names {
                if let Some(x) = v.get(n) {
                    m.insert(n.to_string(), json!(x));
                }
            }
        }
        m
    }

    fn headlines(&self, symbol: &str) -> Value {
        serde_json::to_value(self.snapshot.headlines(symbol)).expect("serializable")
    }

    fn as_of(&self) -> Value {
        json!(self.snapshot.as_of())
    }

    /// Corpus entries with headlines published after the as-of day removed; entries
    /// left without headlines are dropped.
    pub fn postmortem_context(&self, corpus: &[DelistedCorpusEntry]) -> Map<String, Value> {
        let cutoff = end_of_day(self.snapshot.as_of());
        let visible: Vec<DelistedCorpusEntry> = corpus
            .iter()
            .filter_map(|e| {
                let mut e = e.clone();
                e.headlines.retain(|h| h.published_at < cutoff);
                (!e.headlines.is_empty()).then_some(e)
            })
            .collect();
        let mut m = Map::new();
        m.insert("as_of".into(), self.as_of());
        m.insert("corpus".into(), serde_json::to_value(visible).expect("serializable"));
        m
    }

    pub fn screening_context(&self, signals: &[FailureSignal], target_count: usize) -> Map<String, Value> {
        let tickers: Vec<Value> = self
            .snapshot
            .universe()
            .iter()
            .map(|t| {
                json!({
                    "symbol": t,
                    "sector": self.sector(t),
                    "metrics": self.pick(t, &SCREENING_METRICS),
                    "headlines": self.headlines(t),
                })
            })
            .collect();
        let mut m = Map::new();
        m.insert("as_of".into(), self.as_of());
        m.insert("failure_signals".into(), serde_json::to_value(signals).expect("serializable"));
        m.insert("tickers".into(), Value::Array(tickers));
        m.insert("target_count".into(), json!(target_count));
        m
    }

    /// Shortlist order first, then prior holdings not already on it; symbols without a
    /// metric vector are left out.
    pub fn analysis_cohort(&self, shortlist: &ScreeningShortlist) -> Vec<String> {
        let mut seen = BTreeSet::new();
        shortlist
            .tickers
            .iter()
            .map(|t| &t.symbol)
            .chain(&self.priors)
            .filter(|s| self.vectors.contains_key(*s) && seen.insert(s.as_str()))
            .cloned()
            .collect()
    }

    pub fn eligible_for_analysis(&self, shortlist: &ScreeningShortlist) -> BTreeSet<String> {
        shortlist.tickers.iter().map(|t| t.symbol.clone()).chain(self.priors.iter().cloned()).collect()
    }

    pub fn cohort_benchmark(&self, cohort: &[String]) -> Result<CohortBenchmark, String> {
        let vs: Vec<MetricVector> = cohort.iter().filter_map(|s| self.vector(s).cloned()).collect();
        global_mean_benchmark(&vs).map_err(|e| e.to_string())
    }

    pub fn analysis_context(
        &self,
        cohort: &[String],
        benchmark: &CohortBenchmark,
        target_count: usize,
    ) -> Map<String, Value> {
        let candidates: Vec<Value> = cohort
            .iter()
            .filter_map(|s| {
                let v = self.vector(s)?;
                Some(json!({
                    "symbol": s,
                    "sector": self.sector(s),
                    "metric_vector": v,
                    "cohort_delta": v.cohort_delta(benchmark),
                    "headlines": self.headlines(s),
                }))
            })
            .collect();
        let mut m = Map::new();
        m.insert("as_of".into(), self.as_of());
        m.insert("candidates".into(), Value::Array(candidates));
        m.insert("cohort_benchmark".into(), serde_json::to_value(benchmark).expect("serializable"));
        m.insert("prior_holdings".into(), json!(self.priors));
        m.insert("target_count".into(), json!(target_count));
        m
    }

    pub fn timing_context(&self, analysis: &AnalysisShortlist, target_buys: usize) -> Map<String, Value> {
        let entries: Vec<Value> = analysis
            .entries
            .iter()
            .map(|e| {
                json!({
                    "symbol": e.symbol,
                    "sector": self.sector(&e.symbol),
                    "metrics": self.pick(&e.symbol, &TIMING_METRICS),
                    "headlines": self.headlines(&e.symbol),
                })
            })
            .collect();
        let mut m = Map::new();
        m.insert("as_of".into(), self.as_of());
        m.insert("entries".into(), Value::Array(entries));
        m.insert("target_buys".into(), json!(target_buys));
        m
    }

    pub fn portfolio_context(&self, slate: &TimingSlate, caps: &Caps, target_positions: usize) -> Map<String, Value> {
        let buys: Vec<Value> = slate
            .entry_candidates
            .iter()
            .map(|s| {
                let confidence = slate.decisions.iter().find(|d| &d.symbol == s).map(|d| d.confidence);
                let mut b = json!({
                    "symbol": s,
                    "sector": self.sector(s),
                    "confidence": confidence,
                });
                if let Some(v) = self.vector(s).and_then(|v| v.get("volatility_ann")) {
                    b["volatility_ann"] = json!(v);
                }
                b
            })
            .collect();
        let mut m = Map::new();
        m.insert("as_of".into(), self.as_of());
        m.insert("buys".into(), Value::Array(buys));
        m.insert("caps".into(), serde_json::to_value(caps).expect("serializable"));
        m.insert("target_positions".into(), json!(target_positions));
        m
    }
}
