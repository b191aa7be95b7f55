//! WebAssembly bindings for the browser demo. Each export takes the text a user pastes
//! into the page and returns a JSON string; the plain functions underneath are what the
//! tests call.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use equicrew_quant::performance;
use equicrew_quant::weights::{self, Caps, Proposal};
use equicrew_quant::{compute_metric_vector, MetricConfig, MetricValue, PriceSeries};
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Numbers separated by whitespace, commas or newlines.
pub fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',' || c == ';')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

fn as_of() -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 1, 31).expect("valid date")
}

/// The fourteen metrics of `closes`, with beta measured against `benchmark` when given.
/// Unavailable metrics carry the reason instead of a number.
pub fn metrics_json(closes: &str, benchmark: &str) -> Result<String, String> {
    let closes = parse_numbers(closes)?;
    let mut bench = parse_numbers(benchmark)?;
    if bench.is_empty() {
        bench = closes.clone();
    }
    let series = PriceSeries::from_closes("INPUT", &closes, as_of()).map_err(|e| e.to_string())?;
    let bench = PriceSeries::from_closes("BENCH", &bench, as_of()).map_err(|e| e.to_string())?;
    let v = compute_metric_vector(&series, &bench, &MetricConfig::default()).map_err(|e| e.to_string())?;
    let rows: Vec<Value> = v
        .iter()
        .map(|(name, value)| match value {
            MetricValue::Available(x) => json!({"metric": name, "value": x}),
            MetricValue::Unavailable { unavailable } => json!({"metric": name, "unavailable": unavailable}),
        })
        .collect();
    Ok(json!({"sessions": closes.len(), "metrics": rows}).to_string())
}

#[derive(Serialize)]
struct NormalizedOut {
    positions: Vec<weights::Weighted>,
    weight_sum: f64,
    max_weight: f64,
    sector_shares: BTreeMap<String, f64>,
}

/// Lines of `symbol,weight,confidence,sector` normalized under the given caps.
pub fn normalize_json(rows: &str, max_weight: f64, max_sector_share: f64) -> Result<String, String> {
    let mut proposals = Vec::new();
    for (i, line) in rows.lines().map(str::trim).enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(format!("line {}: expected symbol,weight,confidence,sector", i + 1));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: not a number: {s:?}", i + 1));
        proposals.push(Proposal {
            symbol: cols[0].to_string(),
            weight: num(cols[1])?,
            confidence: num(cols[2])?,
            sector: cols[3].to_string(),
        });
    }
    let caps = Caps {
        max_weight,
        max_sector_share,
        min_positions: 1,
        ..Caps::default()
    };
    let positions = weights::normalize(&proposals, &caps).map_err(|e| e.to_string())?;
    let mut sector_shares = BTreeMap::new();
    for p in &positions {
        *sector_shares.entry(p.sector.clone()).or_insert(0.0) += p.weight;
    }
    let out = NormalizedOut {
        weight_sum: positions.iter().map(|p| p.weight).sum(),
        max_weight: positions.iter().map(|p| p.weight).fold(0.0, f64::max),
        positions,
        sector_shares,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Cumulative return, win rate, weekly volatility and growth curve of weekly returns,
/// plus the correlation with a benchmark series of the same length when given.
pub fn performance_json(weekly: &str, benchmark: &str) -> Result<String, String> {
    let weekly = parse_numbers(weekly)?;
    let bench = parse_numbers(benchmark)?;
    let err = |e: performance::PerformanceError| e.to_string();
    let mut out = json!({
        "weeks": weekly.len(),
        "cumulative": performance::cumulative_return(&weekly).map_err(err)?,
        "win_rate": performance::win_rate(&weekly).map_err(err)?,
        "weekly_volatility": performance::weekly_volatility(&weekly).ok(),
        "growth": performance::growth_curve(&weekly),
    });
    if !bench.is_empty() {
        out["correlation"] = json!(performance::correlation(&weekly, &bench).map_err(err)?);
        out["benchmark_cumulative"] = json!(performance::cumulative_return(&bench).map_err(err)?);
    }
    Ok(out.to_string())
}

#[wasm_bindgen]
pub fn metrics(closes: &str, benchmark: &str) -> Result<String, JsError> {
    metrics_json(closes, benchmark).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn normalize(rows: &str, max_weight: f64, max_sector_share: f64) -> Result<String, JsError> {
    normalize_json(rows, max_weight, max_sector_share).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn performance(weekly: &str, benchmark: &str) -> Result<String, JsError> {
    performance_json(weekly, benchmark).map_err(|e| JsError::new(&e))
}
