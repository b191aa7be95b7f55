//! Weekly performance of published allocations against benchmark trackers.
//!
//! A week runs close-to-close on adjusted closes from the rebalance date to the next;
//! portfolio and benchmark returns go through the same arithmetic.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::{write_atomic, write_json};
use crate::market_data::{DataProvider, PriceBar};
use crate::pipeline::types::PortfolioAllocation;
use crate::quant::performance::{
    correlation, cumulative_return, growth_curve, weekly_portfolio_return, weekly_volatility, win_rate, PerformanceError,
};

/// Column and map key for the portfolio series.
pub const PORTFOLIO: &str = "portfolio";

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("no completed weeks to evaluate")]
    EmptyHistory,
    #[error("week {week}: {source}")]
    Week {
        week: usize,
        #[source]
        source: PerformanceError,
    },
    #[error("week {week}: end date {end} is not after start date {start}")]
    BadWeek { week: usize, start: NaiveDate, end: NaiveDate },
    #[error(transparent)]
    Performance(#[from] PerformanceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One holding period: the allocation set at `start` and the prices needed to mark it.
#[derive(Debug, Clone)]
pub struct WeekInput {
    pub label: String,
    pub allocation: PortfolioAllocation,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Symbol -> (start price, end price) for every position and benchmark that could be priced.
    pub prices: HashMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyRecord {
    pub week_index: usize,
    pub label: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub portfolio_return: f64,
    /// Benchmarks that could be priced this week.
    pub benchmark_returns: BTreeMap<String, f64>,
    /// Benchmarks missing a start or end price this week.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_benchmarks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub weekly: Vec<WeeklyRecord>,
    /// Series names: `portfolio` plus each benchmark priced in every week.
    pub cumulative: BTreeMap<String, f64>,
    /// Portfolio win rate.
    pub win_rate: f64,
    pub series_win_rates: BTreeMap<String, f64>,
    /// Present with at least two weeks.
    pub weekly_volatility: BTreeMap<String, f64>,
    /// Portfolio against each benchmark; present with at least three non-constant weeks.
    pub correlations: BTreeMap<String, f64>,
    /// Series left out of the summary, with the reason.
    pub excluded: BTreeMap<String, String>,
}

impl EvaluationReport {
    /// Series in report order: portfolio first, then benchmarks alphabetically.
    pub fn series(&self) -> Vec<String> {
        let mut names = vec![PORTFOLIO.to_string()];
        names.extend(self.cumulative.keys().filter(|k| *k != PORTFOLIO).cloned());
        names
    }

    fn returns_of(&self, series: &str) -> Vec<f64> {
        self.weekly
            .iter()
            .map(|w| {
                if series == PORTFOLIO {
                    w.portfolio_return
                } else {
                    w.benchmark_returns[series]
                }
            })
            .collect()
    }

    /// `week,portfolio,<bench>...` growth of one unit, week 0 = 1.
    pub fn growth_csv(&self) -> String {
        let series = self.series();
        let curves: Vec<Vec<f64>> = series.iter().map(|s| growth_curve(&self.returns_of(s))).collect();
        let mut out = format!("week,{}\n", series.join(","));
        for week in 0..=self.weekly.len() {
            let row: Vec<String> = curves.iter().map(|c| c[week].to_string()).collect();
            out.push_str(&format!("{week},{}\n", row.join(",")));
        }
        out
    }

    /// `series,weekly_volatility,cumulative_return`; volatility blank below two weeks.
    pub fn riskreturn_csv(&self) -> String {
        let mut out = String::from("series,weekly_volatility,cumulative_return\n");
        for s in self.series() {
            let vol = self.weekly_volatility.get(&s).map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{s},{vol},{}\n", self.cumulative[&s]));
        }
        out
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>12} {:>10} {:>12}\n", "series", "cumulative", "win_rate", "weekly_vol");
        for s in self.series() {
            let vol = self.weekly_volatility.get(&s).map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
            out.push_str(&format!(
                "{:<10} {:>12.6} {:>10.4} {:>12}\n",
                s, self.cumulative[&s], self.series_win_rates[&s], vol
            ));
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), EvaluationError> {
        write_json(&dir.join("report.json"), self)?;
        write_atomic(&dir.join("growth.csv"), self.growth_csv().as_bytes())?;
        write_atomic(&dir.join("riskreturn.csv"), self.riskreturn_csv().as_bytes())?;
        Ok(())
    }
}

/// Builds the report. A benchmark missing in any week is flagged on that week and left
/// out of the summary; a missing portfolio price is an error.
pub fn evaluate(weeks: &[WeekInput], benchmarks: &[String]) -> Result<EvaluationReport, EvaluationError> {
    if weeks.is_empty() {
        return Err(EvaluationError::EmptyHistory);
    }
    let mut weekly = Vec::with_capacity(weeks.len());
    for (i, w) in weeks.iter().enumerate() {
        let week = i + 1;
        if w.end <= w.start {
            return Err(EvaluationError::BadWeek {
                week,
                start: w.start,
                end: w.end,
            });
        }
        let weights: Vec<(String, f64)> = w.allocation.positions.iter().map(|p| (p.symbol.clone(), p.weight)).collect();
        let portfolio_return =
            weekly_portfolio_return(&weights, &w.prices).map_err(|source| EvaluationError::Week { week, source })?;
        let mut benchmark_returns = BTreeMap::new();
        let mut missing_benchmarks = Vec::new();
        for b in benchmarks {
            match weekly_portfolio_return(&[(b.clone(), 1.0)], &w.prices) {
                Ok(r) => {
                    benchmark_returns.insert(b.to_lowercase(), r);
                }
                Err(PerformanceError::MissingPrice(_)) => missing_benchmarks.push(b.to_lowercase()),
                Err(source) => return Err(EvaluationError::Week { week, source }),
            }
        }
        weekly.push(WeeklyRecord {
            week_index: week,
            label: w.label.clone(),
            start_date: w.start,
            end_date: w.end,
            portfolio_return,
            benchmark_returns,
            missing_benchmarks,
        });
    }

    let mut excluded = BTreeMap::new();
    let mut complete: Vec<String> = Vec::new();
    for b in benchmarks.iter().map(|b| b.to_lowercase()) {
        let gaps: Vec<String> =
            weekly.iter().filter(|w| w.missing_benchmarks.contains(&b)).map(|w| w.week_index.to_string()).collect();
        if gaps.is_empty() {
            complete.push(b);
        } else {
            excluded.insert(b, format!("unpriced in week(s) {}", gaps.join(", ")));
        }
    }
    for w in &mut weekly {
        w.benchmark_returns.retain(|k, _| complete.contains(k));
    }

    let mut report = EvaluationReport {
        weekly,
        cumulative: BTreeMap::new(),
        win_rate: 0.0,
        series_win_rates: BTreeMap::new(),
        weekly_volatility: BTreeMap::new(),
        correlations: BTreeMap::new(),
        excluded,
    };
    for s in std::iter::once(PORTFOLIO.to_string()).chain(complete.iter().cloned()) {
        let r = report.returns_of(&s);
        report.cumulative.insert(s.clone(), cumulative_return(&r)?);
        report.series_win_rates.insert(s.clone(), win_rate(&r)?);
        if let Ok(v) = weekly_volatility(&r) {
            report.weekly_volatility.insert(s.clone(), v);
        }
    }
    report.win_rate = report.series_win_rates[PORTFOLIO];
    let p = report.returns_of(PORTFOLIO);
    for b in &complete {
        match correlation(&p, &report.returns_of(b)) {
            Ok(c) => {
                report.correlations.insert(b.clone(), c);
            }
            Err(e) => {
                report.excluded.insert(format!("correlation:{b}"), e.to_string());
            }
        }
    }
    Ok(report)
}

/// Adjusted close of the last bar on or before `date`, looking back at most a week.
pub fn price_at(bars: &[PriceBar], date: NaiveDate) -> Option<f64> {
    bars.iter()
        .filter(|b| b.date <= date && b.date > date - Duration::days(7))
        .max_by_key(|b| b.date)
        .map(|b| b.adjusted_close)
}

/// Start and end prices from the provider; unpriceable symbols are listed, not dropped.
pub fn fetch_week_prices(
    provider: &dyn DataProvider,
    symbols: &[String],
    start: NaiveDate,
    end: NaiveDate,
) -> (HashMap<String, (f64, f64)>, Vec<String>) {
    let mut prices = HashMap::new();
    let mut missing = Vec::new();
    for s in symbols {
        let bars = provider.daily_bars(s, start - Duration::days(10), end).unwrap_or_default();
        match (price_at(&bars, start), price_at(&bars, end)) {
            (Some(a), Some(b)) => {
                prices.insert(s.clone(), (a, b));
            }
            _ => missing.push(s.clone()),
        }
    }
    (prices, missing)
}
