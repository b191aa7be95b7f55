//! The per-ticker metric vector and cohort (global-mean) benchmarking.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::metrics::{self, MetricError};
use crate::series::PriceSeries;

/// Field names of [`MetricVector`], in serialization order.
pub const METRIC_NAMES: [&str; 14] = [
    "return_21d",
    "return_5d",
    "momentum_21d",
    "volatility_ann",
    "max_drawdown",
    "sharpe",
    "sortino",
    "beta",
    "alpha_ann",
    "rsi_14",
    "zscore_5d",
    "volume_trend",
    "price_vs_ma5",
    "regression_slope",
];

/// Window and rate settings. Every window counts trading sessions present in the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub risk_free_annual: f64,
    /// Daily returns used for volatility, Sharpe, Sortino and drawdown.
    pub risk_window: usize,
    /// Upper bound on common daily returns used for beta/alpha.
    pub beta_window: usize,
    pub zscore_baseline: usize,
    pub volume_window: usize,
    pub slope_window: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            risk_free_annual: 0.0,
            risk_window: 21,
            beta_window: 63,
            zscore_baseline: 21,
            volume_window: 21,
            slope_window: 21,
        }
    }
}

impl MetricConfig {
    /// Bars needed for every metric in the vector to be available.
    pub fn full_history(&self) -> usize {
        [
            22,
            self.risk_window + 1,
            self.beta_window + 1,
            self.zscore_baseline + 5,
            self.volume_window,
            self.slope_window,
        ]
        .into_iter()
        .max()
        .unwrap_or(22)
    }
}

/// A metric value or an explicit, reasoned absence. Never NaN, never a silent zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Available(f64),
    Unavailable { unavailable: String },
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Available(v) => Some(*v),
            MetricValue::Unavailable { .. } => None,
        }
    }

    pub fn is_available(&self) -> bool {
        matches!(self, MetricValue::Available(_))
    }
}

impl From<Result<f64, MetricError>> for MetricValue {
    fn from(r: Result<f64, MetricError>) -> Self {
        match r {
            Ok(v) if v.is_finite() => MetricValue::Available(v),
            Ok(v) => MetricValue::Unavailable {
                unavailable: format!("non-finite result {v}"),
            },
            Err(e) => MetricValue::Unavailable {
                unavailable: e.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub ticker: String,
    pub as_of: NaiveDate,
    pub return_21d: MetricValue,
    pub return_5d: MetricValue,
    /// Same quantity as `return_21d`; kept under its own name.
    pub momentum_21d: MetricValue,
    pub volatility_ann: MetricValue,
    pub max_drawdown: MetricValue,
    pub sharpe: MetricValue,
    pub sortino: MetricValue,
    pub beta: MetricValue,
    pub alpha_ann: MetricValue,
    pub rsi_14: MetricValue,
    pub zscore_5d: MetricValue,
    pub volume_trend: MetricValue,
    pub price_vs_ma5: MetricValue,
    pub regression_slope: MetricValue,
}

impl MetricVector {
    pub fn metric(&self, name: &str) -> Option<&MetricValue> {
        Some(match name {
            "return_21d" => &self.return_21d,
            "return_5d" => &self.return_5d,
            "momentum_21d" => &self.momentum_21d,
            "volatility_ann" => &self.volatility_ann,
            "max_drawdown" => &self.max_drawdown,
            "sharpe" => &self.sharpe,
            "sortino" => &self.sortino,
            "beta" => &self.beta,
            "alpha_ann" => &self.alpha_ann,
            "rsi_14" => &self.rsi_14,
            "zscore_5d" => &self.zscore_5d,
            "volume_trend" => &self.volume_trend,
            "price_vs_ma5" => &self.price_vs_ma5,
            "regression_slope" => &self.regression_slope,
            _ => return None,
        })
    }

    /// Available value of `name`, if any.
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metric(name).and_then(MetricValue::value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &MetricValue)> + '_ {
        METRIC_NAMES
            .iter()
            .map(move |name| (*name, self.metric(name).expect("known metric")))
    }

    pub fn available_count(&self) -> usize {
        self.iter().filter(|(_, v)| v.is_available()).count()
    }

    /// Each available metric minus its cohort mean.
    pub fn cohort_delta(&self, benchmark: &CohortBenchmark) -> BTreeMap<String, f64> {
        self.iter()
            .filter_map(|(name, v)| {
                let value = v.value()?;
                let mean = benchmark.metric_means.get(name)?;
                Some((name.to_string(), value - mean))
            })
            .collect()
    }
}

/// Assembles every metric for `series`. Metrics whose history requirement is not met are
/// recorded as unavailable; the call only fails when nothing at all can be computed.
pub fn compute_metric_vector(
    series: &PriceSeries,
    benchmark: &PriceSeries,
    config: &MetricConfig,
) -> Result<MetricVector, MetricError> {
    let returns = series.returns();
    let rf = config.risk_free_annual;

    let risk_returns = if returns.len() >= config.risk_window {
        Ok(returns.tail(config.risk_window))
    } else {
        Err(MetricError::InsufficientHistory {
            needed: config.risk_window + 1,
            available: series.len(),
        })
    };
    let risk = |f: &dyn Fn(&crate::ReturnSeries) -> Result<f64, MetricError>| -> MetricValue {
        risk_returns.as_ref().map_err(Clone::clone).and_then(f).into()
    };

    let drawdown = if returns.len() >= config.risk_window {
        metrics::max_drawdown(&series.tail(config.risk_window + 1))
    } else {
        Err(MetricError::InsufficientHistory {
            needed: config.risk_window + 1,
            available: series.len(),
        })
    };

    let (beta, alpha_ann) = match metrics::beta_alpha(
        &returns.tail(config.beta_window),
        &benchmark.returns(),
    ) {
        Ok((b, a)) => (Ok(b), Ok(a)),
        Err(e) => (Err(e.clone()), Err(e)),
    };

    let return_21d: MetricValue = metrics::horizon_return(series, 21).into();
    let vector = MetricVector {
        ticker: series.ticker().to_string(),
        as_of: series.as_of(),
        momentum_21d: return_21d.clone(),
        return_21d,
        return_5d: metrics::horizon_return(series, 5).into(),
        volatility_ann: risk(&metrics::annualized_volatility),
        max_drawdown: drawdown.into(),
        sharpe: risk(&|r| metrics::sharpe(r, rf)),
        sortino: risk(&|r| metrics::sortino(r, rf)),
        beta: beta.into(),
        alpha_ann: alpha_ann.into(),
        rsi_14: metrics::rsi_14(series).into(),
        zscore_5d: metrics::zscore_5d(series, config.zscore_baseline).into(),
        volume_trend: metrics::volume_trend(series, config.volume_window).into(),
        price_vs_ma5: metrics::price_vs_ma5(series).into(),
        regression_slope: metrics::regression_slope(series, config.slope_window).into(),
    };
    if vector.available_count() == 0 {
        return Err(MetricError::InsufficientHistory {
            needed: 5,
            available: series.len(),
        });
    }
    Ok(vector)
}

/// Per-metric cohort means, each over the tickers where that metric is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortBenchmark {
    pub as_of: NaiveDate,
    pub cohort_size: usize,
    pub metric_means: BTreeMap<String, f64>,
    /// Number of tickers contributing to each mean.
    pub metric_counts: BTreeMap<String, usize>,
}

pub fn global_mean_benchmark(vectors: &[MetricVector]) -> Result<CohortBenchmark, MetricError> {
    let first = vectors.first().ok_or(MetricError::EmptyCohort)?;
    let mut metric_means = BTreeMap::new();
    let mut metric_counts = BTreeMap::new();
    for name in METRIC_NAMES {
        let values: Vec<f64> = vectors.iter().filter_map(|v| v.get(name)).collect();
        if values.is_empty() {
            continue;
        }
        metric_means.insert(
            name.to_string(),
            values.iter().sum::<f64>() / values.len() as f64,
        );
        metric_counts.insert(name.to_string(), values.len());
    }
    Ok(CohortBenchmark {
        as_of: first.as_of,
        cohort_size: vectors.len(),
        metric_means,
        metric_counts,
    })
}
