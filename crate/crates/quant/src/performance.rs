//! Weekly performance arithmetic: portfolio returns between rebalances and the
//! summary statistics reported over a run history.

use std::collections::HashMap;

use thiserror::Error;

use crate::stats::{mean, sample_std};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PerformanceError {
    #[error("empty return series")]
    EmptySeries,
    #[error("need at least {needed} observations, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("series has zero variance")]
    DegenerateSeries,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no start/end price for: {}", .0.join(", "))]
    MissingPrice(Vec<String>),
}

/// Weighted sum of constituent returns, `sum_i w_i * (end_i / start_i - 1)`.
pub fn weekly_portfolio_return(
    weights: &[(String, f64)],
    prices: &HashMap<String, (f64, f64)>,
) -> Result<f64, PerformanceError> {
    let missing: Vec<String> = weights
        .iter()
        .filter(|(s, _)| !prices.contains_key(s))
        .map(|(s, _)| s.clone())
        .collect();
    if !missing.is_empty() {
        return Err(PerformanceError::MissingPrice(missing));
    }
    Ok(weights
        .iter()
        .map(|(s, w)| {
            let (start, end) = prices[s];
            w * (end / start - 1.0)
        })
        .sum())
}

pub fn cumulative_return(weekly: &[f64]) -> Result<f64, PerformanceError> {
    if weekly.is_empty() {
        return Err(PerformanceError::EmptySeries);
    }
    Ok(weekly.iter().map(|r| 1.0 + r).product::<f64>() - 1.0)
}

/// Growth of one unit: `[1, (1+r1), (1+r1)(1+r2), ...]`.
pub fn growth_curve(weekly: &[f64]) -> Vec<f64> {
    let mut level = 1.0;
    let mut curve = Vec::with_capacity(weekly.len() + 1);
    curve.push(level);
    for r in weekly {
        level *= 1.0 + r;
        curve.push(level);
    }
    curve
}

/// Share of weeks with a strictly positive return.
pub fn win_rate(weekly: &[f64]) -> Result<f64, PerformanceError> {
    if weekly.is_empty() {
        return Err(PerformanceError::EmptySeries);
    }
    Ok(weekly.iter().filter(|r| **r > 0.0).count() as f64 / weekly.len() as f64)
}

pub fn weekly_volatility(weekly: &[f64]) -> Result<f64, PerformanceError> {
    if weekly.len() < 2 {
        return Err(PerformanceError::InsufficientHistory {
            needed: 2,
            available: weekly.len(),
        });
    }
    Ok(sample_std(weekly))
}

/// Pearson correlation, clamped to [-1, 1] against rounding.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64, PerformanceError> {
    if a.len() != b.len() {
        return Err(PerformanceError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(PerformanceError::InsufficientHistory {
            needed: 3,
            available: a.len(),
        });
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(PerformanceError::DegenerateSeries);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
