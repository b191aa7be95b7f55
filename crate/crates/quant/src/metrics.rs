//! Per-ticker indicators. Every function is pure; price-based indicators read
//! `adjusted_close` and index sessions by bar position, not calendar day.

use std::collections::HashMap;

use chrono::NaiveDate;
use thiserror::Error;

use crate::series::{PriceSeries, ReturnSeries};
use crate::stats::{index_slope, mean, ols, sample_std, DEGENERATE_STD};
use crate::SESSIONS_PER_YEAR;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("insufficient history: need {needed}, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("zero volatility")]
    ZeroVolatility,
    #[error("no downside observations")]
    NoDownside,
    #[error("benchmark returns have zero variance")]
    DegenerateBenchmark,
    #[error("insufficient overlap with benchmark: need {needed} common dates, have {available}")]
    InsufficientOverlap { needed: usize, available: usize },
    #[error("mean volume is zero")]
    ZeroVolume,
    #[error("window must be at least {minimum}, got {got}")]
    InvalidWindow { minimum: usize, got: usize },
    #[error("empty cohort")]
    EmptyCohort,
}

fn require(available: usize, needed: usize) -> Result<(), MetricError> {
    if available < needed {
        Err(MetricError::InsufficientHistory { needed, available })
    } else {
        Ok(())
    }
}

fn require_window(got: usize, minimum: usize) -> Result<(), MetricError> {
    if got < minimum {
        Err(MetricError::InvalidWindow { minimum, got })
    } else {
        Ok(())
    }
}

/// Price change over the trailing `horizon` sessions.
pub fn horizon_return(series: &PriceSeries, horizon: usize) -> Result<f64, MetricError> {
    require_window(horizon, 1)?;
    require(series.len(), horizon + 1)?;
    let bars = series.bars();
    let last = bars.len() - 1;
    Ok(bars[last].adjusted_close / bars[last - horizon].adjusted_close - 1.0)
}

/// Sample standard deviation of daily returns, annualized with sqrt(252).
pub fn annualized_volatility(returns: &ReturnSeries) -> Result<f64, MetricError> {
    require(returns.len(), 2)?;
    Ok(sample_std(&returns.daily_returns) * SESSIONS_PER_YEAR.sqrt())
}

/// Largest peak-to-trough decline as a fraction of the running peak.
pub fn max_drawdown(series: &PriceSeries) -> Result<f64, MetricError> {
    require(series.len(), 2)?;
    let mut peak = f64::MIN;
    let mut worst = 0.0_f64;
    for bar in series.bars() {
        peak = peak.max(bar.adjusted_close);
        worst = worst.max((peak - bar.adjusted_close) / peak);
    }
    Ok(worst)
}

fn daily_excess(returns: &ReturnSeries, risk_free_annual: f64) -> Vec<f64> {
    let daily_rf = risk_free_annual / SESSIONS_PER_YEAR;
    returns.daily_returns.iter().map(|r| r - daily_rf).collect()
}

pub fn sharpe(returns: &ReturnSeries, risk_free_annual: f64) -> Result<f64, MetricError> {
    require(returns.len(), 2)?;
    let std = sample_std(&returns.daily_returns);
    if std <= DEGENERATE_STD {
        return Err(MetricError::ZeroVolatility);
    }
    let excess = daily_excess(returns, risk_free_annual);
    Ok(mean(&excess) / std * SESSIONS_PER_YEAR.sqrt())
}

/// Downside deviation averages squared shortfalls over all observations, not only the
/// negative ones.
pub fn sortino(returns: &ReturnSeries, risk_free_annual: f64) -> Result<f64, MetricError> {
    require(returns.len(), 2)?;
    let excess = daily_excess(returns, risk_free_annual);
    if !excess.iter().any(|e| *e < 0.0) {
        return Err(MetricError::NoDownside);
    }
    let downside_sq: f64 = excess.iter().map(|e| e.min(0.0).powi(2)).sum();
    let downside_dev = (downside_sq / excess.len() as f64).sqrt();
    Ok(mean(&excess) / downside_dev * SESSIONS_PER_YEAR.sqrt())
}

/// OLS of asset daily returns on benchmark daily returns over their common dates.
/// Returns `(beta, annualized alpha)`.
pub fn beta_alpha(asset: &ReturnSeries, benchmark: &ReturnSeries) -> Result<(f64, f64), MetricError> {
    let bench_by_date: HashMap<NaiveDate, f64> = benchmark
        .dates
        .iter()
        .copied()
        .zip(benchmark.daily_returns.iter().copied())
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = asset
        .dates
        .iter()
        .zip(&asset.daily_returns)
        .filter_map(|(d, r)| bench_by_date.get(d).map(|b| (*b, *r)))
        .unzip();
    if xs.len() < 3 {
        return Err(MetricError::InsufficientOverlap {
            needed: 3,
            available: xs.len(),
        });
    }
    let (slope, intercept) = ols(&xs, &ys).ok_or(MetricError::DegenerateBenchmark)?;
    Ok((slope, intercept * SESSIONS_PER_YEAR))
}

/// Wilder-smoothed relative strength index over 14 periods.
pub fn rsi_14(series: &PriceSeries) -> Result<f64, MetricError> {
    const PERIOD: usize = 14;
    require(series.len(), PERIOD + 1)?;
    let closes = series.adjusted_closes();
    let changes: Vec<f64> = closes.windows(2).map(|w| w[1] - w[0]).collect();
    let mut avg_gain = changes[..PERIOD].iter().map(|c| c.max(0.0)).sum::<f64>() / PERIOD as f64;
    let mut avg_loss = changes[..PERIOD].iter().map(|c| (-c).max(0.0)).sum::<f64>() / PERIOD as f64;
    for c in &changes[PERIOD..] {
        avg_gain = (13.0 * avg_gain + c.max(0.0)) / 14.0;
        avg_loss = (13.0 * avg_loss + (-c).max(0.0)) / 14.0;
    }
    Ok(match (avg_gain == 0.0, avg_loss == 0.0) {
        // flat window: neither side has strength
        (true, true) => 50.0,
        (_, true) => 100.0,
        (true, _) => 0.0,
        _ => 100.0 - 100.0 / (1.0 + avg_gain / avg_loss),
    })
}

/// Z-score of the latest 5-session return against the trailing `baseline` rolling
/// 5-session returns (the latest window included).
pub fn zscore_5d(series: &PriceSeries, baseline: usize) -> Result<f64, MetricError> {
    require_window(baseline, 2)?;
    require(series.len(), baseline + 5)?;
    let closes = series.adjusted_closes();
    let rolling: Vec<f64> = closes.windows(6).map(|w| w[5] / w[0] - 1.0).collect();
    let window = &rolling[rolling.len() - baseline..];
    let std = sample_std(window);
    if std <= DEGENERATE_STD {
        return Err(MetricError::ZeroVolatility);
    }
    Ok((window[window.len() - 1] - mean(window)) / std)
}

/// OLS slope of daily volume over the trailing window, divided by the window's mean volume.
pub fn volume_trend(series: &PriceSeries, window: usize) -> Result<f64, MetricError> {
    require_window(window, 2)?;
    require(series.len(), window)?;
    let volumes = series.tail(window).volumes();
    let mean_volume = mean(&volumes);
    if mean_volume == 0.0 {
        return Err(MetricError::ZeroVolume);
    }
    Ok(index_slope(&volumes) / mean_volume)
}

pub fn price_vs_ma5(series: &PriceSeries) -> Result<f64, MetricError> {
    require(series.len(), 5)?;
    let closes = series.tail(5).adjusted_closes();
    Ok(closes[4] / mean(&closes) - 1.0)
}

/// OLS slope of adjusted close over the trailing window, normalized by the window's
/// first close (fractional drift per session).
pub fn regression_slope(series: &PriceSeries, window: usize) -> Result<f64, MetricError> {
    require_window(window, 2)?;
    require(series.len(), window)?;
    let closes = series.tail(window).adjusted_closes();
    Ok(index_slope(&closes) / closes[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn as_of() -> NaiveDate {
        "2025-06-06".parse().unwrap()
    }

    fn closes(xs: &[f64]) -> PriceSeries {
        PriceSeries::from_closes("T", xs, as_of()).unwrap()
    }

    fn rets(xs: &[f64]) -> ReturnSeries {
        ReturnSeries::from_values("T", xs, as_of())
    }

    fn close_to(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn horizon_return_cases() {
        assert_eq!(horizon_return(&closes(&[100.0; 22]), 21).unwrap(), 0.0);
        let mut xs = vec![100.0; 22];
        xs[21] = 110.0;
        assert!(close_to(horizon_return(&closes(&xs), 21).unwrap(), 0.10, 1e-12));
        assert_eq!(
            horizon_return(&closes(&[100.0; 10]), 21),
            Err(MetricError::InsufficientHistory {
                needed: 22,
                available: 10
            })
        );
    }

    #[test]
    fn volatility_cases() {
        assert!(annualized_volatility(&rets(&[0.01; 21])).unwrap() < 1e-15);
        let alt: Vec<f64> = (0..21).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        // 11 of +0.01 and 10 of -0.01: mean = 0.01/21
        let m: f64 = 0.01 / 21.0;
        let ss = 11.0 * (0.01 - m).powi(2) + 10.0 * (-0.01 - m).powi(2);
        let expected = (ss / 20.0).sqrt() * 252f64.sqrt();
        assert!(close_to(annualized_volatility(&rets(&alt)).unwrap(), expected, 1e-12));
        assert!(matches!(
            annualized_volatility(&rets(&[0.01])),
            Err(MetricError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn drawdown_cases() {
        assert!(close_to(max_drawdown(&closes(&[100.0, 120.0, 90.0, 110.0])).unwrap(), 0.25, 1e-15));
        assert_eq!(max_drawdown(&closes(&[1.0, 2.0, 3.0, 3.0])).unwrap(), 0.0);
        assert_eq!(max_drawdown(&closes(&[100.0, 50.0])).unwrap(), 0.5);
    }

    #[test]
    fn sharpe_cases() {
        assert_eq!(sharpe(&rets(&[0.0; 10]), 0.0), Err(MetricError::ZeroVolatility));
        let xs: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.02 } else { 0.0 }).collect();
        // mean 0.01, sample std = sqrt(20 * 0.0001 / 19)
        let expected = 0.01 / (20.0 * 0.0001 / 19.0f64).sqrt() * 252f64.sqrt();
        assert!(close_to(sharpe(&rets(&xs), 0.0).unwrap(), expected, 1e-12));
        // excess mean exactly zero with constant returns: std still dominates
        assert_eq!(sharpe(&rets(&[0.001; 5]), 0.252), Err(MetricError::ZeroVolatility));
    }

    #[test]
    fn sortino_cases() {
        assert_eq!(sortino(&rets(&[0.01, 0.02, 0.03]), 0.0), Err(MetricError::NoDownside));
        let dd = (0.0001f64 / 2.0).sqrt();
        assert!(close_to(sortino(&rets(&[0.01, -0.01]), 0.0).unwrap(), 0.0 / dd, 1e-12));
        let got = sortino(&rets(&[-0.01; 6]), 0.0).unwrap();
        assert!(close_to(got, -252f64.sqrt(), 1e-12));
    }

    #[test]
    fn beta_alpha_cases() {
        let bench: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) / 500.0).collect();
        let (b, a) = beta_alpha(&rets(&bench), &rets(&bench)).unwrap();
        assert!(close_to(b, 1.0, 1e-12) && a.abs() < 1e-12);
        let doubled: Vec<f64> = bench.iter().map(|x| 2.0 * x).collect();
        let (b, a) = beta_alpha(&rets(&doubled), &rets(&bench)).unwrap();
        assert!(close_to(b, 2.0, 1e-12) && a.abs() < 1e-12);
        let shifted: Vec<f64> = bench.iter().map(|x| x + 0.001).collect();
        let (b, a) = beta_alpha(&rets(&shifted), &rets(&bench)).unwrap();
        assert!(close_to(b, 1.0, 1e-12) && close_to(a, 0.252, 1e-12));
        assert_eq!(
            beta_alpha(&rets(&bench), &rets(&[0.0; 30])),
            Err(MetricError::DegenerateBenchmark)
        );
    }

    #[test]
    fn beta_inner_joins_on_dates() {
        let bench = rets(&[0.01, -0.02, 0.03, 0.0]);
        let mut asset = bench.clone();
        asset.dates = asset.dates.iter().map(|d| *d + chrono::Duration::days(2)).collect();
        // only two common dates remain
        assert_eq!(
            beta_alpha(&asset, &bench),
            Err(MetricError::InsufficientOverlap {
                needed: 3,
                available: 2
            })
        );
    }

    #[test]
    fn rsi_extremes() {
        let up: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        assert_eq!(rsi_14(&closes(&up)).unwrap(), 100.0);
        let down: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        assert_eq!(rsi_14(&closes(&down)).unwrap(), 0.0);
        assert!(matches!(rsi_14(&closes(&up[..14])), Err(MetricError::InsufficientHistory { .. })));
    }

    #[test]
    fn zscore_cases() {
        let growth: Vec<f64> = (0..40).map(|i| 100.0 * 1.01f64.powi(i)).collect();
        assert_eq!(zscore_5d(&closes(&growth), 21), Err(MetricError::ZeroVolatility));
        assert!(matches!(
            zscore_5d(&closes(&growth[..25]), 21),
            Err(MetricError::InsufficientHistory { needed: 26, .. })
        ));
    }

    #[test]
    fn volume_trend_cases() {
        let as_of = as_of();
        let c = vec![10.0; 21];
        let flat = PriceSeries::from_closes_and_volumes("T", &c, &[500; 21], as_of).unwrap();
        assert_eq!(volume_trend(&flat, 21).unwrap(), 0.0);
        // 0, 100, ..., 2000: mean 1000
        let vols: Vec<u64> = (0..21).map(|i| 100 * i as u64).collect();
        let rising = PriceSeries::from_closes_and_volumes("T", &c, &vols, as_of).unwrap();
        assert!(close_to(volume_trend(&rising, 21).unwrap(), 0.1, 1e-12));
        let zero = PriceSeries::from_closes_and_volumes("T", &c, &[0; 21], as_of).unwrap();
        assert_eq!(volume_trend(&zero, 21), Err(MetricError::ZeroVolume));
    }

    #[test]
    fn ma5_cases() {
        assert_eq!(price_vs_ma5(&closes(&[7.0; 9])).unwrap(), 0.0);
        let got = price_vs_ma5(&closes(&[100.0, 100.0, 100.0, 100.0, 110.0])).unwrap();
        assert!(close_to(got, 0.0784313725490196, 1e-12));
        assert!(matches!(price_vs_ma5(&closes(&[1.0; 4])), Err(MetricError::InsufficientHistory { .. })));
    }

    #[test]
    fn slope_cases() {
        assert_eq!(regression_slope(&closes(&[50.0; 21]), 21).unwrap(), 0.0);
        let line: Vec<f64> = (0..21).map(|i| 100.0 + i as f64).collect();
        assert!(close_to(regression_slope(&closes(&line), 21).unwrap(), 0.01, 1e-12));
        assert!(matches!(
            regression_slope(&closes(&[1.0, 2.0, 3.0]), 21),
            Err(MetricError::InsufficientHistory { .. })
        ));
    }
}
