use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("{ticker}: bar {date} violates OHLC bounds")]
    OhlcBounds { ticker: String, date: NaiveDate },
    #[error("{ticker}: bar {date} has a non-positive or non-finite price")]
    NonPositivePrice { ticker: String, date: NaiveDate },
    #[error("{ticker}: bars not strictly increasing at {date}")]
    Unordered { ticker: String, date: NaiveDate },
    #[error("{ticker}: bar {date} is after as-of date {as_of}")]
    LookAhead {
        ticker: String,
        date: NaiveDate,
        as_of: NaiveDate,
    },
}

/// One daily OHLCV bar. Indicators read `adjusted_close`; `close` is kept for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adjusted_close: f64,
    pub volume: u64,
}

impl PriceBar {
    /// Bar whose every price field equals `price`.
    pub fn flat(date: NaiveDate, price: f64, volume: u64) -> Self {
        Self {
            date,
            open: price,
            high: price,
            low: price,
            close: price,
            adjusted_close: price,
            volume,
        }
    }

    fn check(&self, ticker: &str) -> Result<(), SeriesError> {
        let prices = [self.open, self.high, self.low, self.close, self.adjusted_close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(SeriesError::NonPositivePrice {
                ticker: ticker.to_string(),
                date: self.date,
            });
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(SeriesError::OhlcBounds {
                ticker: ticker.to_string(),
                date: self.date,
            });
        }
        Ok(())
    }
}

/// Time-ordered bars for one ticker, every one dated on or before `as_of`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    ticker: String,
    bars: Vec<PriceBar>,
    as_of: NaiveDate,
}

impl PriceSeries {
    pub fn new(
        ticker: impl Into<String>,
        bars: Vec<PriceBar>,
        as_of: NaiveDate,
    ) -> Result<Self, SeriesError> {
        let ticker = ticker.into();
        for (i, bar) in bars.iter().enumerate() {
            bar.check(&ticker)?;
            if bar.date > as_of {
                return Err(SeriesError::LookAhead {
                    ticker,
                    date: bar.date,
                    as_of,
                });
            }
            if i > 0 && bars[i - 1].date >= bar.date {
                return Err(SeriesError::Unordered {
                    ticker,
                    date: bar.date,
                });
            }
        }
        Ok(Self { ticker, bars, as_of })
    }

    /// Builds a series from adjusted closes on consecutive calendar days ending at `as_of`.
    /// Handy for synthetic inputs; volumes default to 1_000_000.
    pub fn from_closes(ticker: &str, closes: &[f64], as_of: NaiveDate) -> Result<Self, SeriesError> {
        let volumes = vec![1_000_000; closes.len()];
        Self::from_closes_and_volumes(ticker, closes, &volumes, as_of)
    }

    pub fn from_closes_and_volumes(
        ticker: &str,
        closes: &[f64],
        volumes: &[u64],
        as_of: NaiveDate,
    ) -> Result<Self, SeriesError> {
        let n = closes.len() as i64;
        let bars = closes
            .iter()
            .zip(volumes)
            .enumerate()
            .map(|(i, (&c, &v))| {
                let date = as_of - chrono::Duration::days(n - 1 - i as i64);
                PriceBar::flat(date, c, v)
            })
            .collect();
        Self::new(ticker, bars, as_of)
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn bars(&self) -> &[PriceBar] {
        &self.bars
    }

    pub fn as_of(&self) -> NaiveDate {
        self.as_of
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.bars.last().map(|b| b.date)
    }

    pub fn adjusted_closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.adjusted_close).collect()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.volume as f64).collect()
    }

    /// The trailing `n` bars (or all of them when shorter) as a new series.
    pub fn tail(&self, n: usize) -> PriceSeries {
        let start = self.bars.len().saturating_sub(n);
        PriceSeries {
            ticker: self.ticker.clone(),
            bars: self.bars[start..].to_vec(),
            as_of: self.as_of,
        }
    }

    /// Scales every price by `factor`. Volumes are untouched.
    pub fn scaled(&self, factor: f64) -> PriceSeries {
        let bars = self
            .bars
            .iter()
            .map(|b| PriceBar {
                open: b.open * factor,
                high: b.high * factor,
                low: b.low * factor,
                close: b.close * factor,
                adjusted_close: b.adjusted_close * factor,
                ..b.clone()
            })
            .collect();
        PriceSeries {
            ticker: self.ticker.clone(),
            bars,
            as_of: self.as_of,
        }
    }

    pub fn returns(&self) -> ReturnSeries {
        ReturnSeries::from_prices(self)
    }
}

/// Simple daily returns on adjusted close, dated by the later bar of each pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub ticker: String,
    pub daily_returns: Vec<f64>,
    pub dates: Vec<NaiveDate>,
}

impl ReturnSeries {
    pub fn from_prices(series: &PriceSeries) -> Self {
        let bars = series.bars();
        let (daily_returns, dates) = bars
            .windows(2)
            .map(|w| (w[1].adjusted_close / w[0].adjusted_close - 1.0, w[1].date))
            .unzip();
        Self {
            ticker: series.ticker().to_string(),
            daily_returns,
            dates,
        }
    }

    /// Returns on consecutive synthetic dates ending at `end`.
    pub fn from_values(ticker: &str, returns: &[f64], end: NaiveDate) -> Self {
        let n = returns.len() as i64;
        let dates = (0..n)
            .map(|i| end - chrono::Duration::days(n - 1 - i))
            .collect();
        Self {
            ticker: ticker.to_string(),
            daily_returns: returns.to_vec(),
            dates,
        }
    }

    pub fn len(&self) -> usize {
        self.daily_returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.daily_returns.is_empty()
    }

    pub fn tail(&self, n: usize) -> ReturnSeries {
        let start = self.len().saturating_sub(n);
        ReturnSeries {
            ticker: self.ticker.clone(),
            daily_returns: self.daily_returns[start..].to_vec(),
            dates: self.dates[start..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn rejects_bar_after_as_of() {
        let bars = vec![PriceBar::flat(d("2025-06-09"), 10.0, 1)];
        let err = PriceSeries::new("X", bars, d("2025-06-06")).unwrap_err();
        assert!(matches!(err, SeriesError::LookAhead { .. }));
    }

    #[test]
    fn rejects_duplicate_dates() {
        let bars = vec![
            PriceBar::flat(d("2025-06-02"), 10.0, 1),
            PriceBar::flat(d("2025-06-02"), 11.0, 1),
        ];
        assert!(matches!(
            PriceSeries::new("X", bars, d("2025-06-06")),
            Err(SeriesError::Unordered { .. })
        ));
    }

    #[test]
    fn rejects_inverted_high_low() {
        let mut bar = PriceBar::flat(d("2025-06-02"), 10.0, 1);
        bar.high = 9.0;
        assert!(matches!(
            PriceSeries::new("X", vec![bar], d("2025-06-06")),
            Err(SeriesError::OhlcBounds { .. })
        ));
        let mut bar = PriceBar::flat(d("2025-06-02"), 10.0, 1);
        bar.adjusted_close = 0.0;
        assert!(matches!(
            PriceSeries::new("X", vec![bar], d("2025-06-06")),
            Err(SeriesError::NonPositivePrice { .. })
        ));
    }

    #[test]
    fn returns_use_adjusted_close() {
        let mut a = PriceBar::flat(d("2025-06-02"), 100.0, 1);
        a.adjusted_close = 50.0;
        let b = PriceBar::flat(d("2025-06-03"), 100.0, 1);
        let s = PriceSeries::new("X", vec![a, b], d("2025-06-03")).unwrap();
        assert_eq!(s.returns().daily_returns, vec![1.0]);
        assert_eq!(s.returns().dates, vec![d("2025-06-03")]);
    }
}
