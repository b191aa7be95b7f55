use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use thiserror::Error;

use super::{read_series_csv, NewsHeadline, PriceBar};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unavailable(String),
    #[error("no such symbol")]
    UnknownTicker,
    #[error("{0} does not serve this data")]
    Unsupported(&'static str),
    #[error("malformed provider response: {0}")]
    Malformed(String),
}

/// One interface over quotes and news. Implementations may serve only one of the two.
pub trait DataProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Daily bars dated within `[from, to]`, any order.
    fn daily_bars(&self, ticker: &str, from: NaiveDate, to: NaiveDate) -> Result<Vec<PriceBar>, ProviderError> {
        let _ = (ticker, from, to);
        Err(ProviderError::Unsupported("price history"))
    }

    /// Headlines published within `[from, to)`, any order.
    fn company_news(
        &self,
        ticker: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<NewsHeadline>, ProviderError> {
        let _ = (ticker, from, to);
        Err(ProviderError::Unsupported("news"))
    }
}

/// Deterministic provider over versioned files:
/// `prices/<TICKER>.csv` (series CSV schema) and `news/<TICKER>.json` (headline array).
/// A ticker without a price file is unknown; a missing news file means no headlines.
#[derive(Debug, Clone, Default)]
pub struct FixtureProvider {
    bars: HashMap<String, Vec<PriceBar>>,
    news: HashMap<String, Vec<NewsHeadline>>,
}

impl FixtureProvider {
    pub fn from_memory(bars: HashMap<String, Vec<PriceBar>>, news: HashMap<String, Vec<NewsHeadline>>) -> Self {
        Self { bars, news }
    }

    pub fn from_dir(dir: &Path) -> Result<Self, ProviderError> {
        let mut bars = HashMap::new();
        let mut news = HashMap::new();
        let unreadable = |p: &PathBuf, e: &dyn std::fmt::Display| ProviderError::Malformed(format!("{}: {e}", p.display()));
        let prices_dir = dir.join("prices");
        let entries = fs::read_dir(&prices_dir)
            .map_err(|e| ProviderError::Unavailable(format!("{}: {e}", prices_dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| ProviderError::Unavailable(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let ticker = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let text = fs::read_to_string(&path).map_err(|e| unreadable(&path, &e))?;
            bars.insert(ticker, read_series_csv(&text).map_err(|e| unreadable(&path, &e))?);
        }
        let news_dir = dir.join("news");
        if let Ok(entries) = fs::read_dir(&news_dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let ticker = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let text = fs::read_to_string(&path).map_err(|e| unreadable(&path, &e))?;
                let items: Vec<NewsHeadline> = serde_json::from_str(&text).map_err(|e| unreadable(&path, &e))?;
                news.insert(ticker, items);
            }
        }
        Ok(Self { bars, news })
    }

    pub fn tickers(&self) -> impl Iterator<Item = &str> {
        self.bars.keys().map(String::as_str)
    }
}

impl DataProvider for FixtureProvider {
    fn name(&self) -> &str {
        "fixture"
    }

    fn daily_bars(&self, ticker: &str, from: NaiveDate, to: NaiveDate) -> Result<Vec<PriceBar>, ProviderError> {
        let bars = self.bars.get(ticker).ok_or(ProviderError::UnknownTicker)?;
        Ok(bars.iter().filter(|b| b.date >= from && b.date <= to).cloned().collect())
    }

    fn company_news(
        &self,
        ticker: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<NewsHeadline>, ProviderError> {
        if !self.bars.contains_key(ticker) && !self.news.contains_key(ticker) {
            return Err(ProviderError::UnknownTicker);
        }
        Ok(self
            .news
            .get(ticker)
            .map(|items| {
                items
                    .iter()
                    .filter(|h| h.published_at >= from && h.published_at < to)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Routes price requests to one provider and news requests to another.
pub struct CompositeProvider {
    name: String,
    quotes: Box<dyn DataProvider>,
    news: Box<dyn DataProvider>,
}

impl CompositeProvider {
    pub fn new(quotes: Box<dyn DataProvider>, news: Box<dyn DataProvider>) -> Self {
        let name = format!("{}+{}", quotes.name(), news.name());
        Self { name, quotes, news }
    }
}

impl DataProvider for CompositeProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn daily_bars(&self, ticker: &str, from: NaiveDate, to: NaiveDate) -> Result<Vec<PriceBar>, ProviderError> {
        self.quotes.daily_bars(ticker, from, to)
    }

    fn company_news(
        &self,
        ticker: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<NewsHeadline>, ProviderError> {
        self.news.company_news(ticker, from, to)
    }
}
