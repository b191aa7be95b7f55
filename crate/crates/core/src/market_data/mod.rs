//! Price history and headlines, fetched through a provider, cached on disk and
//! frozen into snapshots so that nothing downstream can see past the as-of date.

mod cache;
mod corpus;
mod fetch;
mod live;
mod provider;
mod snapshot;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::DiskCache;
pub use corpus::{bundled_corpus, load_delisted_corpus, parse_corpus, DelistedCorpusEntry, BUNDLED_CORPUS_JSON};
pub use fetch::{end_of_day, fetch_headlines, fetch_price_history, headline_window};
pub use live::{FinnhubNewsProvider, RetryPolicy, Throttle, YahooQuoteProvider};
pub use provider::{CompositeProvider, DataProvider, FixtureProvider, ProviderError};
pub use snapshot::{pin_snapshot, read_series_csv, write_series_csv, Snapshot, SnapshotManifest, SnapshotRequest};

pub use equicrew_quant::{PriceBar, PriceSeries};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsHeadline {
    pub ticker: String,
    pub published_at: DateTime<Utc>,
    pub headline: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{ticker}: provider unavailable and nothing cached ({reason})")]
    ProviderUnavailable { ticker: String, reason: String },
    #[error("unknown ticker {0}")]
    UnknownTicker(String),
    #[error("{ticker}: insufficient history, need {needed} sessions, have {available}")]
    InsufficientHistory {
        ticker: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("fetch failed for {}", .0.iter().map(|(t, e)| format!("{t} ({e})")).collect::<Vec<_>>().join(", "))]
    PartialFetchFailure(Vec<(String, String)>),
    #[error("snapshot digest mismatch: manifest {expected}, content {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("corpus parse error: {0}")]
    CorpusParse(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub(crate) fn from_provider(ticker: &str, err: ProviderError) -> Self {
        match err {
            ProviderError::UnknownTicker => DataError::UnknownTicker(ticker.to_string()),
            other => DataError::ProviderUnavailable {
                ticker: ticker.to_string(),
                reason: other.to_string(),
            },
        }
    }
}
