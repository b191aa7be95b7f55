use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::NaiveDate;

use super::{read_series_csv, write_series_csv, DataError, NewsHeadline, PriceBar};
use crate::fsutil::write_atomic;

/// On-disk cache keyed by request parameters. Reads are lock-free; writes are
/// serialized and land atomically, so readers never see a partial file.
#[derive(Debug)]
pub struct DiskCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn price_path(&self, ticker: &str, as_of: NaiveDate, window: usize) -> PathBuf {
        self.root.join("prices").join(ticker).join(format!("{as_of}_{window}.csv"))
    }

    fn news_path(&self, ticker: &str, as_of: NaiveDate, lookback_days: u32) -> PathBuf {
        self.root.join("news").join(ticker).join(format!("{as_of}_{lookback_days}.json"))
    }

    pub fn get_prices(&self, ticker: &str, as_of: NaiveDate, window: usize) -> Option<Vec<PriceBar>> {
        let text = fs::read_to_string(self.price_path(ticker, as_of, window)).ok()?;
        read_series_csv(&text).ok()
    }

    pub fn put_prices(&self, ticker: &str, as_of: NaiveDate, window: usize, bars: &[PriceBar]) -> Result<(), DataError> {
        let text = write_series_csv(bars)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        write_atomic(&self.price_path(ticker, as_of, window), text.as_bytes())?;
        Ok(())
    }

    pub fn get_news(&self, ticker: &str, as_of: NaiveDate, lookback_days: u32) -> Option<Vec<NewsHeadline>> {
        let bytes = fs::read(self.news_path(ticker, as_of, lookback_days)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put_news(&self, ticker: &str, as_of: NaiveDate, lookback_days: u32, items: &[NewsHeadline]) -> Result<(), DataError> {
        let bytes = serde_json::to_vec_pretty(items).map_err(|e| DataError::InvalidData(e.to_string()))?;
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        write_atomic(&self.news_path(ticker, as_of, lookback_days), &bytes)?;
        Ok(())
    }
}
