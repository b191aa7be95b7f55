use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fetch::end_of_day;
use super::{fetch_headlines, fetch_price_history, DataError, DataProvider, DiskCache, NewsHeadline, PriceBar, PriceSeries};
use crate::fsutil::{write_atomic, write_json};

const SERIES_HEADER: &str = "date,open,high,low,close,adjusted_close,volume";

/// Serializes bars with the `date,open,high,low,close,adjusted_close,volume` header.
pub fn write_series_csv(bars: &[PriceBar]) -> Result<String, DataError> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for bar in bars {
        w.serialize(bar).map_err(|e| DataError::InvalidData(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| DataError::InvalidData(e.to_string()))?;
    let mut text = String::from_utf8(bytes).map_err(|e| DataError::InvalidData(e.to_string()))?;
    if bars.is_empty() {
        text = format!("{SERIES_HEADER}\n");
    }
    Ok(text)
}

pub fn read_series_csv(text: &str) -> Result<Vec<PriceBar>, DataError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| DataError::InvalidData(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>().join(",") != SERIES_HEADER {
        return Err(DataError::InvalidData(format!("unexpected series header {headers:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| DataError::InvalidData(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRequest {
    pub universe: Vec<String>,
    /// Benchmark tracking series stored alongside the universe (no headlines).
    pub benchmarks: Vec<String>,
    pub as_of: NaiveDate,
    pub window_days: usize,
    pub lookback_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub snapshot_id: String,
    pub as_of: NaiveDate,
    pub universe: Vec<String>,
    pub benchmarks: Vec<String>,
    pub digest: String,
    pub created_at: DateTime<Utc>,
    pub window_days: usize,
    pub lookback_days: u32,
}

/// Price series and headlines frozen at one as-of date.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub manifest: SnapshotManifest,
    pub series: BTreeMap<String, PriceSeries>,
    pub headlines: BTreeMap<String, Vec<NewsHeadline>>,
}

impl Snapshot {
    pub fn id(&self) -> &str {
        &self.manifest.snapshot_id
    }

    pub fn as_of(&self) -> NaiveDate {
        self.manifest.as_of
    }

    pub fn universe(&self) -> &[String] {
        &self.manifest.universe
    }

    pub fn digest(&self) -> &str {
        &self.manifest.digest
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.manifest.universe.iter().any(|s| s == symbol)
    }

    pub fn series(&self, symbol: &str) -> Option<&PriceSeries> {
        self.series.get(symbol)
    }

    pub fn headlines(&self, symbol: &str) -> &[NewsHeadline] {
        self.headlines.get(symbol).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Hash over the canonical file contents; `created_at` is excluded so two pins of the
    /// same data agree.
    fn compute_digest(
        as_of: NaiveDate,
        universe: &[String],
        benchmarks: &[String],
        series: &BTreeMap<String, PriceSeries>,
        headlines: &BTreeMap<String, Vec<NewsHeadline>>,
    ) -> Result<String, DataError> {
        let mut h = Sha256::new();
        h.update(format!("as_of:{as_of}\nuniverse:{}\nbenchmarks:{}\n", universe.join(","), benchmarks.join(",")));
        for (ticker, s) in series {
            h.update(format!("series:{ticker}\n"));
            h.update(write_series_csv(s.bars())?.as_bytes());
        }
        for (ticker, items) in headlines {
            h.update(format!("headlines:{ticker}\n"));
            h.update(headlines_json(items)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), DataError> {
        for (ticker, s) in &self.series {
            write_atomic(&dir.join("series").join(format!("{ticker}.csv")), write_series_csv(s.bars())?.as_bytes())?;
        }
        for (ticker, items) in &self.headlines {
            write_atomic(&dir.join("headlines").join(format!("{ticker}.json")), headlines_json(items)?.as_bytes())?;
        }
        // manifest last: its presence marks a complete snapshot
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        Ok(())
    }

    /// Loads a snapshot and checks its content against the manifest digest.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let manifest: SnapshotManifest = crate::fsutil::read_json(&dir.join("manifest.json"))?;
        let mut series = BTreeMap::new();
        let mut headlines = BTreeMap::new();
        for ticker in manifest.universe.iter().chain(&manifest.benchmarks) {
            let text = fs::read_to_string(dir.join("series").join(format!("{ticker}.csv")))?;
            let s = PriceSeries::new(ticker.clone(), read_series_csv(&text)?, manifest.as_of)
                .map_err(|e| DataError::InvalidData(e.to_string()))?;
            series.insert(ticker.clone(), s);
        }
        for ticker in &manifest.universe {
            let bytes = fs::read(dir.join("headlines").join(format!("{ticker}.json")))?;
            let items: Vec<NewsHeadline> =
                serde_json::from_slice(&bytes).map_err(|e| DataError::InvalidData(e.to_string()))?;
            headlines.insert(ticker.clone(), items);
        }
        let actual = Self::compute_digest(manifest.as_of, &manifest.universe, &manifest.benchmarks, &series, &headlines)?;
        if actual != manifest.digest {
            return Err(DataError::DigestMismatch {
                expected: manifest.digest,
                actual,
            });
        }
        Ok(Self {
            manifest,
            series,
            headlines,
        })
    }
}

fn headlines_json(items: &[NewsHeadline]) -> Result<String, DataError> {
    let mut s = serde_json::to_string_pretty(items).map_err(|e| DataError::InvalidData(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Fetches and freezes every ticker's history and headlines, then writes the snapshot
/// to `dir`. Nothing is written when any ticker fails.
pub fn pin_snapshot(
    provider: &dyn DataProvider,
    cache: Option<&DiskCache>,
    request: &SnapshotRequest,
    dir: &Path,
) -> Result<Snapshot, DataError> {
    if request.universe.is_empty() {
        return Err(DataError::InvalidRequest("universe is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for t in request.universe.iter().chain(&request.benchmarks) {
        if !seen.insert(t.as_str()) {
            return Err(DataError::InvalidRequest(format!("duplicate ticker {t}")));
        }
    }
    let as_of = request.as_of;
    let fetched: Vec<(String, Result<(PriceSeries, Option<Vec<NewsHeadline>>), DataError>)> = request
        .universe
        .iter()
        .map(|t| (t, true))
        .chain(request.benchmarks.iter().map(|t| (t, false)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(ticker, with_news)| {
            let result = fetch_price_history(provider, cache, ticker, as_of, request.window_days).and_then(|s| {
                let news = if *with_news {
                    Some(fetch_headlines(provider, cache, ticker, as_of, request.lookback_days)?)
                } else {
                    None
                };
                Ok((s, news))
            });
            (ticker.to_string(), result)
        })
        .collect();

    let mut series = BTreeMap::new();
    let mut headlines = BTreeMap::new();
    let mut failures = Vec::new();
    let cutoff = end_of_day(as_of);
    for (ticker, result) in fetched {
        match result {
            Ok((s, news)) => {
                series.insert(ticker.clone(), s);
                if let Some(mut items) = news {
                    items.retain(|h| h.published_at < cutoff);
                    headlines.insert(ticker, items);
                }
            }
            Err(e) => failures.push((ticker, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(DataError::PartialFetchFailure(failures));
    }
    let digest = Snapshot::compute_digest(as_of, &request.universe, &request.benchmarks, &series, &headlines)?;
    let snapshot = Snapshot {
        manifest: SnapshotManifest {
            snapshot_id: format!("snap-{}-{}", as_of.format("%Y%m%d"), &digest[..12]),
            as_of,
            universe: request.universe.clone(),
            benchmarks: request.benchmarks.clone(),
            digest,
            created_at: Utc::now(),
            window_days: request.window_days,
            lookback_days: request.lookback_days,
        },
        series,
        headlines,
    };
    snapshot.write_to(dir)?;
    Ok(snapshot)
}
