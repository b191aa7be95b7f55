use chrono::{DateTime, Duration, NaiveDate, Utc};

use super::{DataError, DataProvider, DiskCache, NewsHeadline, PriceSeries};

/// First instant after `date` in UTC; headline windows are `[start, end_of_day)`.
pub fn end_of_day(date: NaiveDate) -> DateTime<Utc> {
    (date + Duration::days(1)).and_hms_opt(0, 0, 0).expect("midnight").and_utc()
}

/// `[as_of - lookback_days at 00:00 UTC, end of as_of)`.
pub fn headline_window(as_of: NaiveDate, lookback_days: u32) -> (DateTime<Utc>, DateTime<Utc>) {
    let start = (as_of - Duration::days(lookback_days as i64))
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc();
    (start, end_of_day(as_of))
}

/// At most `window_days` trading sessions ending at the last session on or before `as_of`.
///
/// Sessions are whatever bars the provider has; weekends and holidays are simply absent.
/// A cached response for the same `(ticker, as_of, window_days)` is served without
/// touching the provider.
pub fn fetch_price_history(
    provider: &dyn DataProvider,
    cache: Option<&DiskCache>,
    ticker: &str,
    as_of: NaiveDate,
    window_days: usize,
) -> Result<PriceSeries, DataError> {
    if window_days == 0 {
        return Err(DataError::InvalidRequest("window_days must be at least 1".into()));
    }
    if let Some(bars) = cache.and_then(|c| c.get_prices(ticker, as_of, window_days)) {
        return PriceSeries::new(ticker, bars, as_of).map_err(|e| DataError::InvalidData(e.to_string()));
    }
    // generous calendar span: ~5 sessions per 7 days plus holiday slack
    let from = as_of - Duration::days((window_days as i64) * 7 / 5 + 14);
    let mut bars = provider
        .daily_bars(ticker, from, as_of)
        .map_err(|e| DataError::from_provider(ticker, e))?;
    bars.retain(|b| b.date <= as_of);
    bars.sort_by_key(|b| b.date);
    bars.dedup_by_key(|b| b.date);
    if bars.is_empty() {
        return Err(DataError::InsufficientHistory {
            ticker: ticker.to_string(),
            needed: 1,
            available: 0,
        });
    }
    let start = bars.len().saturating_sub(window_days);
    let bars = bars.split_off(start);
    let series = PriceSeries::new(ticker, bars, as_of).map_err(|e| DataError::InvalidData(e.to_string()))?;
    if let Some(cache) = cache {
        cache.put_prices(ticker, as_of, window_days, series.bars())?;
    }
    Ok(series)
}

/// Headlines published in the lookback window ending with the as-of day, newest first.
pub fn fetch_headlines(
    provider: &dyn DataProvider,
    cache: Option<&DiskCache>,
    ticker: &str,
    as_of: NaiveDate,
    lookback_days: u32,
) -> Result<Vec<NewsHeadline>, DataError> {
    if lookback_days == 0 {
        return Err(DataError::InvalidRequest("lookback_days must be at least 1".into()));
    }
    if let Some(items) = cache.and_then(|c| c.get_news(ticker, as_of, lookback_days)) {
        return Ok(items);
    }
    let (start, end) = headline_window(as_of, lookback_days);
    let mut items = provider
        .company_news(ticker, start, end)
        .map_err(|e| DataError::from_provider(ticker, e))?;
    items.retain(|h| h.published_at >= start && h.published_at < end);
    sort_newest_first(&mut items);
    if let Some(cache) = cache {
        cache.put_news(ticker, as_of, lookback_days, &items)?;
    }
    Ok(items)
}

pub(crate) fn sort_newest_first(items: &mut [NewsHeadline]) {
    items.sort_by(|a, b| {
        b.published_at
            .cmp(&a.published_at)
            .then_with(|| a.headline.cmp(&b.headline))
    });
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::market_data::{FixtureProvider, PriceBar, ProviderError};

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    /// 30 weekday bars ending 2025-06-10.
    fn fixture() -> FixtureProvider {
        let mut bars = Vec::new();
        let mut date = d("2025-06-10");
        while bars.len() < 30 {
            if chrono::Datelike::weekday(&date).number_from_monday() <= 5 {
                bars.push(PriceBar::flat(date, 100.0 + bars.len() as f64, 1000));
            }
            date -= Duration::days(1);
        }
        bars.reverse();
        let t = |s: &str| DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc);
        let news = ["2025-06-02T10:00:00Z", "2025-06-05T12:00:00Z", "2025-06-06T23:59:00Z", "2025-06-07T00:00:00Z", "2025-06-09T08:00:00Z"]
            .iter()
            .enumerate()
            .map(|(i, ts)| NewsHeadline {
                ticker: "AAPL".into(),
                published_at: t(ts),
                headline: format!("headline {i}"),
                source: "fixture".into(),
                url: None,
            })
            .collect();
        FixtureProvider::from_memory(
            HashMap::from([("AAPL".to_string(), bars), ("EMPTY".to_string(), vec![PriceBar::flat(d("2025-06-02"), 5.0, 1)])]),
            HashMap::from([("AAPL".to_string(), news)]),
        )
    }

    #[test]
    fn price_history_respects_as_of_and_window() {
        let p = fixture();
        let s = fetch_price_history(&p, None, "AAPL", d("2025-06-06"), 21).unwrap();
        assert_eq!(s.len(), 21);
        assert_eq!(s.last_date(), Some(d("2025-06-06")));
        // the fixture bars dated on or before as_of, directly
        let all = p.daily_bars("AAPL", d("2000-01-01"), d("2030-01-01")).unwrap();
        let expected: Vec<_> = all.iter().filter(|b| b.date <= d("2025-06-06")).cloned().collect();
        let s = fetch_price_history(&p, None, "AAPL", d("2025-06-06"), 1000).unwrap();
        assert_eq!(s.bars(), &expected[..]);
    }

    #[test]
    fn zero_window_is_rejected() {
        assert!(matches!(
            fetch_price_history(&fixture(), None, "AAPL", d("2025-06-06"), 0),
            Err(DataError::InvalidRequest(_))
        ));
    }

    #[test]
    fn unknown_ticker() {
        assert!(matches!(
            fetch_price_history(&fixture(), None, "NOPE", d("2025-06-06"), 5),
            Err(DataError::UnknownTicker(_))
        ));
    }

    #[test]
    fn headlines_filtered_and_newest_first() {
        let items = fetch_headlines(&fixture(), None, "AAPL", d("2025-06-06"), 7).unwrap();
        let names: Vec<_> = items.iter().map(|h| h.headline.as_str()).collect();
        // 23:59 on the as-of day is inside the window; midnight after is not
        assert_eq!(names, ["headline 2", "headline 1", "headline 0"]);
        assert!(fetch_headlines(&fixture(), None, "EMPTY", d("2025-06-06"), 7).unwrap().is_empty());
    }

    #[test]
    fn cache_serves_when_provider_is_down() {
        struct Down;
        impl DataProvider for Down {
            fn name(&self) -> &str {
                "down"
            }
            fn daily_bars(&self, _: &str, _: NaiveDate, _: NaiveDate) -> Result<Vec<PriceBar>, ProviderError> {
                Err(ProviderError::Unavailable("offline".into()))
            }
            fn company_news(&self, _: &str, _: DateTime<Utc>, _: DateTime<Utc>) -> Result<Vec<NewsHeadline>, ProviderError> {
                Err(ProviderError::Unavailable("offline".into()))
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        let first = fetch_price_history(&fixture(), Some(&cache), "AAPL", d("2025-06-06"), 21).unwrap();
        let news = fetch_headlines(&fixture(), Some(&cache), "AAPL", d("2025-06-06"), 7).unwrap();
        let again = fetch_price_history(&Down, Some(&cache), "AAPL", d("2025-06-06"), 21).unwrap();
        assert_eq!(first, again);
        assert_eq!(news, fetch_headlines(&Down, Some(&cache), "AAPL", d("2025-06-06"), 7).unwrap());
        assert!(matches!(
            fetch_price_history(&Down, Some(&cache), "AAPL", d("2025-06-06"), 22),
            Err(DataError::ProviderUnavailable { .. })
        ));
    }
}
