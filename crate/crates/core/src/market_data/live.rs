//! HTTP providers: a Yahoo-style chart endpoint for daily bars and a Finnhub-style
//! company-news endpoint for headlines. Base URLs are configurable so both can be
//! pointed at local fixtures.

use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;

use super::{DataProvider, NewsHeadline, PriceBar, ProviderError};
pub use crate::net::{RetryPolicy, Throttle};
use crate::net::Attempt;

fn get_text(
    client: &Client,
    throttle: &Throttle,
    retry: &RetryPolicy,
    url: &str,
    query: &[(&str, String)],
) -> Result<String, ProviderError> {
    retry
        .run(|_| {
            throttle.wait();
            match client.get(url).query(query).send() {
                Err(e) => Attempt::Retry(ProviderError::Unavailable(e.to_string())),
                Ok(resp) => {
                    let status = resp.status();
                    if status == StatusCode::NOT_FOUND {
                        Attempt::Fail(ProviderError::UnknownTicker)
                    } else if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
                        Attempt::Retry(ProviderError::Unavailable(format!("HTTP {status}")))
                    } else if !status.is_success() {
                        Attempt::Fail(ProviderError::Unavailable(format!("HTTP {status}")))
                    } else {
                        match resp.text() {
                            Ok(t) => Attempt::Done(t),
                            Err(e) => Attempt::Retry(ProviderError::Unavailable(e.to_string())),
                        }
                    }
                }
            }
        })
        .map_err(|(e, _)| e)
}

pub struct YahooQuoteProvider {
    client: Client,
    base_url: String,
    throttle: Throttle,
    retry: RetryPolicy,
}

impl YahooQuoteProvider {
    pub const DEFAULT_BASE_URL: &'static str = "https://query1.finance.yahoo.com/v8/finance/chart";

    pub fn new(base_url: impl Into<String>, min_interval: Duration, retry: RetryPolicy) -> Self {
        Self {
            client: Client::builder()
                .timeout(Duration::from_secs(30))
                .user_agent("equicrew/0.1")
                .build()
                .expect("http client"),
            base_url: base_url.into(),
            throttle: Throttle::new(min_interval),
            retry,
        }
    }
}

#[derive(Deserialize)]
struct ChartEnvelope {
    chart: Chart,
}

#[derive(Deserialize)]
struct Chart {
    result: Option<Vec<ChartResult>>,
    error: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct ChartResult {
    meta: Option<ChartMeta>,
    #[serde(default)]
    timestamp: Vec<i64>,
    indicators: Indicators,
}

#[derive(Deserialize)]
struct ChartMeta {
    #[serde(default)]
    gmtoffset: i64,
}

#[derive(Deserialize)]
struct Indicators {
    quote: Vec<QuoteColumns>,
    #[serde(default)]
    adjclose: Vec<AdjCloseColumn>,
}

#[derive(Deserialize)]
struct QuoteColumns {
    open: Vec<Option<f64>>,
    high: Vec<Option<f64>>,
    low: Vec<Option<f64>>,
    close: Vec<Option<f64>>,
    volume: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct AdjCloseColumn {
    adjclose: Vec<Option<f64>>,
}

/// Parses a chart response body into bars, skipping rows with missing fields.
pub(crate) fn parse_chart(body: &str) -> Result<Vec<PriceBar>, ProviderError> {
    let env: ChartEnvelope = serde_json::from_str(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let result = match (env.chart.result, env.chart.error) {
        (Some(mut r), _) if !r.is_empty() => r.remove(0),
        (_, Some(_)) => return Err(ProviderError::UnknownTicker),
        _ => return Ok(Vec::new()),
    };
    let offset = result.meta.map(|m| m.gmtoffset).unwrap_or(0);
    let q = result.indicators.quote.first().ok_or_else(|| ProviderError::Malformed("no quote block".into()))?;
    let adj = result.indicators.adjclose.first().map(|a| &a.adjclose);
    let mut bars = Vec::new();
    for (i, ts) in result.timestamp.iter().enumerate() {
        let field = |col: &Vec<Option<f64>>| col.get(i).copied().flatten();
        let (Some(open), Some(high), Some(low), Some(close), Some(volume)) =
            (field(&q.open), field(&q.high), field(&q.low), field(&q.close), field(&q.volume))
        else {
            continue;
        };
        let adjusted_close = adj.and_then(field_at(i)).unwrap_or(close);
        let Some(dt) = DateTime::from_timestamp(ts + offset, 0) else {
            continue;
        };
        bars.push(PriceBar {
            date: dt.date_naive(),
            open,
            high: high.max(open.max(close)),
            low: low.min(open.min(close)),
            close,
            adjusted_close,
            volume: volume.max(0.0) as u64,
        });
    }
    Ok(bars)
}

fn field_at(i: usize) -> impl Fn(&Vec<Option<f64>>) -> Option<f64> {
    move |col| col.get(i).copied().flatten()
}

impl DataProvider for YahooQuoteProvider {
    fn name(&self) -> &str {
        "yahoo"
    }

    fn daily_bars(&self, ticker: &str, from: NaiveDate, to: NaiveDate) -> Result<Vec<PriceBar>, ProviderError> {
        let start = from.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp();
        let end = (to + chrono::Duration::days(1)).and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp();
        let url = format!("{}/{}", self.base_url.trim_end_matches('/'), ticker);
        let body = get_text(
            &self.client,
            &self.throttle,
            &self.retry,
            &url,
            &[
                ("period1", start.to_string()),
                ("period2", end.to_string()),
                ("interval", "1d".to_string()),
                ("events", "div,splits".to_string()),
            ],
        )?;
        let mut bars = parse_chart(&body)?;
        bars.retain(|b| b.date >= from && b.date <= to);
        Ok(bars)
    }
}

pub struct FinnhubNewsProvider {
    client: Client,
    base_url: String,
    api_key: String,
    throttle: Throttle,
    retry: RetryPolicy,
}

impl FinnhubNewsProvider {
    pub const DEFAULT_BASE_URL: &'static str = "https://finnhub.io/api/v1";

    pub fn new(base_url: impl Into<String>, api_key: String, min_interval: Duration, retry: RetryPolicy) -> Self {
        Self {
            client: Client::builder().timeout(Duration::from_secs(30)).build().expect("http client"),
            base_url: base_url.into(),
            api_key,
            throttle: Throttle::new(min_interval),
            retry,
        }
    }
}

#[derive(Deserialize)]
struct FinnhubItem {
    datetime: i64,
    headline: String,
    #[serde(default)]
    source: String,
    #[serde(default)]
    url: Option<String>,
}

pub(crate) fn parse_company_news(ticker: &str, body: &str) -> Result<Vec<NewsHeadline>, ProviderError> {
    let items: Vec<FinnhubItem> = serde_json::from_str(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    Ok(items
        .into_iter()
        .filter_map(|i| {
            Some(NewsHeadline {
                ticker: ticker.to_string(),
                published_at: DateTime::from_timestamp(i.datetime, 0)?,
                headline: i.headline,
                source: i.source,
                url: i.url.filter(|u| !u.is_empty()),
            })
        })
        .collect())
}

impl DataProvider for FinnhubNewsProvider {
    fn name(&self) -> &str {
        "finnhub"
    }

    fn company_news(
        &self,
        ticker: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<NewsHeadline>, ProviderError> {
        let url = format!("{}/company-news", self.base_url.trim_end_matches('/'));
        let body = get_text(
            &self.client,
            &self.throttle,
            &self.retry,
            &url,
            &[
                ("symbol", ticker.to_string()),
                ("from", from.date_naive().to_string()),
                ("to", to.date_naive().to_string()),
                ("token", self.api_key.clone()),
            ],
        )?;
        let mut items = parse_company_news(ticker, &body)?;
        items.retain(|h| h.published_at >= from && h.published_at < to);
        Ok(items)
    }
}
