//! Seeded fixture markets: a one-factor price model with sector labels, three
//! benchmark trackers and templated headlines, including data dated after the
//! as-of day so look-ahead gates have something to reject.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, TimeZone, Utc, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ProviderConfig, UniverseFile};
use crate::fsutil::write_atomic;
use crate::market_data::{write_series_csv, DataError, FixtureProvider, NewsHeadline, PriceBar};

pub const SECTORS: [&str; 8] = [
    "Technology",
    "Healthcare",
    "Financials",
    "Energy",
    "Industrials",
    "Consumer",
    "Utilities",
    "Materials",
];

pub const BENCHMARKS: [&str; 3] = ["SPY", "QQQ", "DIA"];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub tickers: usize,
    pub seed: u64,
    pub as_of: NaiveDate,
    /// Weekday sessions up to and including `as_of`.
    pub history_sessions: usize,
    /// Weekday sessions after `as_of`.
    pub future_sessions: usize,
    pub headlines_per_ticker: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tickers: 120,
            seed: 7,
            as_of: NaiveDate::from_ymd_opt(2025, 6, 6).expect("date"),
            history_sessions: 130,
            future_sessions: 45,
            headlines_per_ticker: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub spec: SyntheticSpec,
    /// Universe symbols, benchmarks excluded.
    pub tickers: Vec<String>,
    pub benchmarks: Vec<String>,
    pub sectors: BTreeMap<String, String>,
    pub bars: BTreeMap<String, Vec<PriceBar>>,
    pub news: BTreeMap<String, Vec<NewsHeadline>>,
}

const POSITIVE: [&str; 5] = [
    "{T} beats earnings expectations as revenue grows",
    "{T} raises full-year guidance after strong quarter",
    "Analysts upgrade {T} on record demand",
    "{T} wins major contract, shares rally",
    "{T} reports profit surge and expands buyback",
];
const NEGATIVE: [&str; 5] = [
    "{T} shares fall after weak outlook",
    "{T} misses estimates as analysts downgrade",
    "{T} faces lawsuit over product recall",
    "{T} cuts forecast amid slowing sales",
    "Regulators probe {T} accounting, stock slumps",
];
const NEUTRAL: [&str; 4] = [
    "{T} to present at industry conference",
    "{T} announces board appointment",
    "{T} schedules quarterly results call",
    "{T} opens new regional office",
];
const DISTRESS: [&str; 3] = [
    "{T} announces share offering as dilution concerns mount",
    "{T} discloses restructuring and layoffs",
    "{T} receives non-compliance notice from exchange",
];

fn symbol(i: usize) -> String {
    let mut n = i;
    let mut s = String::new();
    for _ in 0..3 {
        s.insert(0, (b'A' + (n % 26) as u8) as char);
        n /= 26;
    }
    format!("X{s}")
}

fn is_weekday(d: NaiveDate) -> bool {
    !matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

/// `before` weekday sessions ending at the last weekday on or before `as_of`,
/// followed by `after` weekday sessions.
pub fn weekday_calendar(as_of: NaiveDate, before: usize, after: usize) -> Vec<NaiveDate> {
    let mut past = Vec::with_capacity(before);
    let mut d = as_of;
    while past.len() < before {
        if is_weekday(d) {
            past.push(d);
        }
        d -= Duration::days(1);
    }
    past.reverse();
    let mut d = as_of + Duration::days(1);
    while past.len() < before + after {
        if is_weekday(d) {
            past.push(d);
        }
        d += Duration::days(1);
    }
    past
}

fn path_bars(rng: &mut ChaCha8Rng, dates: &[NaiveDate], returns: &[f64], start: f64, volume: f64, volume_drift: f64) -> Vec<PriceBar> {
    let noise = Normal::new(0.0, 0.25).expect("normal");
    let mut prev = start;
    dates
        .iter()
        .zip(returns)
        .enumerate()
        .map(|(t, (&date, &r))| {
            let close = (prev * (1.0 + r)).max(0.01);
            let open = (prev * (1.0 + r * rng.random_range(-0.3..0.3))).max(0.01);
            let high = open.max(close) * (1.0 + rng.random_range(0.0..0.01));
            let low = open.min(close) * (1.0 - rng.random_range(0.0..0.01));
            let v = volume * (1.0 + volume_drift * t as f64).max(0.05) * f64::exp(noise.sample(rng));
            prev = close;
            let round = |x: f64| (x * 1e4).round() / 1e4;
            let (open, close) = (round(open), round(close));
            PriceBar {
                date,
                open,
                high: round(high).max(open.max(close)),
                low: round(low).min(open.min(close)),
                close,
                adjusted_close: close,
                volume: v.round() as u64,
            }
        })
        .collect()
}

impl SyntheticMarket {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dates = weekday_calendar(spec.as_of, spec.history_sessions, spec.future_sessions);
        let n = dates.len();
        let market_dist = Normal::new(0.0004, 0.009).expect("normal");
        let market: Vec<f64> = (0..n).map(|_| market_dist.sample(&mut rng)).collect();
        let sector_dist = Normal::new(0.0, 0.004).expect("normal");
        let sector_factors: Vec<Vec<f64>> = SECTORS
            .iter()
            .map(|_| (0..n).map(|_| sector_dist.sample(&mut rng)).collect())
            .collect();

        let mut bars = BTreeMap::new();
        let mut news = BTreeMap::new();
        let mut sectors = BTreeMap::new();
        let mut tickers = Vec::with_capacity(spec.tickers);

        for (name, loading, noise_sd) in [("SPY", 1.0, 0.0005), ("QQQ", 1.2, 0.003), ("DIA", 0.9, 0.002)] {
            let eps = Normal::new(0.0, noise_sd).expect("normal");
            let rets: Vec<f64> = market.iter().map(|m| loading * m + eps.sample(&mut rng)).collect();
            let start = rng.random_range(300.0..500.0);
            bars.insert(name.to_string(), path_bars(&mut rng, &dates, &rets, start, 5e7, 0.0));
        }

        let drift_dist = Normal::new(0.0008, 0.003).expect("normal");
        for i in 0..spec.tickers {
            let t = symbol(i);
            let sector_idx = i % SECTORS.len();
            let beta = rng.random_range(0.5..1.6);
            let idio = rng.random_range(0.008..0.028);
            let drift = drift_dist.sample(&mut rng);
            let eps = Normal::new(drift, idio).expect("normal");
            let rets: Vec<f64> = (0..n)
                .map(|k| beta * market[k] + sector_factors[sector_idx][k] + eps.sample(&mut rng))
                .collect();
            let start = rng.random_range(8.0..250.0);
            let volume = rng.random_range(2e5..5e6);
            let vdrift = rng.random_range(-0.002..0.004);
            bars.insert(t.clone(), path_bars(&mut rng, &dates, &rets, start, volume, vdrift));
            sectors.insert(t.clone(), SECTORS[sector_idx].to_string());
            news.insert(t.clone(), Self::headlines(&mut rng, &t, spec, drift));
            tickers.push(t);
        }

        Self {
            spec: spec.clone(),
            tickers,
            benchmarks: BENCHMARKS.iter().map(|s| s.to_string()).collect(),
            sectors,
            bars,
            news,
        }
    }

    fn headlines(rng: &mut ChaCha8Rng, ticker: &str, spec: &SyntheticSpec, drift: f64) -> Vec<NewsHeadline> {
        let p_pos = (0.40 + drift * 150.0).clamp(0.1, 0.8);
        let span = (spec.future_sessions as i64 * 7 / 5).max(1);
        (0..spec.headlines_per_ticker)
            .map(|_| {
                let roll: f64 = rng.random();
                let template = if roll < 0.05 {
                    DISTRESS[rng.random_range(0..DISTRESS.len())]
                } else if roll < 0.05 + p_pos {
                    POSITIVE[rng.random_range(0..POSITIVE.len())]
                } else if roll < 0.05 + p_pos + 0.25 {
                    NEUTRAL[rng.random_range(0..NEUTRAL.len())]
                } else {
                    NEGATIVE[rng.random_range(0..NEGATIVE.len())]
                };
                let day = spec.as_of + Duration::days(rng.random_range(-10..=span));
                let published_at = Utc
                    .with_ymd_and_hms(day.year(), day.month(), day.day(), rng.random_range(0..24), rng.random_range(0..60), 0)
                    .single()
                    .expect("valid timestamp");
                NewsHeadline {
                    ticker: ticker.to_string(),
                    published_at,
                    headline: template.replace("{T}", ticker),
                    source: "synthetic".to_string(),
                    url: None,
                }
            })
            .collect()
    }

    /// All symbols with price data: universe plus benchmarks.
    pub fn all_symbols(&self) -> impl Iterator<Item = &String> {
        self.bars.keys()
    }

    pub fn provider(&self) -> FixtureProvider {
        let bars: HashMap<_, _> = self.bars.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let news: HashMap<_, _> = self.news.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        FixtureProvider::from_memory(bars, news)
    }

    /// Adjusted close on the last session on or before `date`.
    pub fn price_at(&self, symbol: &str, date: NaiveDate) -> Option<f64> {
        self.bars
            .get(symbol)?
            .iter()
            .take_while(|b| b.date <= date)
            .last()
            .map(|b| b.adjusted_close)
    }

    /// Writes `prices/`, `news/` and a `universe.toml` pointing at them.
    pub fn write_fixture_dir(&self, dir: &Path) -> Result<UniverseFile, DataError> {
        fs::create_dir_all(dir.join("prices"))?;
        fs::create_dir_all(dir.join("news"))?;
        for (t, b) in &self.bars {
            write_atomic(&dir.join("prices").join(format!("{t}.csv")), write_series_csv(b)?.as_bytes())?;
        }
        for (t, items) in &self.news {
            let body = serde_json::to_string_pretty(items).map_err(|e| DataError::InvalidData(e.to_string()))?;
            write_atomic(&dir.join("news").join(format!("{t}.json")), body.as_bytes())?;
        }
        let universe = UniverseFile {
            tickers: self.tickers.clone(),
            benchmarks: self.benchmarks.clone(),
            sectors: self.sectors.clone(),
            provider: ProviderConfig::Fixture { path: ".".into() },
        };
        let text = toml::to_string(&universe).map_err(|e| DataError::InvalidData(e.to_string()))?;
        write_atomic(&dir.join("universe.toml"), text.as_bytes())?;
        Ok(universe)
    }
}
